//! Where a part sits relative to the best activation of each concept:
//! offset histograms on the feature lattice and their high-mass supports.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::DistanceField;
use crate::error::{Error, Result};
use crate::features::{AnnotationSet, FeatureMap};
use crate::lattice::{LatticeSpec, Offset, PointL0, PointL4, VOTING_RADIUS_PX};
use crate::sphere::sq_dist;

pub const DEFAULT_SUPPORT_MASS: f64 = 0.9;

/// A square window of offsets `[-radius, radius]^2`, indexed row-major by `(dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetWindow {
    pub radius: i32,
}

impl OffsetWindow {
    pub fn new(radius: i32) -> Result<Self> {
        if radius < 0 {
            return Err(Error::Argument(format!("offset window radius must be nonnegative, got {radius}")));
        }
        Ok(Self { radius })
    }

    pub fn side(&self) -> usize {
        (2 * self.radius + 1) as usize
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Uniform reference frequency `1 / len`.
    pub fn uniform(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn index(&self, off: Offset) -> Option<usize> {
        let r = self.radius;
        if off.dx.abs() > r || off.dy.abs() > r {
            return None;
        }
        Some((off.dy + r) as usize * self.side() + (off.dx + r) as usize)
    }

    pub fn offset(&self, index: usize) -> Offset {
        let side = self.side();
        Offset::new((index % side) as i32 - self.radius, (index / side) as i32 - self.radius)
    }

    pub fn clamp(&self, off: Offset) -> Offset {
        let r = self.radius;
        Offset::new(off.dx.clamp(-r, r), off.dy.clamp(-r, r))
    }
}

/// The cell near `q` that best activates a concept, and its offset from `q`'s cell.
///
/// `dist` gives the concept distance of each cell. Ties go to the
/// lexicographically smallest cell.
pub fn best_offset_by(spec: &LatticeSpec, q: PointL0, radius_px: f64, dist: impl Fn(PointL4) -> f64) -> Result<(PointL4, Offset)> {
    let cells = spec.disk_neighborhood(q, radius_px)?;
    let mut best: Option<(PointL4, f64)> = None;
    for c in cells {
        let d = dist(c);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((c, d));
        }
    }
    let (cell, _) = best.ok_or_else(|| {
        Error::Geometry(format!("no feature cell within {radius_px} px of ({}, {})", q.x, q.y))
    })?;
    let home = spec.map_down(q)?;
    Ok((cell, home.offset_to(&cell)))
}

/// `argmin_{p ∈ N(q)} ‖f_p - f_v‖` over the disk of `radius_px` around `q`.
pub fn best_offset(q: PointL0, map: &FeatureMap, f_v: &[f32], radius_px: f64) -> Result<(PointL4, Offset)> {
    if f_v.len() != map.dim() {
        return Err(Error::Argument("concept and map dimensions differ".into()));
    }
    let spec = *map.spec();
    best_offset_by(&spec, q, radius_px, |c| sq_dist(map.at(c), f_v))
}

/// Normalized offset histogram of one (concept, part) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMap {
    pub fr: Vec<f64>,
    pub samples: usize,
    /// How many offsets fell outside the window and were clamped onto its border.
    pub clamped: usize,
}

/// Histogram of offsets over `window`, normalized to sum to one.
pub fn fit_frequency(concept: usize, part: usize, offsets: &[Offset], window: OffsetWindow) -> Result<FrequencyMap> {
    if offsets.is_empty() {
        return Err(Error::EmptyModel { concept, part });
    }
    let mut counts = vec![0u64; window.len()];
    let mut clamped = 0;
    for &off in offsets {
        let idx = match window.index(off) {
            Some(i) => i,
            None => {
                clamped += 1;
                window.index(window.clamp(off)).expect("clamped offset lies in window")
            }
        };
        counts[idx] += 1;
    }
    if clamped > 0 {
        log::debug!("spatial: concept {concept} / part {part}: {clamped} offsets clamped to the window");
    }
    let n = offsets.len() as f64;
    Ok(FrequencyMap {
        fr: counts.iter().map(|&c| c as f64 / n).collect(),
        samples: offsets.len(),
        clamped,
    })
}

/// Offsets in descending frequency until their cumulative frequency reaches
/// `mass`; every offset tied with the last one taken is included too.
pub fn support_from_frequency(fr: &[f64], mass: f64) -> Result<Vec<bool>> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Argument(format!("support mass must lie in (0, 1], got {mass}")));
    }
    let mut order: Vec<usize> = (0..fr.len()).filter(|&i| fr[i] > 0.0).collect();
    order.sort_by(|&a, &b| fr[b].total_cmp(&fr[a]).then(a.cmp(&b)));
    let mut support = vec![false; fr.len()];
    let mut cum = 0.0;
    let mut cut: Option<f64> = None;
    for &i in &order {
        match cut {
            Some(c) if fr[i] < c => break,
            Some(_) => support[i] = true,
            None => {
                support[i] = true;
                cum += fr[i];
                // cumulative sums can round to just below a mass of exactly 1
                if cum >= mass - 1e-12 {
                    cut = Some(fr[i]);
                }
            }
        }
    }
    Ok(support)
}

/// Spatial statistics of one (concept, part) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialEntry {
    pub frequency: FrequencyMap,
    pub support: Vec<bool>,
}

/// Spatial model for every (concept, part) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialModel {
    pub window: OffsetWindow,
    pub search_radius_px: f64,
    pub mass: f64,
    pub num_concepts: usize,
    pub num_parts: usize,
    /// Indexed by `concept * num_parts + part`.
    pub entries: Vec<SpatialEntry>,
}

impl SpatialModel {
    pub fn entry(&self, concept: usize, part: usize) -> &SpatialEntry {
        &self.entries[concept * self.num_parts + part]
    }

    pub fn uniform(&self) -> f64 {
        self.window.uniform()
    }

    /// Support offsets of a pair with their frequencies, in window order.
    pub fn support(&self, concept: usize, part: usize) -> Vec<(Offset, f64)> {
        let e = self.entry(concept, part);
        e.support
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| (self.window.offset(i), e.frequency.fr[i]))
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Default offset window: the voting radius expressed in feature cells.
pub fn default_window(spec: &LatticeSpec) -> OffsetWindow {
    OffsetWindow {
        radius: spec.cells_for_radius(VOTING_RADIUS_PX) as i32,
    }
}

/// Best-activation offsets of every (concept, part) pair, tagged with the
/// training image they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSamples {
    pub window: OffsetWindow,
    pub search_radius_px: f64,
    pub num_concepts: usize,
    pub num_parts: usize,
    /// Indexed `[part][concept]`, in image order.
    samples: Vec<Vec<Vec<(usize, Offset)>>>,
}

impl OffsetSamples {
    pub fn of(&self, concept: usize, part: usize) -> &[(usize, Offset)] {
        &self.samples[part][concept]
    }

    /// Frequencies and supports from all samples.
    pub fn model(&self, mass: f64) -> Result<SpatialModel> {
        let (nv, ns) = (self.num_concepts, self.num_parts);
        let entries: Vec<SpatialEntry> = (0..nv * ns)
            .into_par_iter()
            .map(|i| {
                let (v, s) = (i / ns, i % ns);
                let offs: Vec<Offset> = self.of(v, s).iter().map(|&(_, o)| o).collect();
                let frequency = fit_frequency(v, s, &offs, self.window)?;
                let support = support_from_frequency(&frequency.fr, mass)?;
                Ok(SpatialEntry { frequency, support })
            })
            .collect::<Result<_>>()?;
        Ok(SpatialModel {
            window: self.window,
            search_radius_px: self.search_radius_px,
            mass,
            num_concepts: nv,
            num_parts: ns,
            entries,
        })
    }

    /// Support offsets of a pair learned without the samples of `image`,
    /// in window order. `None` when no other image contributes.
    pub fn held_out_support(&self, concept: usize, part: usize, image: usize, mass: f64) -> Result<Option<Vec<Offset>>> {
        let offs: Vec<Offset> = self
            .of(concept, part)
            .iter()
            .filter(|&&(i, _)| i != image)
            .map(|&(_, o)| o)
            .collect();
        if offs.is_empty() {
            return Ok(None);
        }
        let frequency = fit_frequency(concept, part, &offs, self.window)?;
        let support = support_from_frequency(&frequency.fr, mass)?;
        Ok(Some(
            support
                .iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(i, _)| self.window.offset(i))
                .collect(),
        ))
    }
}

/// Finds the best activation of every concept around every training positive.
pub fn collect_offsets(
    maps: &[FeatureMap],
    fields: &[DistanceField],
    annotations: &AnnotationSet,
    window: OffsetWindow,
    search_radius_px: f64,
) -> Result<OffsetSamples> {
    if maps.len() != annotations.images.len() || maps.len() != fields.len() {
        return Err(Error::Argument(format!(
            "{} maps, {} distance fields and {} annotations do not line up",
            maps.len(),
            fields.len(),
            annotations.images.len()
        )));
    }
    let num_parts = annotations.num_parts();
    let num_concepts = fields.first().map_or(0, DistanceField::num_concepts);
    let mut samples = vec![vec![Vec::new(); num_concepts]; num_parts];
    for (img, ((map, field), im)) in maps.iter().zip(fields).zip(&annotations.images).enumerate() {
        let spec = *map.spec();
        for pos in &im.positives {
            let q = pos.point();
            let per: Vec<Offset> = (0..num_concepts)
                .into_par_iter()
                .map(|v| {
                    let d = field.concept(v);
                    best_offset_by(&spec, q, search_radius_px, |c| d[spec.index(c)]).map(|(_, o)| o)
                })
                .collect::<Result<_>>()?;
            for (v, o) in per.into_iter().enumerate() {
                samples[pos.part][v].push((img, o));
            }
        }
    }
    Ok(OffsetSamples {
        window,
        search_radius_px,
        num_concepts,
        num_parts,
        samples,
    })
}

/// Learns offsets and supports for every (concept, part) pair from the
/// positives of an annotated training set.
pub fn learn_spatial(
    maps: &[FeatureMap],
    fields: &[DistanceField],
    annotations: &AnnotationSet,
    window: OffsetWindow,
    search_radius_px: f64,
    mass: f64,
) -> Result<SpatialModel> {
    collect_offsets(maps, fields, annotations, window, search_radius_px)?.model(mass)
}
