//! Activation-distance histograms near parts and away from them, the
//! log-likelihood-ratio evidence they define, and voter selection.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::DistanceField;
use crate::error::{Error, Result};
use crate::features::{AnnotationSet, FeatureMap};
use crate::lattice::{Offset, PointL0};
use crate::spatial::{OffsetSamples, SpatialModel};

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Largest distance between unit vectors.
pub const R_MAX: f64 = 2.0;
pub const DEFAULT_VOTERS: usize = 45;
/// Quantile of the positive distribution below which sources may vote.
pub const DEFAULT_CUTOFF_QUANTILE: f64 = 0.95;

/// Evidence for one (concept, part) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    /// Densities over equal bins of `[0, 2]`, integrating to one.
    pub f_plus: Vec<f64>,
    pub f_minus: Vec<f64>,
    /// `ln((F+ + ε) / (F- + ε))` per bin.
    pub lambda: Vec<f64>,
    pub n_plus: usize,
    pub n_minus: usize,
    /// Last bin whose cumulative positive mass is still below the cutoff quantile.
    pub cutoff_bin: usize,
}

impl EvidenceEntry {
    pub fn bins(&self) -> usize {
        self.lambda.len()
    }

    pub fn bin_width(&self) -> f64 {
        R_MAX / self.bins() as f64
    }

    pub fn bin_of(&self, r: f64) -> usize {
        bin_index(r, self.bins())
    }

    pub fn mass_plus(&self) -> Vec<f64> {
        let w = self.bin_width();
        self.f_plus.iter().map(|d| d * w).collect()
    }

    pub fn mass_minus(&self) -> Vec<f64> {
        let w = self.bin_width();
        self.f_minus.iter().map(|d| d * w).collect()
    }

    /// `r` at which the positive CDF reaches one half: upper edge of that bin.
    pub fn median_plus(&self) -> f64 {
        (quantile_bin(&self.mass_plus(), 0.5) + 1) as f64 * self.bin_width()
    }

    /// Positive mass weighted by positive evidence, `Σ_b mass+_b max(Λ_b, 0)`.
    pub fn positive_lambda_mass(&self) -> f64 {
        self.mass_plus()
            .iter()
            .zip(&self.lambda)
            .map(|(m, l)| m * l.max(0.0))
            .sum()
    }

    /// Whether a source at distance `r` is unlikely to be a false negative.
    pub fn passes_cutoff(&self, r: f64) -> bool {
        self.bin_of(r) <= self.cutoff_bin
    }
}

pub(crate) fn bin_index(r: f64, bins: usize) -> usize {
    let b = (r.max(0.0) / (R_MAX / bins as f64)).floor();
    (b as usize).min(bins - 1)
}

fn quantile_bin(mass: &[f64], q: f64) -> usize {
    let mut cum = 0.0;
    for (b, m) in mass.iter().enumerate() {
        cum += m;
        if cum >= q - 1e-12 {
            return b;
        }
    }
    mass.len() - 1
}

fn densities(samples: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0u64; bins];
    for &r in samples {
        counts[bin_index(r, bins)] += 1;
    }
    let scale = 1.0 / (samples.len() as f64 * (R_MAX / bins as f64));
    counts.iter().map(|&c| c as f64 * scale).collect()
}

/// Histogram evidence from positive and negative minimum distances.
pub fn estimate_histograms(
    concept: usize,
    part: usize,
    positives: &[f64],
    negatives: &[f64],
    bins: usize,
    epsilon: f64,
) -> Result<EvidenceEntry> {
    if bins == 0 {
        return Err(Error::Argument("need at least one bin".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let missing = |which: &str| Error::TrainingData {
        concept,
        part,
        msg: format!("no {which} samples"),
    };
    if positives.is_empty() {
        return Err(missing("positive"));
    }
    if negatives.is_empty() {
        return Err(missing("negative"));
    }
    let f_plus = densities(positives, bins);
    let f_minus = densities(negatives, bins);
    let lambda = f_plus
        .iter()
        .zip(&f_minus)
        .map(|(p, m)| ((p + epsilon) / (m + epsilon)).ln())
        .collect();
    let w = R_MAX / bins as f64;
    let mass: Vec<f64> = f_plus.iter().map(|d| d * w).collect();
    Ok(EvidenceEntry {
        cutoff_bin: quantile_bin(&mass, DEFAULT_CUTOFF_QUANTILE),
        f_plus,
        f_minus,
        lambda,
        n_plus: positives.len(),
        n_minus: negatives.len(),
    })
}

/// Evidence `Λ(r)` by lookup of the bin holding `r`; larger `r` uses the last bin.
pub fn lambda_of(entry: &EvidenceEntry, r: f64) -> f64 {
    entry.lambda[entry.bin_of(r)]
}

/// Evidence model for every (concept, part) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceModel {
    pub bins: usize,
    pub epsilon: f64,
    pub num_concepts: usize,
    pub num_parts: usize,
    /// Indexed by `concept * num_parts + part`.
    pub entries: Vec<EvidenceEntry>,
}

impl EvidenceModel {
    pub fn entry(&self, concept: usize, part: usize) -> &EvidenceEntry {
        &self.entries[concept * self.num_parts + part]
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

/// Smallest concept distance over the support of a pair, placed at `q`.
/// `None` when every support cell falls outside the map.
pub fn min_distance(map: &FeatureMap, dist: &[f64], spatial: &SpatialModel, concept: usize, part: usize, q: PointL0) -> Option<f64> {
    let support: Vec<Offset> = spatial.support(concept, part).into_iter().map(|(o, _)| o).collect();
    min_distance_over(map, dist, &support, q)
}

/// Smallest distance over the cells at `offsets` from the cell of `q`.
pub fn min_distance_over(map: &FeatureMap, dist: &[f64], offsets: &[Offset], q: PointL0) -> Option<f64> {
    let spec = map.spec();
    let home = spec.map_down(q).ok()?;
    offsets
        .iter()
        .map(|off| home.shifted(*off))
        .filter(|c| spec.contains_l4(*c))
        .map(|c| dist[spec.index(c)])
        .min_by(f64::total_cmp)
}

/// Estimates evidence for every pair from training positives and negatives
/// of each part. Negatives are the image negatives plus other parts' centers,
/// all at least `gamma` from the part's own positives.
///
/// With `held_out` given, each positive is measured over the support learned
/// from the other training images, so that a positive's own best activation
/// does not pull its distance down.
pub fn learn_evidence(
    maps: &[FeatureMap],
    fields: &[DistanceField],
    annotations: &AnnotationSet,
    spatial: &SpatialModel,
    held_out: Option<&OffsetSamples>,
    bins: usize,
    epsilon: f64,
) -> Result<EvidenceModel> {
    let (nv, ns) = (spatial.num_concepts, spatial.num_parts);
    let entries: Vec<EvidenceEntry> = (0..nv * ns)
        .into_par_iter()
        .map(|i| {
            let (v, s) = (i / ns, i % ns);
            let support: Vec<Offset> = spatial.support(v, s).into_iter().map(|(o, _)| o).collect();
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (img, ((map, field), im)) in maps.iter().zip(fields).zip(&annotations.images).enumerate() {
                let d = field.concept(v);
                let own = match held_out {
                    Some(h) => h.held_out_support(v, s, img, spatial.mass)?,
                    None => None,
                };
                let pos_support = own.as_deref().unwrap_or(&support);
                pos.extend(im.positives_of(s).filter_map(|q| min_distance_over(map, d, pos_support, q)));
                neg.extend(
                    im.negatives_for(s, annotations.gamma)
                        .into_iter()
                        .filter_map(|q| min_distance_over(map, d, &support, q)),
                );
            }
            estimate_histograms(v, s, &pos, &neg, bins, epsilon)
        })
        .collect::<Result<_>>()?;
    Ok(EvidenceModel {
        bins,
        epsilon,
        num_concepts: nv,
        num_parts: ns,
        entries,
    })
}

/// Ranked voting concepts per part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterSet {
    pub k: usize,
    pub part_names: Vec<String>,
    pub voters: Vec<Vec<usize>>,
}

impl VoterSet {
    pub fn of(&self, part: usize) -> &[usize] {
        &self.voters[part]
    }

    pub fn num_parts(&self) -> usize {
        self.voters.len()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Picks `k` concepts per part: smallest positive median distance first,
/// then larger positive evidence mass, then lower concept id.
pub fn select_voters(evidence: &EvidenceModel, k: usize, part_names: &[String]) -> Result<VoterSet> {
    if k == 0 {
        return Err(Error::Argument("need at least one voter per part".into()));
    }
    let voters = (0..evidence.num_parts)
        .map(|s| {
            let mut ranked: Vec<(usize, f64, f64)> = (0..evidence.num_concepts)
                .map(|v| {
                    let e = evidence.entry(v, s);
                    (v, e.median_plus(), e.positive_lambda_mass())
                })
                .collect();
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
            if ranked.len() < k {
                log::warn!(
                    "part {s}: only {} candidate concepts for {k} voters, using all",
                    ranked.len()
                );
            }
            ranked.into_iter().take(k).map(|r| r.0).collect()
        })
        .collect();
    Ok(VoterSet {
        k,
        part_names: part_names.to_vec(),
        voters,
    })
}
