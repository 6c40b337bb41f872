//! How well single concepts detect semantic parts on their own.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{evaluate_detections, Matcher};
use crate::concepts::{ConceptBank, DistanceField};
use crate::error::{Error, Result};
use crate::features::{in_box, AnnotationSet, FeatureMap};
use crate::lattice::{PointL0, CONCEPT_RADIUS_PX};
use crate::likelihood::R_MAX;
use crate::voting::{nms, original_center, Detection, DEFAULT_NMS_RADIUS_PX};

/// Largest part subset searched by default.
pub const DEFAULT_MAX_SUBSET: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "max_k")]
pub enum ConceptMode {
    Single,
    Subset(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptEvalParams {
    pub gamma_th: f64,
    pub nms_radius_px: f64,
    /// Restricts firings to the bounding box of the part patches of this side.
    pub crop_side: Option<f64>,
}

impl Default for ConceptEvalParams {
    fn default() -> Self {
        Self {
            gamma_th: CONCEPT_RADIUS_PX,
            nms_radius_px: DEFAULT_NMS_RADIUS_PX,
            crop_side: Some(f64::from(crate::features::annotation::DEFAULT_PATCH_SIDE)),
        }
    }
}

/// The best part subset for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: usize,
    pub parts: Vec<usize>,
    pub ap: f64,
    /// AP against each single part; `None` where the part never appears.
    pub per_part: Vec<Option<f64>>,
}

/// Concept responses as detections scored `2 - r`, suppressed within
/// `nms_radius_px`. Cells outside `crop` are ignored.
pub fn concept_firings(
    map: &FeatureMap,
    dist: &[f64],
    part: usize,
    crop: Option<&[f64; 4]>,
    nms_radius_px: f64,
) -> Result<Vec<Detection>> {
    let spec = map.spec();
    let tag = f64::from(map.scale_tag());
    let scores: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(i, &r)| match crop {
            Some(b) if !in_box(original_center(spec, i, tag), b) => f64::NEG_INFINITY,
            _ => R_MAX - r,
        })
        .collect();
    nms(spec, &scores, part, tag, nms_radius_px, f64::NEG_INFINITY)
}

/// Subsets of `0..n` with sizes `1..=max_k`, by size then lexicographically.
pub fn part_subsets(n: usize, max_k: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            extend(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for k in 1..=max_k.min(n) {
        extend(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// Keypoint AP of every concept against every part, or against the best
/// subset of parts whose union of positives counts as ground truth.
pub fn evaluate_concept(
    bank: &ConceptBank,
    maps: &[FeatureMap],
    annotations: &AnnotationSet,
    mode: ConceptMode,
    params: &ConceptEvalParams,
) -> Result<Vec<ConceptScore>> {
    if maps.len() != annotations.images.len() {
        return Err(Error::Argument(format!(
            "{} maps but {} annotated images",
            maps.len(),
            annotations.images.len()
        )));
    }
    let max_k = match mode {
        ConceptMode::Single => 1,
        ConceptMode::Subset(k) if k >= 1 => k,
        ConceptMode::Subset(k) => return Err(Error::Argument(format!("subset size must be at least 1, got {k}"))),
    };
    let n_parts = annotations.num_parts();
    let fields: Vec<DistanceField> = maps
        .par_iter()
        .map(|m| DistanceField::compute(m, bank))
        .collect::<Result<_>>()?;
    let crops: Vec<Option<[f64; 4]>> = annotations
        .images
        .iter()
        .map(|a| params.crop_side.and_then(|s| a.object_box(s)))
        .collect();
    let subsets = part_subsets(n_parts, max_k);
    let matcher = Matcher::Keypoint { gamma: params.gamma_th };

    (0..bank.len())
        .into_par_iter()
        .map(|v| {
            let firings: Vec<Vec<Detection>> = maps
                .iter()
                .zip(&fields)
                .zip(&crops)
                .map(|((m, f), c)| concept_firings(m, f.concept(v), 0, c.as_ref(), params.nms_radius_px))
                .collect::<Result<_>>()?;
            let ap_of = |subset: &[usize]| -> Result<Option<f64>> {
                let images: Vec<(Vec<Detection>, Vec<PointL0>)> = firings
                    .iter()
                    .zip(&annotations.images)
                    .map(|(d, a)| {
                        let gts = a
                            .positives
                            .iter()
                            .filter(|p| subset.contains(&p.part))
                            .map(|p| p.point())
                            .collect();
                        (d.clone(), gts)
                    })
                    .collect();
                match evaluate_detections(&images, matcher) {
                    Ok(c) => Ok(Some(c.ap)),
                    Err(Error::UndefinedAp) => Ok(None),
                    Err(e) => Err(e),
                }
            };
            let per_part = (0..n_parts).map(|s| ap_of(&[s])).collect::<Result<Vec<_>>>()?;
            let mut best: Option<(Vec<usize>, f64)> = None;
            for subset in &subsets {
                let ap = if subset.len() == 1 { per_part[subset[0]] } else { ap_of(subset)? };
                if let Some(ap) = ap {
                    if best.as_ref().is_none_or(|(_, b)| ap > *b) {
                        best = Some((subset.clone(), ap));
                    }
                }
            }
            let (parts, ap) = best.ok_or(Error::UndefinedAp)?;
            Ok(ConceptScore {
                concept: v,
                parts,
                ap,
                per_part,
            })
        })
        .collect()
}

/// Counts of AP values in `bins` equal bins over `[0, 1]`.
pub fn ap_histogram(aps: impl IntoIterator<Item = f64>, bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins.max(1)];
    let n = h.len();
    for ap in aps {
        let b = ((ap.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n - 1);
        h[b] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::Method;
    use crate::features::synth::{generate_scene, SyntheticWorld, WorldConfig};
    use crate::lattice::LatticeSpec;
    use crate::sphere::VectorSet;

    fn fixture() -> (SyntheticWorld, Vec<FeatureMap>, AnnotationSet) {
        let world = SyntheticWorld::generate(&WorldConfig::default(), 3).unwrap();
        let spec = LatticeSpec::new(320, 240, 16, 8).unwrap();
        let mut maps = Vec::new();
        let mut images = Vec::new();
        for s in 0..6 {
            let (m, a) = generate_scene(&world, &spec, 100 + s).unwrap();
            maps.push(m);
            images.extend(a.images);
        }
        let ann = world.annotation_set(images);
        (world, maps, ann)
    }

    #[test]
    fn subsets_enumerated_in_order() {
        assert_eq!(part_subsets(3, 2), vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(part_subsets(5, 4).len(), 5 + 10 + 10 + 5);
        assert_eq!(part_subsets(2, 4).len(), 3);
    }

    #[test]
    fn signature_concept_finds_its_part() {
        let (world, maps, ann) = fixture();
        // one concept per part: the signature of the part's central element
        let rows: Vec<Vec<f32>> = world.parts.iter().map(|p| world.signatures[p.elements[0].signature].clone()).collect();
        let bank = ConceptBank::new(VectorSet::from_rows(&rows).unwrap(), 30.0, Method::Kmeans, rows.len(), vec![]).unwrap();
        let params = ConceptEvalParams::default();
        let single = evaluate_concept(&bank, &maps, &ann, ConceptMode::Single, &params).unwrap();
        for (s, c) in single.iter().enumerate() {
            assert_eq!(c.parts, vec![s]);
            assert!(c.ap > 0.9, "{c:?}");
        }
        let one = evaluate_concept(&bank, &maps, &ann, ConceptMode::Subset(1), &params).unwrap();
        assert_eq!(one, single);
        let sub = evaluate_concept(&bank, &maps, &ann, ConceptMode::Subset(4), &params).unwrap();
        for (a, b) in sub.iter().zip(&single) {
            assert!(a.ap >= b.ap);
        }
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(ap_histogram([0.0, 0.05, 0.5, 1.0, 0.99], 10), vec![2, 0, 0, 0, 0, 1, 0, 0, 0, 2]);
    }
}
