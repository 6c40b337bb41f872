//! Sparse binary encoding of feature maps by nearby concepts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bank::ConceptBank;
use crate::error::{Error, Result};
use crate::features::FeatureMap;

pub const DEFAULT_ENCODING_THRESHOLD: f64 = 0.7;

/// One bit per (cell, concept): set when the cell's feature lies strictly
/// within `threshold` of the concept center.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes {
    pub width: usize,
    pub height: usize,
    pub num_concepts: usize,
    pub threshold: f64,
    bits: Vec<bool>,
}

impl SparseCodes {
    pub fn code(&self, cell: usize) -> &[bool] {
        &self.bits[cell * self.num_concepts..(cell + 1) * self.num_concepts]
    }

    pub fn active(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.code(cell).iter().enumerate().filter(|(_, &b)| b).map(|(v, _)| v)
    }

    pub fn active_count(&self, cell: usize) -> usize {
        self.code(cell).iter().filter(|&&b| b).count()
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// Mean number of active concepts per cell.
    pub fn mean_active(&self) -> f64 {
        let total = self.bits.iter().filter(|&&b| b).count();
        total as f64 / self.num_cells().max(1) as f64
    }
}

fn check_dims(map: &FeatureMap, bank: &ConceptBank) -> Result<()> {
    if map.dim() != bank.dim() {
        return Err(Error::Argument(format!(
            "feature dimension {} does not match concept dimension {}",
            map.dim(),
            bank.dim()
        )));
    }
    Ok(())
}

pub fn encode_sparse(map: &FeatureMap, bank: &ConceptBank, threshold: f64) -> Result<SparseCodes> {
    check_dims(map, bank)?;
    let k = bank.len();
    let mut bits = vec![false; map.num_cells() * k];
    bits.par_chunks_exact_mut(k).enumerate().for_each(|(i, code)| {
        for (b, d) in code.iter_mut().zip(bank.distances(map.vector(i))) {
            *b = d < threshold;
        }
    });
    Ok(SparseCodes {
        width: map.width(),
        height: map.height(),
        num_concepts: k,
        threshold,
        bits,
    })
}

/// Distance from every cell of a map to every concept center, stored per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    num_cells: usize,
    num_concepts: usize,
    data: Vec<f64>,
}

impl DistanceField {
    pub fn compute(map: &FeatureMap, bank: &ConceptBank) -> Result<Self> {
        check_dims(map, bank)?;
        let n = map.num_cells();
        let k = bank.len();
        let mut data = vec![0.0; n * k];
        data.par_chunks_exact_mut(n).enumerate().for_each(|(v, row)| {
            let c = bank.center(v);
            for (i, d) in row.iter_mut().enumerate() {
                *d = crate::sphere::sq_dist(map.vector(i), c).sqrt();
            }
        });
        Ok(Self {
            num_cells: n,
            num_concepts: k,
            data,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_concepts(&self) -> usize {
        self.num_concepts
    }

    /// Distances of every cell to concept `v`, indexed like the map.
    pub fn concept(&self, v: usize) -> &[f64] {
        &self.data[v * self.num_cells..(v + 1) * self.num_cells]
    }

    pub fn get(&self, v: usize, cell: usize) -> f64 {
        self.data[v * self.num_cells + cell]
    }
}

/// Cell counts with 0, 1, 2 and 3 or more active concepts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub threshold: f64,
    pub counts: [u64; 4],
}

impl ActivationRow {
    /// Bucket holding the most cells, lowest bucket on ties.
    pub fn mode(&self) -> usize {
        (0..4).fold(0, |b, i| if self.counts[i] > self.counts[b] { i } else { b })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    /// One row per threshold, in ascending threshold order.
    pub rows: Vec<ActivationRow>,
    /// Smallest threshold at which most cells activate at least one concept.
    pub crossing: Option<f64>,
}

pub fn activation_histogram(maps: &[FeatureMap], bank: &ConceptBank, thresholds: &[f64]) -> Result<ActivationReport> {
    if thresholds.is_empty() {
        return Err(Error::Argument("threshold list is empty".into()));
    }
    let mut ts = thresholds.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut dists: Vec<Vec<f64>> = Vec::new();
    for map in maps {
        check_dims(map, bank)?;
        let per: Vec<Vec<f64>> = (0..map.num_cells())
            .into_par_iter()
            .map(|i| bank.distances(map.vector(i)))
            .collect();
        dists.extend(per);
    }
    let rows: Vec<ActivationRow> = ts
        .iter()
        .map(|&t| {
            let mut counts = [0u64; 4];
            for d in &dists {
                let n = d.iter().filter(|&&x| x < t).count();
                counts[n.min(3)] += 1;
            }
            ActivationRow { threshold: t, counts }
        })
        .collect();
    let crossing = rows.iter().find(|r| r.mode() >= 1).map(|r| r.threshold);
    Ok(ActivationReport { rows, crossing })
}
