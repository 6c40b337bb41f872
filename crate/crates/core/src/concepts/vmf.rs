//! Mixture of von Mises-Fisher distributions fitted by EM, with soft
//! assignments given by a softmax over `η f_p·f_v`.

use rayon::prelude::*;

use super::bank::{ConceptBank, Method};
use super::kmeans::{dot_mixed, kmeans_pp, normalize64, to_vector_set};
use crate::error::{Error, Result};
use crate::seed;
use crate::sphere::VectorSet;

/// Row-major soft assignment: `q[p * k + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    k: usize,
    q: Vec<f64>,
}

impl SoftAssignment {
    pub fn new(k: usize, q: Vec<f64>) -> Result<Self> {
        if k == 0 || q.len() % k != 0 {
            return Err(Error::Argument(format!("{} weights do not split into rows of {k}", q.len())));
        }
        Ok(Self { k, q })
    }

    pub fn num_concepts(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.q.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.q[p * self.k..(p + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.q.chunks_exact(self.k)
    }

    /// Most responsible concept per point, lowest index on ties.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (v, &x)| if x > b.1 { (v, x) } else { b })
                    .0
            })
            .collect()
    }
}

/// Result of EM.
#[derive(Debug, Clone)]
pub struct VmfFit {
    pub bank: ConceptBank,
    pub assignment: SoftAssignment,
    /// Free energy after each M-step, evaluated with that iteration's assignment.
    pub trace: Vec<f64>,
}

fn softmax_row(p: &[f32], centers: &[Vec<f64>], eta: f64, out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(centers) {
        *o = eta * dot_mixed(p, c);
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn centers_of(bank: &ConceptBank) -> Vec<Vec<f64>> {
    bank.centers()
        .rows()
        .map(|c| c.iter().map(|&x| f64::from(x)).collect())
        .collect()
}

fn e_step(points: &VectorSet, centers: &[Vec<f64>], eta: f64) -> SoftAssignment {
    let k = centers.len();
    let mut q = vec![0.0; points.len() * k];
    q.par_chunks_exact_mut(k)
        .zip(points.as_slice().par_chunks_exact(points.dim()))
        .for_each(|(row, p)| softmax_row(p, centers, eta, row));
    SoftAssignment { k, q }
}

/// Soft assignment `q_v(p) = softmax_v(η f_p·f_v)` with the bank's η.
pub fn vmf_e_step(points: &VectorSet, bank: &ConceptBank) -> SoftAssignment {
    e_step(points, &centers_of(bank), bank.eta())
}

fn m_step(points: &VectorSet, soft: &SoftAssignment, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points.dim();
    let mut centers: Vec<Option<Vec<f64>>> = (0..soft.k)
        .into_par_iter()
        .map(|v| {
            let mut s = vec![0.0; d];
            let mut mass = 0.0;
            for (p, row) in points.rows().zip(soft.rows()) {
                let w = row[v];
                if w > 0.0 {
                    mass += w;
                    for (si, x) in s.iter_mut().zip(p) {
                        *si += w * f64::from(*x);
                    }
                }
            }
            if mass > 0.0 {
                normalize64(&s)
            } else {
                None
            }
        })
        .collect();
    for v in 0..soft.k {
        if centers[v].is_some() {
            continue;
        }
        // the point least well explained by the current centers
        let taken: Vec<Vec<f64>> = centers.iter().flatten().cloned().collect();
        let pool = if taken.is_empty() { previous.to_vec() } else { taken };
        let far = points
            .rows()
            .enumerate()
            .map(|(i, p)| (i, pool.iter().map(|c| dot_mixed(p, c)).fold(f64::NEG_INFINITY, f64::max)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        log::info!("vmf: concept {v} has no responsibility, re-seeded at point {far}");
        centers[v] = Some(points.row(far).iter().map(|&x| f64::from(x)).collect());
    }
    centers.into_iter().map(Option::unwrap).collect()
}

/// Responsibility-weighted normalized means; a concept with no
/// responsibility is re-seeded at the point farthest from all other centers.
pub fn vmf_m_step(points: &VectorSet, soft: &SoftAssignment, bank: &ConceptBank) -> Result<ConceptBank> {
    if soft.len() != points.len() || soft.k != bank.len() {
        return Err(Error::Argument("assignment shape does not match points and bank".into()));
    }
    let centers = m_step(points, soft, &centers_of(bank));
    ConceptBank::new(
        to_vector_set(points.dim(), &centers)?,
        bank.eta(),
        bank.method(),
        bank.k_init(),
        bank.merge_log().to_vec(),
    )
}

fn energy(points: &VectorSet, centers: &[Vec<f64>], soft: &SoftAssignment, eta: f64) -> f64 {
    let per: Vec<f64> = points
        .as_slice()
        .par_chunks_exact(points.dim())
        .zip(soft.q.par_chunks_exact(soft.k))
        .map(|(p, row)| {
            row.iter()
                .zip(centers)
                .filter(|(q, _)| **q > 0.0)
                .map(|(&q, c)| q * (-eta * dot_mixed(p, c) + q.ln()))
                .sum::<f64>()
        })
        .collect();
    per.iter().sum()
}

/// EM free energy `Σ_p Σ_v q_v(p) (-η f_p·f_v + ln q_v(p))`, dropping the
/// constant log-normalizer of the fixed-η distribution.
pub fn free_energy(points: &VectorSet, bank: &ConceptBank, soft: &SoftAssignment) -> f64 {
    energy(points, &centers_of(bank), soft, bank.eta())
}

/// `-Σ_p Σ_v q_v(p) log Σ_ν exp(η f_p·f_ν)` with `q` the softmax.
pub fn mixture_cost(points: &VectorSet, bank: &ConceptBank) -> f64 {
    let centers = centers_of(bank);
    let eta = bank.eta();
    let per: Vec<f64> = points
        .as_slice()
        .par_chunks_exact(points.dim())
        .map(|p| {
            let s: Vec<f64> = centers.iter().map(|c| eta * dot_mixed(p, c)).collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            s.iter().map(|x| -((x - m).exp() / z) * lse).sum::<f64>()
        })
        .collect();
    per.iter().sum()
}

/// Whether the centers stay pairwise distinct once stored in single precision.
fn distinct(dim: usize, centers: &[Vec<f64>]) -> Result<bool> {
    let set = to_vector_set(dim, centers)?;
    Ok((0..set.len()).all(|a| (0..a).all(|b| crate::sphere::dot(set.row(a), set.row(b)) < 1.0 - 1e-9)))
}

pub fn vmf_fit(points: &VectorSet, k: usize, eta: f64, seed: u64, max_iters: usize, tol: f64) -> Result<VmfFit> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Argument(format!("eta must be positive, got {eta}")));
    }
    let mut rng = seed::named_rng(seed, "vmf/seeding");
    let mut centers = kmeans_pp(points, k, &mut rng)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut soft = e_step(points, &centers, eta);
    for _ in 0..max_iters.max(1) {
        let next = m_step(points, &soft, &centers);
        if !distinct(points.dim(), &next)? {
            log::warn!("vmf: two components collapsed onto one center; stopping at the previous iterate");
            break;
        }
        centers = next;
        let f = energy(points, &centers, &soft, eta);
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (prev - f).abs() <= tol * prev.abs().max(1.0));
        trace.push(f);
        soft = e_step(points, &centers, eta);
        if done {
            break;
        }
    }
    let bank = ConceptBank::new(to_vector_set(points.dim(), &centers)?, eta, Method::Vmf, k, vec![])?;
    Ok(VmfFit {
        bank,
        assignment: soft,
        trace,
    })
}
