//! Spherical K-means with K-means++ seeding, and greedy Davies-Bouldin merging.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use super::bank::{ConceptBank, MergeStep, Method, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::seed;
use crate::sphere::{normalized_f64, VectorSet};

/// Result of a K-means run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub bank: ConceptBank,
    /// Hard label of every point.
    pub labels: Vec<usize>,
    /// Spherical cost `2 Σ (1 - f_p·f_v)` at the final assignment.
    pub cost: f64,
    /// Cost after each assignment step.
    pub trace: Vec<f64>,
}

pub(crate) fn dot_mixed(p: &[f32], c: &[f64]) -> f64 {
    p.iter().zip(c).map(|(a, b)| f64::from(*a) * b).sum()
}

fn sq_dist_mixed(p: &[f32], c: &[f64]) -> f64 {
    p.iter()
        .zip(c)
        .map(|(a, b)| {
            let d = f64::from(*a) - b;
            d * d
        })
        .sum()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

pub(crate) fn normalize64(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

pub(crate) fn to_vector_set(dim: usize, centers: &[Vec<f64>]) -> Result<VectorSet> {
    let mut out = VectorSet::with_dim(dim);
    for c in centers {
        let v = normalized_f64(c).ok_or_else(|| Error::Argument("degenerate center".into()))?;
        out.push(&v)?;
    }
    Ok(out)
}

fn check_points(points: &VectorSet, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Argument(format!("K = {k} exceeds the {} data points", points.len())));
    }
    Ok(())
}

/// K-means++ seeding: the first center uniformly, each next one with
/// probability proportional to the squared distance to the nearest chosen center.
pub(crate) fn kmeans_pp<R: Rng>(points: &VectorSet, k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    check_points(points, k)?;
    let first = rng.random_range(0..points.len());
    let mut centers = vec![to_f64(points.row(first))];
    let mut d2: Vec<f64> = points.rows().map(|p| sq_dist_mixed(p, &centers[0])).collect();
    while centers.len() < k {
        let pick = WeightedIndex::new(&d2).map_err(|_| {
            Error::Argument(format!(
                "only {} distinct points, cannot seed {k} centers",
                centers.len()
            ))
        })?;
        let i = pick.sample(rng);
        let c = to_f64(points.row(i));
        d2.par_iter_mut()
            .zip(points.as_slice().par_chunks_exact(points.dim()))
            .for_each(|(d, p)| *d = d.min(sq_dist_mixed(p, &c)));
        centers.push(c);
    }
    Ok(centers)
}

/// Nearest center by largest dot product, lowest index on ties.
fn assign(points: &VectorSet, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .as_slice()
        .par_chunks_exact(points.dim())
        .map(|p| {
            let mut best = (0, f64::NEG_INFINITY);
            for (v, c) in centers.iter().enumerate() {
                let d = dot_mixed(p, c);
                if d > best.1 {
                    best = (v, d);
                }
            }
            (best.0, 2.0 * (1.0 - best.1))
        })
        .unzip()
}

fn cluster_sums(points: &VectorSet, labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; points.dim()]; k];
    let mut counts = vec![0; k];
    for (p, &l) in points.rows().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += f64::from(*x);
        }
    }
    (sums, counts)
}

/// Spherical cost of a hard assignment.
pub fn kmeans_cost(points: &VectorSet, bank: &ConceptBank, labels: &[usize]) -> f64 {
    points
        .rows()
        .zip(labels)
        .map(|(p, &l)| 2.0 * (1.0 - crate::sphere::dot(p, bank.center(l))))
        .sum()
}

pub fn kmeans_fit(points: &VectorSet, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let mut rng = seed::named_rng(seed, "kmeans/seeding");
    let centers = kmeans_pp(points, k, &mut rng)?;
    kmeans_from(points, centers, max_iters)
}

/// Runs Lloyd iterations from the given initial centers.
pub fn kmeans_from(points: &VectorSet, mut centers: Vec<Vec<f64>>, max_iters: usize) -> Result<KMeansFit> {
    let k = centers.len();
    check_points(points, k)?;
    let mut trace = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    let mut labels;
    let mut iter = 0;
    loop {
        let (l, costs) = assign(points, &centers);
        labels = l;
        trace.push(costs.iter().sum());
        iter += 1;
        if prev.as_ref() == Some(&labels) || iter > max_iters {
            break;
        }
        let mut dists = costs;
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for v in 0..k {
            if counts[v] > 0 {
                continue;
            }
            // farthest point from its own center, leaving no cluster empty
            let far = (0..points.len())
                .filter(|&i| dists[i] > 0.0 && counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            let Some(i) = far else {
                return Err(Error::Argument(format!("too few distinct points to keep {k} clusters")));
            };
            log::info!("kmeans: cluster {v} empty, re-seeded at point {i}");
            counts[labels[i]] -= 1;
            counts[v] += 1;
            labels[i] = v;
            dists[i] = 0.0;
        }
        let (sums, _) = cluster_sums(points, &labels, k);
        for (c, s) in centers.iter_mut().zip(&sums) {
            if let Some(n) = normalize64(s) {
                *c = n;
            }
        }
        prev = Some(labels);
    }
    let cost = *trace.last().unwrap();
    let bank = ConceptBank::new(to_vector_set(points.dim(), &centers)?, DEFAULT_ETA, Method::Kmeans, k, vec![])?;
    Ok(KMeansFit {
        bank,
        labels,
        cost,
        trace,
    })
}

/// Per-cluster Davies-Bouldin index `max_{m≠k} (σ_k + σ_m) / ‖f_k - f_m‖`,
/// with `σ_k` the mean squared distance of cluster `k`'s points to its center.
pub fn davies_bouldin(bank: &ConceptBank, labels: &[usize], points: &VectorSet) -> Result<Vec<f64>> {
    let k = bank.len();
    let mut spread = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.rows().zip(labels) {
        spread[l] += crate::sphere::sq_dist(p, bank.center(l));
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::UndefinedIndex(empty));
    }
    for (s, c) in spread.iter_mut().zip(&counts) {
        *s /= *c as f64;
    }
    Ok(db_from_spread(bank.centers(), &spread))
}

fn db_from_spread(centers: &VectorSet, spread: &[f64]) -> Vec<f64> {
    let k = spread.len();
    (0..k)
        .map(|a| {
            (0..k)
                .filter(|&b| b != a)
                .map(|b| (spread[a] + spread[b]) / crate::sphere::dist(centers.row(a), centers.row(b)))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Greedily merges the cluster with the largest Davies-Bouldin index into
/// its nearest-center neighbor until every index is at most `threshold` or
/// one cluster is left. Returns the merged bank and relabelled points.
pub fn merge_by_db(
    bank: &ConceptBank,
    labels: &[usize],
    points: &VectorSet,
    threshold: f64,
) -> Result<(ConceptBank, Vec<usize>)> {
    let mut centers: Vec<Vec<f64>> = bank.centers().rows().map(to_f64).collect();
    let mut labels = labels.to_vec();
    let mut log = bank.merge_log().to_vec();
    let mut current = bank.clone();
    loop {
        let db = davies_bouldin(&current, &labels, points)?;
        let k = db.len();
        let (worst, &max_db) = db
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if k == 1 || max_db <= threshold {
            return Ok((current, labels));
        }
        let c = current.center(worst);
        let partner = (0..k)
            .filter(|&m| m != worst)
            .min_by(|&a, &b| {
                crate::sphere::sq_dist(c, current.center(a))
                    .total_cmp(&crate::sphere::sq_dist(c, current.center(b)))
                    .then(a.cmp(&b))
            })
            .unwrap();
        let (keep, drop) = (worst.min(partner), worst.max(partner));
        let mut sum = vec![0.0; points.dim()];
        for (p, l) in points.rows().zip(labels.iter_mut()) {
            if *l == drop {
                *l = keep;
            }
            if *l == keep {
                for (s, x) in sum.iter_mut().zip(p) {
                    *s += f64::from(*x);
                }
            }
            if *l > drop {
                *l -= 1;
            }
        }
        if let Some(n) = normalize64(&sum) {
            centers[keep] = n;
        }
        centers.remove(drop);
        log.push(MergeStep {
            absorbed: worst,
            into: partner,
            db: max_db,
            remaining: k - 1,
        });
        log::debug!("merge: cluster {worst} (DB {max_db:.4}) into {partner}");
        current = ConceptBank::new(
            to_vector_set(points.dim(), &centers)?,
            bank.eta(),
            bank.method(),
            bank.k_init(),
            log.clone(),
        )?;
    }
}
