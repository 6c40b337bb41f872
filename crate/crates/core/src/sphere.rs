//! Vector helpers on the unit hypersphere and a von Mises-Fisher sampler.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major set of `len` vectors of dimension `dim`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("vector dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Argument(format!(
                "{} floats do not split into vectors of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn with_dim(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Argument("no rows".into()))?;
        let mut out = Self::with_dim(dim);
        for r in rows {
            out.push(r)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Argument(format!(
                "vector of length {} pushed into set of dimension {}",
                v.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.data
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance, computed directly from coordinates.
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

pub fn dist(a: &[f32], b: &[f32]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Squared distance between unit vectors from their dot product.
pub fn sq_dist_from_dot(dot: f64) -> f64 {
    2.0 * (1.0 - dot)
}

/// Scales `v` to unit length. Returns false (leaving `v` untouched) when the
/// vector has no direction.
pub fn normalize(v: &mut [f32]) -> bool {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / n) as f32;
    }
    true
}

pub fn normalized_f64(v: &[f64]) -> Option<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x / n) as f32).collect())
}

pub fn unit_basis(dim: usize, axis: usize) -> Vec<f32> {
    let mut e = vec![0.0; dim];
    e[axis] = 1.0;
    e
}

pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(v) = normalized_f64(&g) {
            return v;
        }
    }
}

/// Draws one sample from a von Mises-Fisher distribution with mean direction
/// `mean` (unit norm) and concentration `kappa`, using Wood's rejection
/// scheme. `kappa = inf` returns `mean` exactly; `kappa = 0` is uniform.
pub fn sample_vmf<R: Rng + ?Sized>(mean: &[f32], kappa: f64, rng: &mut R) -> Vec<f32> {
    let d = mean.len();
    if kappa.is_infinite() {
        return mean.to_vec();
    }
    if d == 1 {
        // two-point distribution on {-1, +1}
        let p_plus = 1.0 / (1.0 + (-2.0 * kappa).exp());
        let s = if rng.random::<f64>() < p_plus { 1.0 } else { -1.0 };
        return vec![(s * f64::from(mean[0])) as f32];
    }
    if kappa <= 0.0 {
        return random_unit(d, rng);
    }
    let dm1 = (d - 1) as f64;
    // b = (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1), in cancellation-free form
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // uniform direction orthogonal to the mean
    let mean64: Vec<f64> = mean.iter().map(|&x| f64::from(x)).collect();
    let tangent = loop {
        let mut g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let proj: f64 = g.iter().zip(&mean64).map(|(a, b)| a * b).sum();
        for (gi, mi) in g.iter_mut().zip(&mean64) {
            *gi -= proj * mi;
        }
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break g.into_iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let v: Vec<f64> = mean64
        .iter()
        .zip(&tangent)
        .map(|(m, t)| w * m + s * t)
        .collect();
    normalized_f64(&v).unwrap_or_else(|| mean.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vector_set_shape() {
        let vs = VectorSet::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(vs.len(), 2);
        assert_eq!(vs.row(1), &[0.0, 1.0]);
        assert!(VectorSet::new(3, vec![1.0; 4]).is_err());
        let mut vs = VectorSet::with_dim(2);
        assert!(vs.push(&[1.0]).is_err());
    }

    #[test]
    fn distance_identity_on_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = random_unit(17, &mut rng);
            let b = random_unit(17, &mut rng);
            assert!((sq_dist(&a, &b) - sq_dist_from_dot(dot(&a, &b))).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut z = vec![0.0f32; 3];
        assert!(!normalize(&mut z));
        let mut v = vec![3.0f32, 4.0];
        assert!(normalize(&mut v));
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn vmf_infinite_kappa_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = random_unit(8, &mut rng);
        assert_eq!(sample_vmf(&mu, f64::INFINITY, &mut rng), mu);
    }

    #[test]
    fn vmf_mean_resultant_matches_asymptotics() {
        // For large kappa, E[mu . x] ~= 1 - (d-1)/(2 kappa).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 32;
        let kappa = 400.0;
        let mu = random_unit(d, &mut rng);
        let n = 4000;
        let mean: f64 = (0..n)
            .map(|_| dot(&sample_vmf(&mu, kappa, &mut rng), &mu))
            .sum::<f64>()
            / n as f64;
        let expect = 1.0 - (d as f64 - 1.0) / (2.0 * kappa);
        assert!((mean - expect).abs() < 3e-3, "{mean} vs {expect}");
    }

    #[test]
    fn vmf_samples_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = random_unit(5, &mut rng);
        for kappa in [0.0, 0.5, 10.0, 1e4] {
            for _ in 0..50 {
                let x = sample_vmf(&mu, kappa, &mut rng);
                assert!((norm(&x) - 1.0).abs() < 1e-6);
            }
        }
    }
}
