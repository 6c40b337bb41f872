use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::map::{read_f32s, write_f32s};
use crate::sphere::{dot, norm, sq_dist, VectorSet};

pub const BANK_MAGIC: &[u8; 8] = b"VCBANK1\n";

/// Default vMF concentration.
pub const DEFAULT_ETA: f64 = 30.0;
/// Vocabulary-size presets.
pub const K_PRESETS: [usize; 4] = [64, 128, 256, 512];
pub const DEFAULT_K: usize = 256;
pub const DEFAULT_DB_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Vmf,
}

/// One greedy merge: cluster `absorbed` (index before removal) folded into `into`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub absorbed: usize,
    pub into: usize,
    pub db: f64,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankHeader {
    method: Method,
    #[serde(rename = "K")]
    k: usize,
    k_init: usize,
    eta: f64,
    #[serde(rename = "D")]
    d: usize,
    merge_log: Vec<MergeStep>,
}

/// A vocabulary of visual concepts: unit-norm centers plus how they were learned.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    centers: VectorSet,
    eta: f64,
    method: Method,
    k_init: usize,
    merge_log: Vec<MergeStep>,
}

impl ConceptBank {
    pub fn new(centers: VectorSet, eta: f64, method: Method, k_init: usize, merge_log: Vec<MergeStep>) -> Result<Self> {
        let bank = Self {
            centers,
            eta,
            method,
            k_init,
            merge_log,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Argument("concept bank has no centers".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Argument(format!("eta must be finite and nonnegative, got {}", self.eta)));
        }
        for (v, c) in self.centers.rows().enumerate() {
            let n = norm(c);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!("center {v} has norm {n}")));
            }
        }
        for a in 0..self.len() {
            for b in 0..a {
                if dot(self.center(a), self.center(b)) >= 1.0 - 1e-9 {
                    return Err(Error::Argument(format!("centers {b} and {a} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.dim()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn k_init(&self) -> usize {
        self.k_init
    }

    pub fn merge_log(&self) -> &[MergeStep] {
        &self.merge_log
    }

    pub fn center(&self, v: usize) -> &[f32] {
        self.centers.row(v)
    }

    pub fn centers(&self) -> &VectorSet {
        &self.centers
    }

    /// Distance from `f` to every center.
    pub fn distances(&self, f: &[f32]) -> Vec<f64> {
        self.centers.rows().map(|c| sq_dist(f, c).sqrt()).collect()
    }

    /// Nearest center to `f` (lowest index on ties) and its distance.
    pub fn nearest(&self, f: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (v, c) in self.centers.rows().enumerate() {
            let d = sq_dist(f, c);
            if d < best.1 {
                best = (v, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BankHeader {
            method: self.method,
            k: self.len(),
            k_init: self.k_init,
            eta: self.eta,
            d: self.dim(),
            merge_log: self.merge_log.clone(),
        };
        let json = serde_json::to_vec(&header).expect("bank header serializes");
        let mut out = Vec::with_capacity(BANK_MAGIC.len() + 4 + json.len() + 4 * self.centers.as_slice().len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        write_f32s(&mut out, self.centers.as_slice()).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < BANK_MAGIC.len() || &bytes[..BANK_MAGIC.len()] != BANK_MAGIC {
            return Err(fmt(0, "not a concept bank (bad magic)".into()));
        }
        let mut at = BANK_MAGIC.len();
        if bytes.len() < at + 4 {
            return Err(fmt(at, "truncated header length".into()));
        }
        let hlen = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if bytes.len() < at + hlen {
            return Err(fmt(at, format!("header of {hlen} bytes is truncated")));
        }
        let header: BankHeader = serde_json::from_slice(&bytes[at..at + hlen])
            .map_err(|e| fmt(at, format!("bad header: {e}")))?;
        at += hlen;
        if header.d == 0 {
            return Err(fmt(at, "dimension must be positive".into()));
        }
        let need = header.k * header.d * 4;
        let have = bytes.len() - at;
        if have < need {
            return Err(fmt(bytes.len(), format!("center block needs {need} bytes, found {have}")));
        }
        if have > need {
            return Err(fmt(at + need, format!("{} trailing bytes", have - need)));
        }
        let centers = VectorSet::new(header.d, read_f32s(&bytes[at..]))?;
        Self::new(centers, header.eta, header.method, header.k_init, header.merge_log)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::sphere::random_unit;

    fn bank(k: usize, d: usize) -> ConceptBank {
        let mut rng = seed::rng(1);
        let rows: Vec<Vec<f32>> = (0..k).map(|_| random_unit(d, &mut rng)).collect();
        let log = vec![MergeStep {
            absorbed: 3,
            into: 1,
            db: 1.5,
            remaining: k,
        }];
        ConceptBank::new(VectorSet::from_rows(&rows).unwrap(), 30.0, Method::Kmeans, k + 1, log).unwrap()
    }

    #[test]
    fn round_trip() {
        let b = bank(5, 7);
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..8], b"VCBANK1\n");
        let back = ConceptBank::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["method"], "kmeans");
        assert_eq!(header["K"], 5);
        assert_eq!(header["D"], 7);
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let bytes = bank(3, 4).to_bytes();
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(ConceptBank::from_bytes(short), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        match ConceptBank::from_bytes(&long) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(ConceptBank::from_bytes(b"nope").is_err());
    }

    #[test]
    fn invariants_enforced() {
        let dup = VectorSet::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(ConceptBank::new(dup, 30.0, Method::Vmf, 2, vec![]).is_err());
        let long = VectorSet::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(ConceptBank::new(long, 30.0, Method::Vmf, 1, vec![]).is_err());
    }

    #[test]
    fn nearest_prefers_lowest_index_on_ties() {
        let c = VectorSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = ConceptBank::new(c, 1.0, Method::Kmeans, 2, vec![]).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(b.nearest(&[h, h]).0, 0);
        assert_eq!(b.nearest(&[0.0, 1.0]), (1, 0.0));
    }
}
