use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, PointL4};
use crate::seed;
use crate::sphere::{self, VectorSet};

pub const FMAP_MAGIC: &[u8; 6] = b"FMAP1\n";
const HEADER_LEN: usize = 6 + 5 * 4 + 4;

/// A grid of feature vectors, one per feature-lattice cell, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    spec: LatticeSpec,
    dim: usize,
    data: Vec<f32>,
    scale_tag: f32,
}

impl FeatureMap {
    pub fn new(spec: LatticeSpec, dim: usize, data: Vec<f32>, scale_tag: f32) -> Result<Self> {
        spec.validate()?;
        if dim == 0 {
            return Err(Error::Argument("feature dimension must be positive".into()));
        }
        if !(scale_tag > 0.0) || !scale_tag.is_finite() {
            return Err(Error::Argument(format!("scale tag must be positive, got {scale_tag}")));
        }
        let expect = spec.num_cells() * dim;
        if data.len() != expect {
            return Err(Error::Argument(format!(
                "payload has {} floats, lattice {}x{}x{dim} needs {expect}",
                data.len(),
                spec.width_l4(),
                spec.height_l4()
            )));
        }
        Ok(Self {
            spec,
            dim,
            data,
            scale_tag,
        })
    }

    pub fn zeros(spec: LatticeSpec, dim: usize) -> Result<Self> {
        let n = spec.num_cells() * dim;
        Self::new(spec, dim, vec![0.0; n], 1.0)
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale_tag(&self) -> f32 {
        self.scale_tag
    }

    pub fn set_scale_tag(&mut self, tag: f32) -> Result<()> {
        if !(tag > 0.0) || !tag.is_finite() {
            return Err(Error::Argument(format!("scale tag must be positive, got {tag}")));
        }
        self.scale_tag = tag;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.spec.width_l4() as usize
    }

    pub fn height(&self) -> usize {
        self.spec.height_l4() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.spec.num_cells()
    }

    pub fn payload(&self) -> &[f32] {
        &self.data
    }

    pub fn vector(&self, cell: usize) -> &[f32] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, cell: usize) -> &mut [f32] {
        &mut self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn at(&self, p: PointL4) -> &[f32] {
        self.vector(self.spec.index(p))
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Rescales every vector to unit norm. Zero (or non-finite) vectors are
    /// replaced by the first basis vector; returns how many were replaced.
    pub fn normalize_in_place(&mut self) -> usize {
        let dim = self.dim;
        let mut replaced = 0;
        for v in self.data.chunks_exact_mut(dim) {
            if !sphere::normalize(v) {
                v.fill(0.0);
                v[0] = 1.0;
                replaced += 1;
            }
        }
        if replaced > 0 {
            log::warn!("normalize: replaced {replaced} degenerate feature vectors by e_1");
        }
        replaced
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FMAP_MAGIC)?;
        for v in [
            self.spec.width_l4(),
            self.spec.height_l4(),
            self.dim as u32,
            self.spec.stride,
            self.spec.offset,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.scale_tag.to_le_bytes())?;
        write_f32s(&mut w, &self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FMAP_MAGIC.len() || &bytes[..FMAP_MAGIC.len()] != FMAP_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected FMAP1".into(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
            });
        }
        let u = |i: usize| {
            let at = 6 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
        };
        let (w4, h4, dim, stride, offset) = (u(0), u(1), u(2), u(3), u(4));
        let scale_tag = f32::from_le_bytes(bytes[26..30].try_into().unwrap());
        if w4 == 0 || h4 == 0 || dim == 0 || stride == 0 {
            return Err(Error::Format {
                offset: 6,
                msg: format!("nonpositive header dims {w4}x{h4}x{dim}, stride {stride}"),
            });
        }
        let n = w4 as u64 * h4 as u64 * dim as u64;
        let avail = (bytes.len() - HEADER_LEN) as u64;
        if avail < n * 4 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!(
                    "truncated payload: header declares {w4}x{h4}x{dim} = {n} floats, found {}",
                    avail / 4
                ),
            });
        }
        if avail > n * 4 {
            return Err(Error::Format {
                offset: HEADER_LEN as u64 + n * 4,
                msg: format!("{} trailing bytes after payload", avail - n * 4),
            });
        }
        let spec = LatticeSpec::from_l4(w4, h4, stride, offset).map_err(|e| Error::Format {
            offset: 6,
            msg: e.to_string(),
        })?;
        let data = read_f32s(&bytes[HEADER_LEN..]);
        Self::new(spec, dim as usize, data, scale_tag).map_err(|e| Error::Format {
            offset: 26,
            msg: e.to_string(),
        })
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<reader>", e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Uniform sample without replacement of up to `per_image` vectors per map.
pub fn sample_vectors(maps: &[FeatureMap], per_image: usize, seed: u64) -> Result<VectorSet> {
    if per_image == 0 {
        return Err(Error::Argument("per_image must be at least 1".into()));
    }
    let Some(first) = maps.first() else {
        return Ok(VectorSet::default());
    };
    let mut out = VectorSet::with_dim(first.dim());
    let mut rng = seed::rng(seed);
    for map in maps {
        let n = map.num_cells();
        if per_image >= n {
            for v in map.vectors() {
                out.push(v)?;
            }
        } else {
            let mut picked = index::sample(&mut rng, n, per_image).into_vec();
            picked.sort_unstable();
            for i in picked {
                out.push(map.vector(i))?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::norm;
    use rand::Rng;

    fn tiny(w: u32, h: u32, dim: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(LatticeSpec::from_l4(w, h, 16, 8).unwrap(), dim, data, 1.0).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = seed::rng(9);
        let data: Vec<f32> = (0..3 * 2 * 5).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut map = tiny(3, 2, 5, data);
        map.set_scale_tag(1.25).unwrap();
        let back = FeatureMap::from_bytes(&map.to_bytes()).unwrap();
        assert_eq!(back.spec().width_l4(), 3);
        assert_eq!(back.spec().height_l4(), 2);
        assert_eq!(back.scale_tag().to_bits(), 1.25f32.to_bits());
        let a: Vec<u32> = map.payload().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.payload().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let map = tiny(1, 1, 3, vec![1.0, 0.0, 0.0]);
        let bytes = map.to_bytes();
        assert_eq!(&bytes[..6], b"FMAP1\n");
        assert_eq!(bytes.len(), 30 + 12);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 3);
        let back = FeatureMap::from_bytes(&bytes).unwrap();
        assert_eq!(back.vector(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let map = tiny(2, 2, 4, vec![0.5; 16]);
        let mut bytes = map.to_bytes();
        bytes.truncate(bytes.len() - 4);
        match FeatureMap::from_bytes(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset as usize, bytes.len());
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = tiny(1, 1, 1, vec![1.0]).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FeatureMap::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn constructor_checks_length() {
        assert!(FeatureMap::new(LatticeSpec::from_l4(2, 2, 16, 8).unwrap(), 4, vec![0.0; 15], 1.0)
            .is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut m = tiny(2, 1, 2, vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(m.normalize_in_place(), 1);
        assert!((m.vector(0)[0] - 0.6).abs() < 1e-7);
        assert!((m.vector(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(m.vector(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_random_maps() {
        let mut rng = seed::rng(5);
        for _ in 0..20 {
            let data: Vec<f32> = (0..6 * 4 * 64).map(|_| rng.random::<f32>() * 10.0 - 5.0).collect();
            let mut m = tiny(6, 4, 64, data);
            m.normalize_in_place();
            for v in m.vectors() {
                assert!((norm(v) - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn sample_clamps_and_is_deterministic() {
        let data: Vec<f32> = (0..50 * 2).map(|i| i as f32).collect();
        let m = tiny(10, 5, 2, data);
        assert_eq!(sample_vectors(&[m.clone()], 100, 1).unwrap().len(), 50);
        let a = sample_vectors(&[m.clone(), m.clone()], 7, 42).unwrap();
        let b = sample_vectors(&[m.clone(), m], 7, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 14);
        assert!(sample_vectors(&[], 3, 1).unwrap().is_empty());
    }

    #[test]
    fn sample_frequencies_are_uniform() {
        // each cell is chosen with p = k/n per repetition; counts ~ Binomial(reps, p)
        let n = 20usize;
        let k = 5usize;
        let reps = 10_000usize;
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let m = tiny(n as u32, 1, 1, data);
        let mut counts = vec![0usize; n];
        for r in 0..reps {
            let s = sample_vectors(std::slice::from_ref(&m), k, r as u64).unwrap();
            for v in s.rows() {
                counts[v[0] as usize] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let mean = reps as f64 * p;
        let sd = (reps as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c} vs {mean}±{sd}");
        }
    }
}
