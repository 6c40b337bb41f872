use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::PointL0;

pub const DEFAULT_PATCH_SIDE: u32 = 100;
pub const DEFAULT_GAMMA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartPoint {
    pub part: usize,
    pub x: i32,
    pub y: i32,
}

impl PartPoint {
    pub fn point(&self) -> PointL0 {
        PointL0::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub id: String,
    pub positives: Vec<PartPoint>,
    #[serde(default)]
    pub negatives: Vec<PointL0>,
}

impl ImageAnnotation {
    pub fn positives_of(&self, part: usize) -> impl Iterator<Item = PointL0> + '_ {
        self.positives
            .iter()
            .filter(move |p| p.part == part)
            .map(PartPoint::point)
    }

    /// Negative points for `part`: the image's negatives plus other parts'
    /// centers, kept only if they are at least `gamma` from every positive of `part`.
    pub fn negatives_for(&self, part: usize, gamma: f64) -> Vec<PointL0> {
        let pos: Vec<PointL0> = self.positives_of(part).collect();
        let far = |q: &PointL0| pos.iter().all(|p| p.dist(q) >= gamma);
        self.negatives
            .iter()
            .copied()
            .chain(
                self.positives
                    .iter()
                    .filter(|p| p.part != part)
                    .map(PartPoint::point),
            )
            .filter(far)
            .collect()
    }

    /// Bounding box `[x0, y0, x1, y1]` of the `side`-wide patches around
    /// every positive, or `None` without positives.
    pub fn object_box(&self, side: f64) -> Option<[f64; 4]> {
        let h = side / 2.0;
        self.positives.iter().fold(None, |b: Option<[f64; 4]>, p| {
            let (x, y) = (f64::from(p.x), f64::from(p.y));
            let r = [x - h, y - h, x + h, y + h];
            Some(match b {
                None => r,
                Some(b) => [b[0].min(r[0]), b[1].min(r[1]), b[2].max(r[2]), b[3].max(r[3])],
            })
        })
    }
}

/// Whether `p` lies in the closed box `[x0, y0, x1, y1]`.
pub fn in_box(p: PointL0, b: &[f64; 4]) -> bool {
    let (x, y) = (f64::from(p.x), f64::from(p.y));
    x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]
}

/// Part-center annotations for a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageAnnotation>,
    pub patch_side: u32,
    pub gamma: f64,
    /// Part names, indexed by part id. Empty means ids are not checked.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<String>,
}

impl AnnotationSet {
    pub fn num_parts(&self) -> usize {
        if !self.parts.is_empty() {
            return self.parts.len();
        }
        self.images
            .iter()
            .flat_map(|im| im.positives.iter().map(|p| p.part + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(Error::Argument("patch_side must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Argument(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        for im in &self.images {
            for p in &im.positives {
                if !self.parts.is_empty() && p.part >= self.parts.len() {
                    return Err(Error::Argument(format!(
                        "image {}: part id {} not in inventory of {} parts",
                        im.id,
                        p.part,
                        self.parts.len()
                    )));
                }
            }
            for n in &im.negatives {
                if let Some(p) = im.positives.iter().find(|p| p.point().dist(n) < self.gamma) {
                    return Err(Error::Argument(format!(
                        "image {}: negative ({}, {}) is within gamma={} of part {} at ({}, {})",
                        im.id, n.x, n.y, self.gamma, p.part, p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: AnnotationSet = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        set.validate()?;
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
