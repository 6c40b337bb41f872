//! Geometry of the image lattice (L0, pixels) and the feature lattice (L4,
//! one cell per feature vector), with the projections between them.
//!
//! Cell `p` of the feature lattice sits at pixel `offset + stride * p` of
//! the image lattice. Projection back to the feature lattice picks the
//! nearest cell, breaking ties toward the smaller coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STRIDE: u32 = 16;
pub const DEFAULT_OFFSET: u32 = 8;
/// Neighborhood radius used when scoring concepts against parts.
pub const CONCEPT_RADIUS_PX: f64 = 56.0;
/// Neighborhood radius used when training the voting models.
pub const VOTING_RADIUS_PX: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub width_l0: u32,
    pub height_l0: u32,
    pub stride: u32,
    pub offset: u32,
}

/// A pixel position on the image lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointL0 {
    pub x: i32,
    pub y: i32,
}

/// A cell of the feature lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointL4 {
    pub x: i32,
    pub y: i32,
}

/// A displacement between two feature-lattice cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
}

impl PointL0 {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &PointL0) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        dx.hypot(dy)
    }
}

impl PointL4 {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset_to(&self, other: &PointL4) -> Offset {
        Offset {
            dx: other.x - self.x,
            dy: other.y - self.y,
        }
    }

    pub fn shifted(&self, off: Offset) -> PointL4 {
        PointL4::new(self.x + off.dx, self.y + off.dy)
    }
}

impl Offset {
    pub const ZERO: Offset = Offset { dx: 0, dy: 0 };

    pub const fn new(dx: i32, dy: i32) -> Self {
        Self { dx, dy }
    }

    pub fn neg(self) -> Offset {
        Offset::new(-self.dx, -self.dy)
    }
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            width_l0: 224,
            height_l0: 224,
            stride: DEFAULT_STRIDE,
            offset: DEFAULT_OFFSET,
        }
    }
}

impl LatticeSpec {
    pub fn new(width_l0: u32, height_l0: u32, stride: u32, offset: u32) -> Result<Self> {
        let spec = Self {
            width_l0,
            height_l0,
            stride,
            offset,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Smallest image lattice that holds a `width_l4 x height_l4` feature grid.
    pub fn from_l4(width_l4: u32, height_l4: u32, stride: u32, offset: u32) -> Result<Self> {
        if width_l4 == 0 || height_l4 == 0 {
            return Err(Error::Argument("feature lattice must be nonempty".into()));
        }
        let extent = |n: u32| {
            if offset < stride {
                n * stride
            } else {
                offset + (n - 1) * stride + 1
            }
        };
        Self::new(extent(width_l4), extent(height_l4), stride, offset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_l0 == 0 || self.height_l0 == 0 || self.stride == 0 {
            return Err(Error::Argument(format!(
                "lattice dimensions and stride must be positive: {self:?}"
            )));
        }
        if self.offset >= self.width_l0 || self.offset >= self.height_l0 {
            return Err(Error::Argument(format!(
                "offset {} leaves no feature cell inside {}x{}",
                self.offset, self.width_l0, self.height_l0
            )));
        }
        Ok(())
    }

    pub fn width_l4(&self) -> u32 {
        (self.width_l0 - 1 - self.offset) / self.stride + 1
    }

    pub fn height_l4(&self) -> u32 {
        (self.height_l0 - 1 - self.offset) / self.stride + 1
    }

    pub fn num_cells(&self) -> usize {
        self.width_l4() as usize * self.height_l4() as usize
    }

    /// Row-major index of a cell. The caller guarantees `p` is in bounds.
    pub fn index(&self, p: PointL4) -> usize {
        p.y as usize * self.width_l4() as usize + p.x as usize
    }

    pub fn cell(&self, index: usize) -> PointL4 {
        let w = self.width_l4() as usize;
        PointL4::new((index % w) as i32, (index / w) as i32)
    }

    pub fn cells(&self) -> impl Iterator<Item = PointL4> + '_ {
        (0..self.num_cells()).map(move |i| self.cell(i))
    }

    pub fn contains_l4(&self, p: PointL4) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.width_l4() && (p.y as u32) < self.height_l4()
    }

    pub fn contains_l0(&self, q: PointL0) -> bool {
        q.x >= 0 && q.y >= 0 && (q.x as u32) < self.width_l0 && (q.y as u32) < self.height_l0
    }

    fn check_l4(&self, p: PointL4) -> Result<()> {
        if self.contains_l4(p) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                lattice: "L4",
                x: p.x.into(),
                y: p.y.into(),
                width: self.width_l4(),
                height: self.height_l4(),
            })
        }
    }

    fn check_l0(&self, q: PointL0) -> Result<()> {
        if self.contains_l0(q) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                lattice: "L0",
                x: q.x.into(),
                y: q.y.into(),
                width: self.width_l0,
                height: self.height_l0,
            })
        }
    }

    /// Pixel center of a feature cell.
    pub fn map_up(&self, p: PointL4) -> Result<PointL0> {
        self.check_l4(p)?;
        Ok(self.map_up_unchecked(p))
    }

    pub(crate) fn map_up_unchecked(&self, p: PointL4) -> PointL0 {
        let s = self.stride as i32;
        let o = self.offset as i32;
        PointL0::new(o + s * p.x, o + s * p.y)
    }

    /// Nearest feature cell to a pixel.
    pub fn map_down(&self, q: PointL0) -> Result<PointL4> {
        self.check_l0(q)?;
        Ok(self.map_down_clamped(q.x, q.y))
    }

    /// Nearest cell to an arbitrary (possibly out-of-image) pixel, clamped
    /// into the feature lattice.
    pub(crate) fn map_down_clamped(&self, x: i32, y: i32) -> PointL4 {
        let axis = |v: i32, n: u32| -> i32 {
            let s = i64::from(self.stride);
            let t = i64::from(v) - i64::from(self.offset);
            let k = t.div_euclid(s);
            let r = t.rem_euclid(s);
            let k = if 2 * r <= s { k } else { k + 1 };
            k.clamp(0, i64::from(n) - 1) as i32
        };
        PointL4::new(axis(x, self.width_l4()), axis(y, self.height_l4()))
    }

    /// All feature cells whose pixel center lies within `radius` pixels of `q`,
    /// in lexicographic `(x, y)` order.
    pub fn disk_neighborhood(&self, q: PointL0, radius: f64) -> Result<Vec<PointL4>> {
        self.check_l0(q)?;
        if !(radius > 0.0) {
            return Err(Error::Argument(format!("radius must be positive, got {radius}")));
        }
        Ok(self.disk_cells(f64::from(q.x), f64::from(q.y), radius))
    }

    /// Nearest cell to a real-valued pixel position, without clamping; the
    /// result may lie outside the lattice.
    pub(crate) fn nearest_cell(&self, x: f64, y: f64) -> PointL4 {
        let s = f64::from(self.stride);
        let o = f64::from(self.offset);
        let axis = |v: f64| ((v - o) / s - 0.5).ceil() as i32;
        PointL4::new(axis(x), axis(y))
    }

    /// Disk query around a real-valued pixel position; no bounds check on the center.
    pub(crate) fn disk_cells(&self, qx: f64, qy: f64, radius: f64) -> Vec<PointL4> {
        let s = f64::from(self.stride);
        let o = f64::from(self.offset);
        let x_lo = (((qx - radius - o) / s).ceil() as i64).max(0);
        let x_hi = (((qx + radius - o) / s).floor() as i64).min(i64::from(self.width_l4()) - 1);
        let y_lo = (((qy - radius - o) / s).ceil() as i64).max(0);
        let y_hi = (((qy + radius - o) / s).floor() as i64).min(i64::from(self.height_l4()) - 1);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for x in x_lo..=x_hi {
            for y in y_lo..=y_hi {
                let px = o + s * x as f64;
                let py = o + s * y as f64;
                let d2 = (px - qx).powi(2) + (py - qy).powi(2);
                if d2 <= r2 {
                    out.push(PointL4::new(x as i32, y as i32));
                }
            }
        }
        out
    }

    /// Radius in cells of the square offset window covering a pixel radius.
    pub fn cells_for_radius(&self, radius_px: f64) -> u32 {
        (radius_px / f64::from(self.stride)).ceil() as u32
    }

    /// The lattice of the same image resized by `scale`.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Argument(format!("scale must be positive, got {scale}")));
        }
        let w = ((f64::from(self.width_l0) * scale).round() as u32).max(self.offset + 1);
        let h = ((f64::from(self.height_l0) * scale).round() as u32).max(self.offset + 1);
        Self::new(w, h, self.stride, self.offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec224() -> LatticeSpec {
        LatticeSpec::new(224, 224, 16, 8).unwrap()
    }

    #[test]
    fn dims() {
        let s = spec224();
        assert_eq!((s.width_l4(), s.height_l4()), (14, 14));
        let s = LatticeSpec::from_l4(5, 3, 16, 8).unwrap();
        assert_eq!((s.width_l4(), s.height_l4()), (5, 3));
        let s = LatticeSpec::from_l4(4, 2, 1, 0).unwrap();
        assert_eq!((s.width_l4(), s.height_l4()), (4, 2));
        let s = LatticeSpec::from_l4(4, 2, 4, 9).unwrap();
        assert_eq!((s.width_l4(), s.height_l4()), (4, 2));
        assert!(LatticeSpec::new(0, 10, 16, 0).is_err());
        assert!(LatticeSpec::new(10, 10, 0, 0).is_err());
    }

    #[test]
    fn map_up_examples() {
        let s = spec224();
        assert_eq!(s.map_up(PointL4::new(0, 0)).unwrap(), PointL0::new(8, 8));
        assert_eq!(s.map_up(PointL4::new(2, 3)).unwrap(), PointL0::new(40, 56));
        assert!(matches!(
            s.map_up(PointL4::new(14, 0)),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(s.map_up(PointL4::new(-1, 0)).is_err());
    }

    #[test]
    fn map_down_examples() {
        let s = spec224();
        assert_eq!(s.map_down(PointL0::new(8, 8)).unwrap(), PointL4::new(0, 0));
        assert_eq!(s.map_down(PointL0::new(15, 17)).unwrap(), PointL4::new(0, 1));
        // exact midpoint 16 between 8 and 24 goes to the smaller cell
        assert_eq!(s.map_down(PointL0::new(16, 16)).unwrap(), PointL4::new(0, 0));
        assert_eq!(s.map_down(PointL0::new(0, 223)).unwrap(), PointL4::new(0, 13));
        assert!(s.map_down(PointL0::new(224, 0)).is_err());
    }

    #[test]
    fn round_trip_exhaustive() {
        let s = spec224();
        for p in s.cells() {
            assert_eq!(s.map_down(s.map_up(p).unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn map_down_error_bound_exhaustive() {
        let s = spec224();
        let bound = f64::from(s.stride) / 2.0 * 2f64.sqrt() + 1e-9;
        for x in 0..224 {
            for y in 0..224 {
                let q = PointL0::new(x, y);
                let back = s.map_up(s.map_down(q).unwrap()).unwrap();
                assert!(back.dist(&q) <= bound, "{q:?} -> {back:?}");
                // nearest: no other cell strictly closer
                let best = s
                    .cells()
                    .map(|p| s.map_up(p).unwrap().dist(&q))
                    .fold(f64::INFINITY, f64::min);
                assert!((back.dist(&q) - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn disk_small_radius_single_cell() {
        let s = spec224();
        let q = s.map_up(PointL4::new(5, 6)).unwrap();
        assert_eq!(s.disk_neighborhood(q, 7.9).unwrap(), vec![PointL4::new(5, 6)]);
        assert!(s.disk_neighborhood(q, 0.0).is_err());
    }

    #[test]
    fn disk_matches_brute_force() {
        let s = spec224();
        for &(x, y) in &[(112, 112), (8, 8), (0, 0), (223, 100), (57, 191)] {
            let q = PointL0::new(x, y);
            let got = s.disk_neighborhood(q, 56.0).unwrap();
            let mut brute: Vec<_> = s
                .cells()
                .filter(|p| s.map_up(*p).unwrap().dist(&q) <= 56.0)
                .collect();
            brute.sort();
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn disk_clipped_at_corner() {
        let s = spec224();
        let inner = s.disk_neighborhood(PointL0::new(112, 112), 56.0).unwrap();
        let corner = s.disk_neighborhood(PointL0::new(0, 0), 56.0).unwrap();
        assert!(corner.len() < inner.len());
    }

    #[test]
    fn disk_monotone_in_radius() {
        let s = spec224();
        let q = PointL0::new(100, 37);
        let mut prev: Vec<PointL4> = Vec::new();
        for r in [1.0, 8.0, 16.0, 30.0, 56.0, 120.0, 400.0] {
            let cur = s.disk_neighborhood(q, r).unwrap();
            assert!(prev.iter().all(|p| cur.contains(p)));
            assert!(cur.iter().all(|p| s.contains_l4(*p)));
            prev = cur;
        }
    }

    #[test]
    fn scaled_lattice() {
        let s = LatticeSpec::new(320, 240, 16, 8).unwrap();
        let t = s.scaled(1.25).unwrap();
        assert_eq!((t.width_l0, t.height_l0), (400, 300));
        assert!(s.scaled(0.0).is_err());
    }
}
