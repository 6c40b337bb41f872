//! Synthetic scenes: an object made of parts, each part a small pattern of
//! feature "signatures" on the feature lattice, drawn with von Mises-Fisher
//! noise over a textured background. Occluders are axis-aligned rectangles
//! whose cells are repainted with occluder signatures.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::annotation::{AnnotationSet, ImageAnnotation, PartPoint};
use crate::features::map::FeatureMap;
use crate::lattice::{LatticeSpec, Offset, PointL0};
use crate::seed;
use crate::sphere::{dot, random_unit, sample_vmf};

/// Named occlusion presets: (occluder count, covered fraction range).
pub const OCCLUSION_LEVELS: [(u32, usize, [f64; 2]); 3] =
    [(1, 2, [0.2, 0.4]), (5, 3, [0.4, 0.6]), (9, 4, [0.6, 0.8])];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionLevel {
    pub level: u32,
    pub occluders: usize,
    pub fraction: [f64; 2],
}

impl OcclusionLevel {
    pub const NONE: OcclusionLevel = OcclusionLevel {
        level: 0,
        occluders: 0,
        fraction: [0.0, 0.0],
    };

    /// Looks up a named level: 0 (unoccluded), 1, 5 or 9.
    pub fn preset(level: u32) -> Result<Self> {
        if level == 0 {
            return Ok(Self::NONE);
        }
        OCCLUSION_LEVELS
            .iter()
            .find(|(l, _, _)| *l == level)
            .map(|&(level, occluders, fraction)| OcclusionLevel {
                level,
                occluders,
                fraction,
            })
            .ok_or_else(|| Error::Argument(format!("unknown occlusion level {level}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    /// Part center relative to the object origin, in pixels at unit scale.
    pub anchor: [f64; 2],
    /// Pattern cells relative to the part's center cell.
    pub elements: Vec<Offset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dim: usize,
    pub parts: Vec<PartSpec>,
    pub n_background: usize,
    pub n_occluders: usize,
    pub kappa_gen: f64,
    pub kappa_background: f64,
    pub jitter_px: f64,
    pub negatives_per_image: usize,
    pub gamma: f64,
    pub patch_side: u32,
    pub stride: u32,
}

impl Default for WorldConfig {
    /// A five-part side-view vehicle.
    fn default() -> Self {
        let cell = |x: i32, y: i32| [f64::from(16 * x), f64::from(16 * y)];
        let part = |name: &str, anchor: [f64; 2], el: &[(i32, i32)]| PartSpec {
            name: name.into(),
            anchor,
            elements: el.iter().map(|&(dx, dy)| Offset::new(dx, dy)).collect(),
        };
        Self {
            dim: 32,
            parts: vec![
                part("front_wheel", cell(3, 7), &[(0, 0), (-1, 0), (1, 0)]),
                part("back_wheel", cell(12, 7), &[(0, 0), (-1, 0), (1, 0)]),
                part("headlight", cell(1, 4), &[(0, 0), (0, -1), (1, 0)]),
                part("window", cell(7, 2), &[(0, 0), (-1, 0), (1, -1)]),
                part("door", cell(8, 5), &[(0, 0), (0, 1), (-1, 0)]),
            ],
            n_background: 6,
            n_occluders: 4,
            kappa_gen: 1000.0,
            kappa_background: 1000.0,
            jitter_px: 4.0,
            negatives_per_image: 10,
            gamma: 100.0,
            patch_side: 100,
            stride: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternElement {
    pub offset: Offset,
    pub signature: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub name: String,
    pub anchor: [f64; 2],
    pub elements: Vec<PatternElement>,
}

/// Generative model for synthetic feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub dim: usize,
    pub signatures: Vec<Vec<f32>>,
    pub parts: Vec<PartTemplate>,
    /// Placement templates: one center (pixels, relative to the object origin) per part.
    pub templates: Vec<Vec<[f64; 2]>>,
    pub background: Vec<usize>,
    pub occluders: Vec<usize>,
    pub kappa_gen: f64,
    pub kappa_background: f64,
    pub jitter_px: f64,
    pub negatives_per_image: usize,
    pub gamma: f64,
    pub patch_side: u32,
    pub stride: u32,
    pub noise_seed: u64,
}

/// What a generated cell depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellContent {
    Background { signature: usize },
    Part { part: usize, element: usize, signature: usize },
    Occluder { signature: usize },
}

impl CellContent {
    pub fn signature(&self) -> usize {
        match *self {
            CellContent::Background { signature }
            | CellContent::Part { signature, .. }
            | CellContent::Occluder { signature } => signature,
        }
    }
}

/// Where the object's parts sit in one scene, at the scene's native scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub spec: LatticeSpec,
    pub object_scale: f64,
    pub centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub map: FeatureMap,
    pub content: Vec<CellContent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)` at native scale.
    pub rect: [f64; 4],
    pub signature: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Occlusion {
    pub occluders: Vec<Occluder>,
    pub fraction: f64,
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::Argument("world dimension must be at least 2".into()));
        }
        if config.parts.is_empty() || config.n_background == 0 || config.n_occluders == 0 {
            return Err(Error::Argument(
                "world needs at least one part, background and occluder type".into(),
            ));
        }
        let n_elem: usize = config.parts.iter().map(|p| p.elements.len()).sum();
        let total = n_elem + config.n_background + config.n_occluders;
        let mut rng = seed::named_rng(seed, "world/signatures");
        let signatures = distinct_signatures(config.dim, total, &mut rng)?;

        let mut next = 0;
        let mut parts = Vec::with_capacity(config.parts.len());
        for p in &config.parts {
            if p.elements.is_empty() {
                return Err(Error::Argument(format!("part {} has no pattern", p.name)));
            }
            let elements = p
                .elements
                .iter()
                .map(|&offset| {
                    next += 1;
                    PatternElement {
                        offset,
                        signature: next - 1,
                    }
                })
                .collect();
            parts.push(PartTemplate {
                name: p.name.clone(),
                anchor: p.anchor,
                elements,
            });
        }
        let background: Vec<usize> = (next..next + config.n_background).collect();
        next += config.n_background;
        let occluders: Vec<usize> = (next..next + config.n_occluders).collect();
        let templates = vec![config.parts.iter().map(|p| p.anchor).collect()];
        Ok(Self {
            dim: config.dim,
            signatures,
            parts,
            templates,
            background,
            occluders,
            kappa_gen: config.kappa_gen,
            kappa_background: config.kappa_background,
            jitter_px: config.jitter_px,
            negatives_per_image: config.negatives_per_image,
            gamma: config.gamma,
            patch_side: config.patch_side,
            stride: config.stride,
            noise_seed: seed::subseed(seed, "world/noise"),
        })
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn part_names(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.name.clone()).collect()
    }

    /// Picks a template, a translation and per-part jitter so that every
    /// part center lands inside the image.
    pub fn sample_layout(
        &self,
        spec: &LatticeSpec,
        object_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<SceneLayout> {
        if !(object_scale > 0.0) {
            return Err(Error::Argument(format!("object scale must be positive, got {object_scale}")));
        }
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in template {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a] * object_scale);
                hi[a] = hi[a].max(c[a] * object_scale);
            }
        }
        let margin = f64::from(self.stride) + self.jitter_px;
        let dims = [f64::from(spec.width_l0), f64::from(spec.height_l0)];
        let mut origin = [0.0; 2];
        for a in 0..2 {
            let min_o = margin - lo[a];
            let max_o = dims[a] - 1.0 - margin - hi[a];
            if max_o < min_o {
                return Err(Error::Generation(format!(
                    "object of extent {:.0} px does not fit in {:.0} px",
                    hi[a] - lo[a],
                    dims[a]
                )));
            }
            origin[a] = rng.random_range(min_o..=max_o).round();
        }
        let centers = template
            .iter()
            .map(|c| {
                let mut p = [0.0; 2];
                for a in 0..2 {
                    let j = if self.jitter_px > 0.0 {
                        rng.random_range(-self.jitter_px..=self.jitter_px)
                    } else {
                        0.0
                    };
                    p[a] = origin[a] + c[a] * object_scale + j;
                }
                p
            })
            .collect();
        Ok(SceneLayout {
            spec: *spec,
            object_scale,
            centers,
        })
    }

    /// Renders a layout as seen in the image resized by `scale_tag`.
    pub fn render(&self, layout: &SceneLayout, scale_tag: f64, seed: u64) -> Result<RenderedScene> {
        let spec = if scale_tag == 1.0 {
            layout.spec
        } else {
            layout.spec.scaled(scale_tag)?
        };
        let mut rng = seed::named_rng(seed ^ self.noise_seed, &format!("render/{scale_tag:.6}"));
        let n = spec.num_cells();
        let mut content: Vec<CellContent> = (0..n)
            .map(|_| CellContent::Background {
                signature: self.background[rng.random_range(0..self.background.len())],
            })
            .collect();
        let stride = f64::from(self.stride);
        for (s, part) in self.parts.iter().enumerate() {
            let c = layout.centers[s];
            for (e, el) in part.elements.iter().enumerate() {
                let x = (c[0] + layout.object_scale * stride * f64::from(el.offset.dx)) * scale_tag;
                let y = (c[1] + layout.object_scale * stride * f64::from(el.offset.dy)) * scale_tag;
                let cell = spec.nearest_cell(x, y);
                if spec.contains_l4(cell) {
                    content[spec.index(cell)] = CellContent::Part {
                        part: s,
                        element: e,
                        signature: el.signature,
                    };
                }
            }
        }
        let mut data = Vec::with_capacity(n * self.dim);
        for c in &content {
            let kappa = match c {
                CellContent::Background { .. } => self.kappa_background,
                _ => self.kappa_gen,
            };
            data.extend(sample_vmf(&self.signatures[c.signature()], kappa, &mut rng));
        }
        let map = FeatureMap::new(spec, self.dim, data, scale_tag as f32)?;
        Ok(RenderedScene { map, content })
    }

    /// A scene without the object, as seen at `scale_tag`.
    pub fn render_background(&self, spec: &LatticeSpec, scale_tag: f64, seed: u64) -> Result<FeatureMap> {
        let layout = SceneLayout {
            spec: *spec,
            object_scale: 1.0,
            centers: Vec::new(),
        };
        let empty = Self {
            parts: Vec::new(),
            ..self.clone()
        };
        Ok(empty.render(&layout, scale_tag, seed)?.map)
    }

    /// Annotation for a layout at native scale, with negatives sampled at
    /// least `gamma` pixels from every part center.
    pub fn annotate(&self, layout: &SceneLayout, id: &str, rng: &mut ChaCha8Rng) -> Result<ImageAnnotation> {
        let positives: Vec<PartPoint> = layout
            .centers
            .iter()
            .enumerate()
            .map(|(part, c)| PartPoint {
                part,
                x: c[0].round() as i32,
                y: c[1].round() as i32,
            })
            .collect();
        let spec = &layout.spec;
        let mut negatives = Vec::with_capacity(self.negatives_per_image);
        let max_attempts = 1000 * self.negatives_per_image.max(1);
        let mut attempts = 0;
        while negatives.len() < self.negatives_per_image {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Generation(format!(
                    "could not place {} negatives at least {} px from the parts in a {}x{} image",
                    self.negatives_per_image, self.gamma, spec.width_l0, spec.height_l0
                )));
            }
            let q = PointL0::new(
                rng.random_range(0..spec.width_l0 as i32),
                rng.random_range(0..spec.height_l0 as i32),
            );
            if positives.iter().all(|p| p.point().dist(&q) >= self.gamma) {
                negatives.push(q);
            }
        }
        Ok(ImageAnnotation {
            id: id.to_string(),
            positives,
            negatives,
        })
    }

    pub fn annotation_set(&self, images: Vec<ImageAnnotation>) -> AnnotationSet {
        AnnotationSet {
            images,
            patch_side: self.patch_side,
            gamma: self.gamma,
            parts: self.part_names(),
        }
    }

    /// Rejection-samples `n` rectangles covering a fraction within `range`
    /// of the union of part patches.
    pub fn sample_occluders(
        &self,
        spec: &LatticeSpec,
        positives: &[PointL0],
        n: usize,
        range: [f64; 2],
        rng: &mut ChaCha8Rng,
    ) -> Result<Occlusion> {
        let [lo, hi] = range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Argument(format!("bad occlusion fraction range [{lo}, {hi}]")));
        }
        if n == 0 {
            return Err(Error::Argument("need at least one occluder".into()));
        }
        if hi <= 0.0 {
            return Ok(Occlusion::default());
        }
        let patches = patch_rects(spec, positives, self.patch_side);
        let total = union_area(&patches, &[]);
        if total <= 0.0 {
            return Err(Error::Argument("no part patches to occlude".into()));
        }
        let bbox = patches.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |b, r| [b[0].min(r[0]), b[1].min(r[1]), b[2].max(r[2]), b[3].max(r[3])],
        );
        let (bw, bh) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
        let per = 0.5 * (lo + hi) * total / n as f64;
        const MAX_ATTEMPTS: usize = 20_000;
        for _ in 0..MAX_ATTEMPTS {
            let rects: Vec<[f64; 4]> = (0..n)
                .map(|_| {
                    let area = per * rng.random_range(0.5..1.8);
                    let aspect = rng.random_range(0.5f64.ln()..2f64.ln()).exp();
                    let w = (area * aspect).sqrt().min(bw);
                    let h = (area / w).min(bh);
                    let cx = rng.random_range(bbox[0]..=bbox[2]);
                    let cy = rng.random_range(bbox[1]..=bbox[3]);
                    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
                })
                .collect();
            let fraction = covered_area(&patches, &rects) / total;
            if fraction >= lo && fraction <= hi {
                let occluders = rects
                    .into_iter()
                    .map(|rect| Occluder {
                        rect,
                        signature: self.occluders[rng.random_range(0..self.occluders.len())],
                    })
                    .collect();
                return Ok(Occlusion { occluders, fraction });
            }
        }
        Err(Error::OcclusionInfeasible {
            attempts: MAX_ATTEMPTS,
            msg: format!("{n} occluders covering [{lo}, {hi}] of the object"),
        })
    }

    /// Repaints every cell whose center falls inside an occluder. Rectangles
    /// are in native pixels and scaled by the map's scale tag.
    pub fn paint_occluders(
        &self,
        map: &FeatureMap,
        occlusion: &Occlusion,
        seed: u64,
    ) -> Result<(FeatureMap, Vec<bool>)> {
        let mut out = map.clone();
        let spec = *map.spec();
        let t = f64::from(map.scale_tag());
        let mut mask = vec![false; spec.num_cells()];
        let mut rng = seed::named_rng(seed ^ self.noise_seed, &format!("occlude/{t:.6}"));
        for (i, cell) in spec.cells().enumerate() {
            let q = spec.map_up_unchecked(cell);
            let (x, y) = (f64::from(q.x) / t, f64::from(q.y) / t);
            // later occluders are on top
            let hit = occlusion
                .occluders
                .iter()
                .rev()
                .find(|o| x >= o.rect[0] && x < o.rect[2] && y >= o.rect[1] && y < o.rect[3]);
            if let Some(o) = hit {
                mask[i] = true;
                let v = sample_vmf(&self.signatures[o.signature], self.kappa_gen, &mut rng);
                out.vector_mut(i).copy_from_slice(&v);
            }
        }
        Ok((out, mask))
    }
}

/// Generates one unoccluded scene at unit scale: a pure function of its inputs.
pub fn generate_scene(
    world: &SyntheticWorld,
    spec: &LatticeSpec,
    seed: u64,
) -> Result<(FeatureMap, AnnotationSet)> {
    let mut rng = seed::named_rng(seed, "scene/layout");
    let layout = world.sample_layout(spec, 1.0, &mut rng)?;
    let scene = world.render(&layout, 1.0, seed)?;
    let ann = world.annotate(&layout, &format!("scene-{seed}"), &mut rng)?;
    Ok((scene.map, world.annotation_set(vec![ann])))
}

/// Occludes part of the annotated object in `map`. Returns the new map, the
/// covered fraction of the part-patch union, and the mask of repainted cells.
pub fn apply_occlusion(
    map: &FeatureMap,
    ann: &ImageAnnotation,
    n_occluders: usize,
    fraction_range: [f64; 2],
    world: &SyntheticWorld,
    seed: u64,
) -> Result<(FeatureMap, f64, Vec<bool>)> {
    let t = f64::from(map.scale_tag());
    let native = if t == 1.0 {
        *map.spec()
    } else {
        map.spec().scaled(1.0 / t)?
    };
    let positives: Vec<PointL0> = ann.positives.iter().map(PartPoint::point).collect();
    let mut rng = seed::named_rng(seed, "occlusion/rects");
    let occlusion = world.sample_occluders(&native, &positives, n_occluders, fraction_range, &mut rng)?;
    let (out, mask) = world.paint_occluders(map, &occlusion, seed)?;
    Ok((out, occlusion.fraction, mask))
}

fn distinct_signatures(dim: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f32>>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut placed = false;
        for (limit, tries) in [(0.5, 5000), (0.9, 5000)] {
            for _ in 0..tries {
                let v = random_unit(dim, rng);
                if out.iter().all(|u| dot(u, &v) < limit) {
                    out.push(v);
                    placed = true;
                    break;
                }
            }
            if placed {
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "cannot place {n} distinct signatures in dimension {dim}"
            )));
        }
    }
    Ok(out)
}

fn patch_rects(spec: &LatticeSpec, centers: &[PointL0], side: u32) -> Vec<[f64; 4]> {
    let h = f64::from(side) / 2.0;
    let (w, hh) = (f64::from(spec.width_l0), f64::from(spec.height_l0));
    centers
        .iter()
        .map(|c| {
            let (x, y) = (f64::from(c.x), f64::from(c.y));
            [(x - h).max(0.0), (y - h).max(0.0), (x + h).min(w), (y + h).min(hh)]
        })
        .filter(|r| r[2] > r[0] && r[3] > r[1])
        .collect()
}

fn inside_any(rects: &[[f64; 4]], x: f64, y: f64) -> bool {
    rects
        .iter()
        .any(|r| x >= r[0] && x < r[2] && y >= r[1] && y < r[3])
}

/// Exact area of `union(a)` (intersected with `union(b)` when `b` is
/// nonempty), by coordinate compression.
fn union_area(a: &[[f64; 4]], b: &[[f64; 4]]) -> f64 {
    let mut xs: Vec<f64> = a.iter().chain(b).flat_map(|r| [r[0], r[2]]).collect();
    let mut ys: Vec<f64> = a.iter().chain(b).flat_map(|r| [r[1], r[3]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        let mx = 0.5 * (xw[0] + xw[1]);
        for yw in ys.windows(2) {
            let my = 0.5 * (yw[0] + yw[1]);
            if inside_any(a, mx, my) && (b.is_empty() || inside_any(b, mx, my)) {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

fn covered_area(patches: &[[f64; 4]], occluders: &[[f64; 4]]) -> f64 {
    if occluders.is_empty() {
        0.0
    } else {
        union_area(patches, occluders)
    }
}

/// Fraction of the part-patch union covered by an occlusion, recomputed from scratch.
pub fn occluded_fraction(spec: &LatticeSpec, positives: &[PointL0], side: u32, occ: &Occlusion) -> f64 {
    let patches = patch_rects(spec, positives, side);
    let rects: Vec<[f64; 4]> = occ.occluders.iter().map(|o| o.rect).collect();
    covered_area(&patches, &rects) / union_area(&patches, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::sq_dist;

    fn scene_spec() -> LatticeSpec {
        LatticeSpec::new(480, 320, 16, 8).unwrap()
    }

    fn two_part_config() -> WorldConfig {
        WorldConfig {
            parts: vec![
                PartSpec {
                    name: "a".into(),
                    anchor: [0.0, 0.0],
                    elements: vec![Offset::new(0, 0), Offset::new(0, -1)],
                },
                PartSpec {
                    name: "b".into(),
                    anchor: [96.0, 32.0],
                    elements: vec![Offset::new(0, 0)],
                },
            ],
            ..WorldConfig::default()
        }
    }

    #[test]
    fn signatures_are_unit_and_distinct() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 1).unwrap();
        for (i, a) in w.signatures.iter().enumerate() {
            assert!((dot(a, a) - 1.0).abs() < 1e-6);
            for b in &w.signatures[..i] {
                assert!(dot(a, b) < 0.9);
            }
        }
        assert_eq!(w.num_parts(), 5);
    }

    #[test]
    fn infinite_kappa_emits_signatures_exactly() {
        let cfg = WorldConfig {
            kappa_gen: f64::INFINITY,
            kappa_background: f64::INFINITY,
            ..WorldConfig::default()
        };
        let w = SyntheticWorld::generate(&cfg, 3).unwrap();
        let mut rng = seed::rng(0);
        let layout = w.sample_layout(&scene_spec(), 1.0, &mut rng).unwrap();
        let scene = w.render(&layout, 1.0, 11).unwrap();
        for (i, c) in scene.content.iter().enumerate() {
            assert_eq!(scene.map.vector(i), &w.signatures[c.signature()][..]);
        }
    }

    #[test]
    fn scene_is_pure_function_of_inputs() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 2).unwrap();
        let (a, aa) = generate_scene(&w, &scene_spec(), 5).unwrap();
        let (b, bb) = generate_scene(&w, &scene_spec(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(aa, bb);
        let (c, _) = generate_scene(&w, &scene_spec(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn annotation_satisfies_gamma() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 2).unwrap();
        for s in 0..20 {
            let (_, ann) = generate_scene(&w, &scene_spec(), s).unwrap();
            ann.validate().unwrap();
            let im = &ann.images[0];
            assert_eq!(im.negatives.len(), w.negatives_per_image);
            for n in &im.negatives {
                for p in &im.positives {
                    assert!(p.point().dist(n) >= w.gamma);
                }
            }
        }
    }

    #[test]
    fn negatives_infeasible_in_tiny_image() {
        let w = SyntheticWorld::generate(&two_part_config(), 2).unwrap();
        let spec = LatticeSpec::new(150, 100, 16, 8).unwrap();
        assert!(matches!(
            generate_scene(&w, &spec, 1),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn nearest_signature_recovers_layout() {
        let w = SyntheticWorld::generate(&two_part_config(), 4).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for s in 0..10 {
            let mut rng = seed::rng(s);
            let layout = w.sample_layout(&scene_spec(), 1.0, &mut rng).unwrap();
            let scene = w.render(&layout, 1.0, s).unwrap();
            for (i, c) in scene.content.iter().enumerate() {
                let v = scene.map.vector(i);
                let best = (0..w.signatures.len())
                    .min_by(|&a, &b| {
                        sq_dist(v, &w.signatures[a]).total_cmp(&sq_dist(v, &w.signatures[b]))
                    })
                    .unwrap();
                correct += usize::from(best == c.signature());
                total += 1;
            }
        }
        assert!(correct as f64 >= 0.99 * total as f64, "{correct}/{total}");
    }

    #[test]
    fn offset_signature_sits_above_center() {
        let cfg = WorldConfig {
            jitter_px: 0.0,
            ..two_part_config()
        };
        let w = SyntheticWorld::generate(&cfg, 4).unwrap();
        let mut rng = seed::rng(1);
        let layout = w.sample_layout(&scene_spec(), 1.0, &mut rng).unwrap();
        let scene = w.render(&layout, 1.0, 1).unwrap();
        let spec = scene.map.spec();
        let c = layout.centers[0];
        let center = spec.nearest_cell(c[0], c[1]);
        let above = crate::lattice::PointL4::new(center.x, center.y - 1);
        assert_eq!(
            scene.content[spec.index(above)],
            CellContent::Part { part: 0, element: 1, signature: 1 }
        );
    }

    #[test]
    fn scaled_render_keeps_pattern_at_matching_scale() {
        let cfg = WorldConfig {
            jitter_px: 0.0,
            ..WorldConfig::default()
        };
        let w = SyntheticWorld::generate(&cfg, 4).unwrap();
        let mut rng = seed::rng(3);
        let layout = w.sample_layout(&scene_spec(), 0.8, &mut rng).unwrap();
        let scene = w.render(&layout, 1.25, 3).unwrap();
        let parts = scene
            .content
            .iter()
            .filter(|c| matches!(c, CellContent::Part { .. }))
            .count();
        assert_eq!(parts, 15);
        assert_eq!(scene.map.scale_tag(), 1.25);
    }

    #[test]
    fn level_presets() {
        assert_eq!(OcclusionLevel::preset(1).unwrap().occluders, 2);
        assert_eq!(OcclusionLevel::preset(1).unwrap().fraction, [0.2, 0.4]);
        assert_eq!(OcclusionLevel::preset(5).unwrap().occluders, 3);
        assert_eq!(OcclusionLevel::preset(5).unwrap().fraction, [0.4, 0.6]);
        assert_eq!(OcclusionLevel::preset(9).unwrap().occluders, 4);
        assert_eq!(OcclusionLevel::preset(9).unwrap().fraction, [0.6, 0.8]);
        assert!(OcclusionLevel::preset(3).is_err());
    }

    #[test]
    fn zero_fraction_range_is_a_no_op() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 2).unwrap();
        let (map, ann) = generate_scene(&w, &scene_spec(), 8).unwrap();
        let (out, frac, mask) = apply_occlusion(&map, &ann.images[0], 1, [0.0, 0.0], &w, 1).unwrap();
        assert_eq!(out, map);
        assert_eq!(frac, 0.0);
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn achieved_fraction_within_range_and_only_mask_changes() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 2).unwrap();
        let spec = scene_spec();
        for level in [1, 5, 9] {
            let preset = OcclusionLevel::preset(level).unwrap();
            for s in 0..100u64 {
                let (map, ann) = generate_scene(&w, &spec, s).unwrap();
                let im = &ann.images[0];
                let (out, frac, mask) =
                    apply_occlusion(&map, im, preset.occluders, preset.fraction, &w, s).unwrap();
                assert!(frac >= preset.fraction[0] && frac <= preset.fraction[1], "{frac}");
                // independent recomputation of the covered fraction
                let pos: Vec<PointL0> = im.positives.iter().map(PartPoint::point).collect();
                let mut rng = seed::named_rng(s, "occlusion/rects");
                let occ = w
                    .sample_occluders(&spec, &pos, preset.occluders, preset.fraction, &mut rng)
                    .unwrap();
                let raster = raster_fraction(&spec, &pos, w.patch_side, &occ);
                assert!((raster - frac).abs() < 0.02, "{raster} vs {frac}");
                for i in 0..map.num_cells() {
                    let same = map.vector(i).iter().zip(out.vector(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                    assert_eq!(same, !mask[i], "cell {i}");
                }
            }
        }
    }

    // pixel-grid estimate of the covered fraction
    fn raster_fraction(spec: &LatticeSpec, pos: &[PointL0], side: u32, occ: &Occlusion) -> f64 {
        let h = f64::from(side) / 2.0;
        let (mut inside, mut covered) = (0usize, 0usize);
        for y in 0..spec.height_l0 {
            for x in 0..spec.width_l0 {
                let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                let in_patch = pos.iter().any(|p| {
                    (fx - f64::from(p.x)).abs() < h && (fy - f64::from(p.y)).abs() < h
                });
                if in_patch {
                    inside += 1;
                    let r = occ.occluders.iter().any(|o| {
                        fx >= o.rect[0] && fx < o.rect[2] && fy >= o.rect[1] && fy < o.rect[3]
                    });
                    covered += usize::from(r);
                }
            }
        }
        covered as f64 / inside as f64
    }

    #[test]
    fn fraction_helper_agrees_with_sampler() {
        let w = SyntheticWorld::generate(&WorldConfig::default(), 2).unwrap();
        let spec = scene_spec();
        let (_, ann) = generate_scene(&w, &spec, 3).unwrap();
        let pos: Vec<PointL0> = ann.images[0].positives.iter().map(PartPoint::point).collect();
        let mut rng = seed::rng(1);
        let occ = w.sample_occluders(&spec, &pos, 3, [0.4, 0.6], &mut rng).unwrap();
        assert!((occluded_fraction(&spec, &pos, 100, &occ) - occ.fraction).abs() < 1e-12);
    }
}
