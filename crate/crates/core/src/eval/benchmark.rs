//! Occlusion benchmark on synthetic scenes: voting against the best single
//! concept per part, with the object scale known or searched.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{evaluate_detections, Matcher};
use super::concept::concept_firings;
use crate::concepts::{ConceptBank, DistanceField};
use crate::error::{Error, Result};
use crate::features::synth::{Occlusion, OcclusionLevel, SyntheticWorld};
use crate::features::{AnnotationSet, FeatureMap};
use crate::lattice::{LatticeSpec, PointL0};
use crate::seed;
use crate::voting::{detect_with_field, pool_scales, DetectParams, Detection, VotingPlan, DEFAULT_SCALES};

pub const DEFAULT_LEVELS: [u32; 4] = [0, 1, 5, 9];
pub const DEFAULT_OBJECT_SCALES: [f64; 3] = [0.8, 1.0, 1.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_scenes: usize,
    pub width: u32,
    pub height: u32,
    pub levels: Vec<u32>,
    /// Object sizes relative to training, cycled over the scenes.
    pub object_scales: Vec<f64>,
    /// Scale tags searched when the object scale is unknown.
    pub scales: Vec<f64>,
    pub detect: DetectParams,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn new(n_scenes: usize, width: u32, height: u32, seed: u64) -> Self {
        Self {
            n_scenes,
            width,
            height,
            levels: DEFAULT_LEVELS.to_vec(),
            object_scales: DEFAULT_OBJECT_SCALES.to_vec(),
            scales: DEFAULT_SCALES.to_vec(),
            detect: DetectParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::Config("benchmark needs at least one scene".into()));
        }
        if self.levels.is_empty() || self.object_scales.is_empty() || self.scales.is_empty() {
            return Err(Error::Config("benchmark levels and scale sets must be nonempty".into()));
        }
        for &l in &self.levels {
            OcclusionLevel::preset(l)?;
        }
        if let Some(s) = self.object_scales.iter().chain(&self.scales).find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("scales must be positive, got {s}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Voting,
    SingleConcept,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Voting => "voting",
            Method::SingleConcept => "single_concept",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Known,
    Unknown,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Known => "known",
            ScaleMode::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub level: u32,
    pub part: String,
    pub method: Method,
    pub scale_mode: ScaleMode,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: u32,
    pub mean_occluded_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub n_scenes: usize,
    /// Concept used by the single-concept method for each part.
    pub baseline: Vec<usize>,
    pub levels: Vec<LevelStats>,
    pub rows: Vec<BenchmarkRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub level: u32,
    pub method: Method,
    pub scale_mode: ScaleMode,
    pub ap: f64,
}

impl BenchmarkReport {
    /// AP averaged over parts.
    pub fn mean_ap(&self, level: u32, method: Method, mode: ScaleMode) -> Option<f64> {
        let aps: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.level == level && r.method == method && r.scale_mode == mode)
            .map(|r| r.ap)
            .collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    pub fn means(&self) -> Vec<MeanAp> {
        let mut out = Vec::new();
        for l in &self.levels {
            for method in [Method::Voting, Method::SingleConcept] {
                for mode in [ScaleMode::Known, ScaleMode::Unknown] {
                    if let Some(ap) = self.mean_ap(l.level, method, mode) {
                        out.push(MeanAp {
                            level: l.level,
                            method,
                            scale_mode: mode,
                            ap,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,part,method,scale_mode,ap\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.6}", r.level, r.part, r.method.as_str(), r.scale_mode.as_str(), r.ap);
        }
        s
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "n_scenes": self.n_scenes,
            "baseline": self.baseline,
            "levels": self.levels,
            "mean_ap": self.means(),
            "rows": self.rows,
        })
    }

    /// Writes `benchmark.csv` and `benchmark.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("benchmark.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("benchmark.json");
        let text = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::json(&json, e))?;
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// One test scene rendered at its known scale and over the search pyramid.
#[derive(Debug, Clone)]
pub struct TestScene {
    pub positives: Vec<Vec<PointL0>>,
    pub object_scale: f64,
    pub occluded_fraction: f64,
    pub known: FeatureMap,
    pub pyramid: Vec<FeatureMap>,
}

/// Scenes for one occlusion level. Layouts depend only on the scene index,
/// so every level occludes the same objects.
pub fn benchmark_scenes(world: &SyntheticWorld, cfg: &BenchmarkConfig, level: u32) -> Result<Vec<TestScene>> {
    cfg.validate()?;
    let preset = OcclusionLevel::preset(level)?;
    let spec = LatticeSpec::new(cfg.width, cfg.height, world.stride, world.stride / 2)?;
    (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let scene_seed = seed::subseed(cfg.seed, &format!("bench/scene/{i}"));
            let mut rng = seed::named_rng(scene_seed, "layout");
            let sigma = cfg.object_scales[i % cfg.object_scales.len()];
            let layout = world.sample_layout(&spec, sigma, &mut rng)?;
            let ann = world.annotate(&layout, &format!("test-{i}"), &mut rng)?;
            let all: Vec<PointL0> = ann.positives.iter().map(|p| p.point()).collect();
            let occlusion = if preset.occluders == 0 {
                Occlusion::default()
            } else {
                let mut orng = seed::named_rng(scene_seed, &format!("occlusion/{level}"));
                world.sample_occluders(&spec, &all, preset.occluders, preset.fraction, &mut orng)?
            };
            let render = |t: f64| -> Result<FeatureMap> {
                let map = world.render(&layout, t, scene_seed)?.map;
                if occlusion.occluders.is_empty() {
                    Ok(map)
                } else {
                    Ok(world.paint_occluders(&map, &occlusion, scene_seed)?.0)
                }
            };
            let pyramid = cfg.scales.iter().map(|&t| render(t)).collect::<Result<Vec<_>>>()?;
            let known_tag = 1.0 / sigma;
            let known = match cfg.scales.iter().position(|&t| (t - known_tag).abs() < 1e-9) {
                Some(j) => pyramid[j].clone(),
                None => render(known_tag)?,
            };
            let positives = (0..world.num_parts()).map(|s| ann.positives_of(s).collect()).collect();
            Ok(TestScene {
                positives,
                object_scale: sigma,
                occluded_fraction: occlusion.fraction,
                known,
                pyramid,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage(format!("occlusion level {level}")))
}

/// For each part, the concept whose firings alone give the best box AP on
/// the given scenes. Ties go to the lower concept index.
pub fn select_baseline(
    bank: &ConceptBank,
    maps: &[FeatureMap],
    annotations: &AnnotationSet,
    nms_radius_px: f64,
) -> Result<Vec<usize>> {
    if maps.len() != annotations.images.len() {
        return Err(Error::Argument("maps and annotations differ in length".into()));
    }
    let side = f64::from(annotations.patch_side);
    let firings: Vec<Vec<Vec<Detection>>> = maps
        .par_iter()
        .map(|m| {
            let f = DistanceField::compute(m, bank)?;
            (0..bank.len())
                .map(|v| concept_firings(m, f.concept(v), 0, None, nms_radius_px))
                .collect()
        })
        .collect::<Result<_>>()?;
    (0..annotations.num_parts())
        .map(|s| {
            let mut best = (0, f64::NEG_INFINITY);
            for v in 0..bank.len() {
                let images: Vec<(Vec<Detection>, Vec<PointL0>)> = firings
                    .iter()
                    .zip(&annotations.images)
                    .map(|(f, a)| (f[v].clone(), a.positives_of(s).collect()))
                    .collect();
                let ap = evaluate_detections(&images, Matcher::Iou { side })?.ap;
                if ap > best.1 {
                    best = (v, ap);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Detections of every method and scale mode on one scene, indexed
/// `[method][mode]`.
fn scene_detections(
    scene: &TestScene,
    bank: &ConceptBank,
    plan: &VotingPlan,
    baseline: &[usize],
    params: &DetectParams,
) -> Result<[[Vec<Detection>; 2]; 2]> {
    let one = |map: &FeatureMap| -> Result<(Vec<Detection>, Vec<Detection>)> {
        let field = DistanceField::compute(map, bank)?;
        let voting = detect_with_field(map, &field, plan, params)?;
        let mut single = Vec::new();
        for (s, &v) in baseline.iter().enumerate() {
            single.extend(concept_firings(map, field.concept(v), s, None, params.nms_radius_px)?);
        }
        Ok((voting, single))
    };
    let (kv, ks) = one(&scene.known)?;
    let mut pv = Vec::new();
    let mut ps = Vec::new();
    for m in &scene.pyramid {
        let (v, s) = one(m)?;
        pv.push(v);
        ps.push(s);
    }
    Ok([
        [kv, pool_scales(pv, params.nms_radius_px)?],
        [ks, pool_scales(ps, params.nms_radius_px)?],
    ])
}

/// Runs every level of the benchmark and reports per-part AP.
pub fn occlusion_benchmark(
    world: &SyntheticWorld,
    bank: &ConceptBank,
    plan: &VotingPlan,
    baseline: &[usize],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let n_parts = world.num_parts();
    if plan.parts.len() != n_parts || baseline.len() != n_parts {
        return Err(Error::Config(format!(
            "world has {n_parts} parts but models cover {} and the baseline {}",
            plan.parts.len(),
            baseline.len()
        )));
    }
    let side = f64::from(world.patch_side);
    let names = world.part_names();
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    for &level in &cfg.levels {
        let scenes = benchmark_scenes(world, cfg, level)?;
        let dets: Vec<[[Vec<Detection>; 2]; 2]> = scenes
            .par_iter()
            .map(|sc| scene_detections(sc, bank, plan, baseline, &cfg.detect))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage(format!("occlusion level {level}")))?;
        levels.push(LevelStats {
            level,
            mean_occluded_fraction: scenes.iter().map(|s| s.occluded_fraction).sum::<f64>() / scenes.len() as f64,
        });
        for (s, name) in names.iter().enumerate() {
            for (mi, method) in [Method::Voting, Method::SingleConcept].into_iter().enumerate() {
                for (si, mode) in [ScaleMode::Known, ScaleMode::Unknown].into_iter().enumerate() {
                    let images: Vec<(Vec<Detection>, Vec<PointL0>)> = dets
                        .iter()
                        .zip(&scenes)
                        .map(|(d, sc)| {
                            let mine = d[mi][si].iter().filter(|x| x.part == s).copied().collect();
                            (mine, sc.positives[s].clone())
                        })
                        .collect();
                    let ap = evaluate_detections(&images, Matcher::Iou { side })?.ap;
                    rows.push(BenchmarkRow {
                        level,
                        part: name.clone(),
                        method,
                        scale_mode: mode,
                        ap,
                    });
                }
            }
        }
    }
    Ok(BenchmarkReport {
        seed: cfg.seed,
        n_scenes: cfg.n_scenes,
        baseline: baseline.to_vec(),
        levels,
        rows,
    })
}
