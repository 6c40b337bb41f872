//! Pipeline configuration, read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainParams;
use crate::concepts::{Method, DEFAULT_DB_THRESHOLD, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::eval::benchmark::{DEFAULT_LEVELS, DEFAULT_OBJECT_SCALES};
use crate::eval::concept::DEFAULT_MAX_SUBSET;
use crate::features::synth::{OcclusionLevel, WorldConfig};
use crate::lattice::{CONCEPT_RADIUS_PX, VOTING_RADIUS_PX};
use crate::likelihood::{DEFAULT_BINS, DEFAULT_EPSILON, DEFAULT_VOTERS};
use crate::spatial::DEFAULT_SUPPORT_MASS;
use crate::voting::{DetectParams, DEFAULT_BETA, DEFAULT_NMS_RADIUS_PX, DEFAULT_SCALES};

/// File locations. Relative paths are resolved against the directory of
/// the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of `<image id>.fmap` feature maps.
    pub features: PathBuf,
    pub annotations: PathBuf,
    /// Synthetic world description, needed for benchmarking and calibration.
    pub world: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            features: "features".into(),
            annotations: "annotations.json".into(),
            world: "world.json".into(),
            models: "models".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub width: u32,
    pub height: u32,
    pub n_train: usize,
    pub dim: usize,
    pub kappa_gen: f64,
    pub kappa_background: f64,
    pub jitter_px: f64,
    pub negatives_per_image: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            width: 320,
            height: 240,
            n_train: 30,
            dim: w.dim,
            kappa_gen: w.kappa_gen,
            kappa_background: w.kappa_background,
            jitter_px: w.jitter_px,
            negatives_per_image: w.negatives_per_image,
        }
    }
}

impl SynthSection {
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            dim: self.dim,
            kappa_gen: self.kappa_gen,
            kappa_background: self.kappa_background,
            jitter_px: self.jitter_px,
            negatives_per_image: self.negatives_per_image,
            ..WorldConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    #[serde(rename = "K")]
    pub k: usize,
    pub eta: f64,
    pub db_threshold: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub crop_concepts: bool,
    pub search_radius_px: f64,
    pub support_mass: f64,
    pub bins: usize,
    pub epsilon: f64,
    #[serde(rename = "K_voters")]
    pub k_voters: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: Method::Kmeans,
            k: 40,
            eta: DEFAULT_ETA,
            db_threshold: Some(DEFAULT_DB_THRESHOLD),
            max_iters: 100,
            tol: 1e-9,
            crop_concepts: true,
            search_radius_px: VOTING_RADIUS_PX,
            support_mass: DEFAULT_SUPPORT_MASS,
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_EPSILON,
            k_voters: DEFAULT_VOTERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub beta: f64,
    pub nms_radius: f64,
    pub gamma_th: f64,
    pub scales: Vec<f64>,
    /// Fixed score threshold; calibrated on object-free scenes when absent.
    pub threshold: Option<f64>,
    pub calibration_scenes: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            nms_radius: DEFAULT_NMS_RADIUS_PX,
            gamma_th: CONCEPT_RADIUS_PX,
            scales: DEFAULT_SCALES.to_vec(),
            threshold: None,
            calibration_scenes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub levels: Vec<u32>,
    pub object_scales: Vec<f64>,
    pub n_scenes: usize,
    pub max_subset: usize,
    pub encode_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS.to_vec(),
            object_scales: DEFAULT_OBJECT_SCALES.to_vec(),
            n_scenes: 30,
            max_subset: DEFAULT_MAX_SUBSET,
            encode_threshold: crate::concepts::encode::DEFAULT_ENCODING_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl PipelineConfig {
    /// A configuration with every default and the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            workers: None,
            paths: Paths::default(),
            synth: SynthSection::default(),
            train: TrainSection::default(),
            detect: DetectSection::default(),
            eval: EvalSection::default(),
            base_dir: PathBuf::from("."),
        }
    }

    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = Self::parse(&text, is_json).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let s = &self.synth;
        if s.width == 0 || s.height == 0 || s.n_train == 0 || s.dim < 2 {
            return Err(Error::Config("synth width, height, n_train must be positive and dim at least 2".into()));
        }
        positive("synth.kappa_gen", s.kappa_gen)?;
        positive("synth.kappa_background", s.kappa_background)?;
        if !(s.jitter_px >= 0.0) {
            return Err(Error::Config("synth.jitter_px must be nonnegative".into()));
        }
        self.train_params().validate()?;
        let d = &self.detect;
        if !(0.0..=1.0).contains(&d.beta) {
            return Err(Error::Config(format!("detect.beta must lie in [0, 1], got {}", d.beta)));
        }
        positive("detect.nms_radius", d.nms_radius)?;
        positive("detect.gamma_th", d.gamma_th)?;
        if d.scales.is_empty() {
            return Err(Error::Config("detect.scales must not be empty".into()));
        }
        for &t in &d.scales {
            positive("detect.scales", t)?;
        }
        if let Some(t) = d.threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("detect.threshold must be nonnegative, got {t}")));
            }
        }
        let e = &self.eval;
        if e.levels.is_empty() || e.object_scales.is_empty() || e.n_scenes == 0 || e.max_subset == 0 {
            return Err(Error::Config("eval levels, object scales, n_scenes and max_subset must be nonempty".into()));
        }
        for &l in &e.levels {
            OcclusionLevel::preset(l).map_err(|_| Error::Config(format!("unknown occlusion level {l}")))?;
        }
        for &t in &e.object_scales {
            positive("eval.object_scales", t)?;
        }
        if !(0.0..=2.0).contains(&e.encode_threshold) {
            return Err(Error::Config("eval.encode_threshold must lie in [0, 2]".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.resolve(&self.paths.features)
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.resolve(&self.paths.annotations)
    }

    pub fn world_path(&self) -> PathBuf {
        self.resolve(&self.paths.world)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.resolve(&self.paths.models)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.paths.reports)
    }

    pub fn train_params(&self) -> TrainParams {
        let t = &self.train;
        TrainParams {
            method: t.method,
            k: t.k,
            eta: t.eta,
            db_threshold: t.db_threshold,
            max_iters: t.max_iters,
            tol: t.tol,
            crop_concepts: t.crop_concepts,
            search_radius_px: t.search_radius_px,
            support_mass: t.support_mass,
            bins: t.bins,
            epsilon: t.epsilon,
            k_voters: t.k_voters,
            seed: crate::seed::subseed(self.seed, "train"),
        }
    }

    pub fn detect_params(&self, threshold: f64) -> DetectParams {
        DetectParams {
            beta: self.detect.beta,
            nms_radius_px: self.detect.nms_radius,
            score_threshold: threshold,
        }
    }

    /// Digest of every setting that shapes the trained models.
    pub fn model_hash(&self) -> String {
        let relevant = serde_json::json!({
            "seed": self.seed,
            "features": self.paths.features,
            "annotations": self.paths.annotations,
            "world": self.paths.world,
            "synth": self.synth,
            "train": self.train,
            "detect": self.detect,
        });
        hex::encode(Sha256::digest(relevant.to_string().as_bytes()))
    }
}
