//! The pipeline stages behind each command, reading and writing files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::{calibrate_threshold, synth_dataset, train, Dataset, TrainReport};
use crate::concepts::{activation_histogram, encode_sparse, ActivationReport, ConceptBank};
use crate::error::{Error, Result};
use crate::eval::{
    ap_histogram, evaluate_concept, occlusion_benchmark, select_baseline, BenchmarkConfig, BenchmarkReport, ConceptEvalParams,
    ConceptMode,
};
use crate::features::synth::SyntheticWorld;
use crate::features::{read_feature_map, write_feature_map, AnnotationSet, FeatureMap};
use crate::likelihood::{EvidenceModel, VoterSet};
use crate::seed;
use crate::spatial::SpatialModel;
use crate::voting::{detect, multi_scale_detect, write_detections_jsonl, Models};

pub const BANK_FILE: &str = "concepts.vcbank";
pub const SPATIAL_FILE: &str = "spatial.json";
pub const EVIDENCE_FILE: &str = "evidence.json";
pub const VOTERS_FILE: &str = "voters.json";
pub const DETECTOR_FILE: &str = "detector.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Detection settings stored with the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub beta: f64,
    pub nms_radius_px: f64,
    pub threshold: f64,
    pub scales: Vec<f64>,
    /// Best single concept per part on the training scenes.
    pub baseline: Vec<usize>,
}

/// Provenance of a trained model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of every input file, keyed by its configured path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every model file.
    pub outputs: BTreeMap<String, String>,
    pub report: TrainReport,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn feature_file(cfg: &PipelineConfig, id: &str) -> (String, PathBuf) {
    let rel = cfg.paths.features.join(format!("{id}.fmap"));
    (rel.display().to_string(), cfg.resolve(&rel))
}

pub fn world_of(cfg: &PipelineConfig) -> Result<SyntheticWorld> {
    SyntheticWorld::generate(&cfg.synth.world_config(), seed::subseed(cfg.seed, "world"))
}

/// Files written by [`run_synth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub world: PathBuf,
    pub annotations: PathBuf,
    pub feature_maps: usize,
}

/// Generates a synthetic world and its annotated training scenes.
pub fn run_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let world = world_of(cfg).map_err(|e| e.in_stage("synth"))?;
    let s = &cfg.synth;
    let data = synth_dataset(&world, s.width, s.height, s.n_train, seed::subseed(cfg.seed, "train-scenes"))
        .map_err(|e| e.in_stage("synth"))?;
    let world_path = cfg.world_path();
    if let Some(dir) = world_path.parent() {
        create_dir(dir)?;
    }
    write_json(&world_path, &world)?;
    create_dir(&cfg.features_dir())?;
    for (map, im) in data.maps.iter().zip(&data.annotations.images) {
        write_feature_map(map, feature_file(cfg, &im.id).1)?;
    }
    let ann = cfg.annotations_path();
    if let Some(dir) = ann.parent() {
        create_dir(dir)?;
    }
    data.annotations.write(&ann)?;
    info!("wrote {} scenes", data.maps.len());
    Ok(SynthSummary {
        world: world_path,
        annotations: ann,
        feature_maps: data.maps.len(),
    })
}

/// Reads the annotated training maps named in the configuration.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let annotations = AnnotationSet::read(cfg.annotations_path())?;
    annotations.validate()?;
    let maps = annotations
        .images
        .iter()
        .map(|im| read_feature_map(feature_file(cfg, &im.id).1))
        .collect::<Result<Vec<FeatureMap>>>()?;
    Ok(Dataset { maps, annotations })
}

fn input_checksums(cfg: &PipelineConfig, data: &Dataset, with_world: bool) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    inputs.insert(cfg.paths.annotations.display().to_string(), sha256_file(&cfg.annotations_path())?);
    for im in &data.annotations.images {
        let (key, path) = feature_file(cfg, &im.id);
        inputs.insert(key, sha256_file(&path)?);
    }
    if with_world {
        inputs.insert(cfg.paths.world.display().to_string(), sha256_file(&cfg.world_path())?);
    }
    Ok(inputs)
}

/// Trains every model and writes it with a manifest into the model directory.
pub fn run_train(cfg: &PipelineConfig) -> Result<Manifest> {
    let data = load_dataset(cfg)?;
    let params = cfg.train_params();
    let (models, report) = train(&data.maps, &data.annotations, &params)?;
    let baseline = select_baseline(&models.bank, &data.maps, &data.annotations, cfg.detect.nms_radius)
        .map_err(|e| e.in_stage("baseline"))?;

    let world_path = cfg.world_path();
    let with_world = world_path.exists();
    let threshold = match cfg.detect.threshold {
        Some(t) => t,
        None if with_world => {
            let world: SyntheticWorld = read_json(&world_path)?;
            let plan = models.plan(cfg.detect.beta)?;
            let t = calibrate_threshold(
                &world,
                &models.bank,
                &plan,
                cfg.synth.width,
                cfg.synth.height,
                cfg.detect.calibration_scenes,
                &cfg.detect.scales,
                seed::subseed(cfg.seed, "calibration"),
            )
            .map_err(|e| e.in_stage("calibration"))?;
            info!("calibrated score threshold {t:.4}");
            t
        }
        None => {
            warn!("no world description at {}; using score threshold 0", world_path.display());
            0.0
        }
    };

    let dir = cfg.models_dir();
    create_dir(&dir)?;
    models.bank.write(dir.join(BANK_FILE))?;
    models.spatial.write(dir.join(SPATIAL_FILE))?;
    models.evidence.write(dir.join(EVIDENCE_FILE))?;
    models.voters.write(dir.join(VOTERS_FILE))?;
    let settings = DetectorSettings {
        beta: cfg.detect.beta,
        nms_radius_px: cfg.detect.nms_radius,
        threshold,
        scales: cfg.detect.scales.clone(),
        baseline,
    };
    write_json(&dir.join(DETECTOR_FILE), &settings)?;
    let mut outputs = BTreeMap::new();
    for f in [BANK_FILE, SPATIAL_FILE, EVIDENCE_FILE, VOTERS_FILE, DETECTOR_FILE] {
        outputs.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    let manifest = Manifest {
        config_hash: cfg.model_hash(),
        seed: cfg.seed,
        inputs: input_checksums(cfg, &data, with_world)?,
        outputs,
        report,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_models(dir: &Path) -> Result<(Models, DetectorSettings, Manifest)> {
    let models = Models {
        bank: ConceptBank::read(dir.join(BANK_FILE))?,
        spatial: SpatialModel::read(dir.join(SPATIAL_FILE))?,
        evidence: EvidenceModel::read(dir.join(EVIDENCE_FILE))?,
        voters: VoterSet::read(dir.join(VOTERS_FILE))?,
    };
    models.validate()?;
    let settings: DetectorSettings = read_json(&dir.join(DETECTOR_FILE))?;
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    Ok((models, settings, manifest))
}

/// Fails when the models were trained from other settings or inputs.
pub fn check_fresh(cfg: &PipelineConfig, manifest: &Manifest) -> Result<()> {
    let dir = cfg.models_dir();
    let expected = cfg.model_hash();
    if manifest.config_hash != expected {
        return Err(Error::Stale {
            dir,
            found: manifest.config_hash.clone(),
            expected,
        });
    }
    for (key, sum) in &manifest.inputs {
        let now = sha256_file(&cfg.resolve(Path::new(key)))?;
        if &now != sum {
            return Err(Error::Stale {
                dir,
                found: format!("{key} {sum}"),
                expected: format!("{key} {now}"),
            });
        }
    }
    Ok(())
}

/// Runs the occlusion benchmark and the concept analyses, writing reports.
pub fn run_eval(cfg: &PipelineConfig, allow_stale: bool) -> Result<BenchmarkReport> {
    let dir = cfg.models_dir();
    let (models, settings, manifest) = load_models(&dir)?;
    match check_fresh(cfg, &manifest) {
        Err(e @ Error::Stale { .. }) if allow_stale => warn!("{e}"),
        other => other?,
    }
    let world: SyntheticWorld = read_json(&cfg.world_path())?;
    let plan = models.plan(settings.beta)?;
    let bench = BenchmarkConfig {
        n_scenes: cfg.eval.n_scenes,
        width: cfg.synth.width,
        height: cfg.synth.height,
        levels: cfg.eval.levels.clone(),
        object_scales: cfg.eval.object_scales.clone(),
        scales: settings.scales.clone(),
        detect: cfg.detect_params(0.0),
        seed: seed::subseed(cfg.seed, "eval"),
    };
    let report = occlusion_benchmark(&world, &models.bank, &plan, &settings.baseline, &bench)?;
    let reports = cfg.reports_dir();
    report.write(&reports)?;

    let data = load_dataset(cfg)?;
    let params = ConceptEvalParams {
        gamma_th: cfg.detect.gamma_th,
        nms_radius_px: cfg.detect.nms_radius,
        crop_side: Some(f64::from(data.annotations.patch_side)),
    };
    let single = evaluate_concept(&models.bank, &data.maps, &data.annotations, ConceptMode::Single, &params)?;
    let subset = evaluate_concept(
        &models.bank,
        &data.maps,
        &data.annotations,
        ConceptMode::Subset(cfg.eval.max_subset),
        &params,
    )?;
    let summary = serde_json::json!({
        "single": single,
        "subset": subset,
        "single_histogram": ap_histogram(single.iter().map(|c| c.ap), 10),
        "subset_histogram": ap_histogram(subset.iter().map(|c| c.ap), 10),
    });
    write_json(&reports.join("concepts.json"), &summary)?;
    Ok(report)
}

/// Detects parts on feature map files and writes JSON lines to `out`.
/// With `pyramid`, the maps are scales of one image.
pub fn run_detect<W: Write>(cfg: &PipelineConfig, inputs: &[PathBuf], pyramid: bool, mut out: W) -> Result<usize> {
    if inputs.is_empty() {
        return Err(Error::Argument("no feature maps given".into()));
    }
    let (models, settings, _) = load_models(&cfg.models_dir())?;
    let plan = models.plan(settings.beta)?;
    let params = cfg.detect_params(settings.threshold);
    let names = models.voters.part_names.clone();
    let id_of = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let maps = inputs.iter().map(read_feature_map).collect::<Result<Vec<_>>>()?;
    let mut n = 0;
    let stdout_err = |e: std::io::Error| Error::io("<output>", e);
    if pyramid {
        let dets = multi_scale_detect(&maps, &models, &plan, &params)?;
        write_detections_jsonl(&mut out, &id_of(&inputs[0]), &dets, &names).map_err(stdout_err)?;
        n += dets.len();
    } else {
        for (path, map) in inputs.iter().zip(&maps) {
            let dets = detect(map, &models, &plan, &params)?;
            write_detections_jsonl(&mut out, &id_of(path), &dets, &names).map_err(stdout_err)?;
            n += dets.len();
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Serialize)]
struct CodeRecord<'a> {
    image_id: &'a str,
    width: usize,
    height: usize,
    threshold: f64,
    /// Active concepts of each cell, in row-major cell order.
    active: Vec<Vec<usize>>,
}

/// Encodes the training maps with the learned concepts. Writes the
/// activation histogram and the sparse codes into the report directory.
pub fn run_encode(cfg: &PipelineConfig, threshold: Option<f64>) -> Result<ActivationReport> {
    let bank = ConceptBank::read(cfg.models_dir().join(BANK_FILE))?;
    let data = load_dataset(cfg)?;
    let t = threshold.unwrap_or(cfg.eval.encode_threshold);
    let thresholds: Vec<f64> = (0..=40).map(|i| f64::from(i) * 0.05).collect();
    let report = activation_histogram(&data.maps, &bank, &thresholds)?;
    let dir = cfg.reports_dir();
    create_dir(&dir)?;
    write_json(&dir.join("activation.json"), &report)?;
    let path = dir.join("codes.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for (map, im) in data.maps.iter().zip(&data.annotations.images) {
        let codes = encode_sparse(map, &bank, t)?;
        let rec = CodeRecord {
            image_id: &im.id,
            width: codes.width,
            height: codes.height,
            threshold: t,
            active: (0..codes.num_cells()).map(|c| codes.active(c).collect()).collect(),
        };
        serde_json::to_writer(&mut file, &rec).map_err(|e| Error::json(&path, e))?;
        file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    file.flush().map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Summary of the trained models, optionally with one (concept, part) pair in detail.
pub fn run_inspect(cfg: &PipelineConfig, pair: Option<(usize, usize)>) -> Result<serde_json::Value> {
    let (models, settings, manifest) = load_models(&cfg.models_dir())?;
    let bank = &models.bank;
    let mut v = serde_json::json!({
        "concepts": bank.len(),
        "dim": bank.dim(),
        "method": bank.method(),
        "k_init": bank.k_init(),
        "eta": bank.eta(),
        "merges": bank.merge_log(),
        "parts": models.voters.part_names,
        "voters": models.voters.voters,
        "detector": settings,
        "config_hash": manifest.config_hash,
    });
    if let Some((c, s)) = pair {
        if c >= bank.len() || s >= models.num_parts() {
            return Err(Error::Argument(format!(
                "pair ({c}, {s}) outside {} concepts and {} parts",
                bank.len(),
                models.num_parts()
            )));
        }
        let e = models.evidence.entry(c, s);
        v["pair"] = serde_json::json!({
            "concept": c,
            "part": s,
            "support": models.spatial.support(c, s).iter().map(|(o, fr)| (o.dx, o.dy, fr)).collect::<Vec<_>>(),
            "cutoff_bin": e.cutoff_bin,
            "median_plus": e.median_plus(),
            "lambda": e.lambda,
        });
    }
    Ok(v)
}
