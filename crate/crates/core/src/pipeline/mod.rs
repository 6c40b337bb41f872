//! End-to-end training and synthetic data generation.

pub mod config;
pub mod run;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{kmeans_fit, merge_by_db, vmf_fit, ConceptBank, DistanceField, Method, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::features::synth::SyntheticWorld;
use crate::features::{in_box, AnnotationSet, FeatureMap};
use crate::lattice::{LatticeSpec, VOTING_RADIUS_PX};
use crate::likelihood::{learn_evidence, select_voters, DEFAULT_BINS, DEFAULT_EPSILON, DEFAULT_VOTERS};
use crate::seed;
use crate::spatial::{collect_offsets, default_window, DEFAULT_SUPPORT_MASS};
use crate::sphere::VectorSet;
use crate::voting::{vote_field, Models, VotingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub method: Method,
    pub k: usize,
    pub eta: f64,
    /// Merge clusters until every Davies-Bouldin index is at most this.
    pub db_threshold: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    /// Cluster only vectors inside the bounding box of the part patches.
    pub crop_concepts: bool,
    pub search_radius_px: f64,
    pub support_mass: f64,
    pub bins: usize,
    pub epsilon: f64,
    pub k_voters: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            method: Method::Kmeans,
            k: 40,
            eta: DEFAULT_ETA,
            db_threshold: None,
            max_iters: 100,
            tol: 1e-9,
            crop_concepts: true,
            search_radius_px: VOTING_RADIUS_PX,
            support_mass: DEFAULT_SUPPORT_MASS,
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_EPSILON,
            k_voters: DEFAULT_VOTERS,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_voters == 0 || self.bins == 0 || self.max_iters == 0 {
            return Err(Error::Config("k, k_voters, bins and max_iters must be positive".into()));
        }
        if !(self.eta > 0.0) || !(self.epsilon > 0.0) || !(self.search_radius_px > 0.0) {
            return Err(Error::Config("eta, epsilon and the search radius must be positive".into()));
        }
        if !(self.support_mass > 0.0 && self.support_mass <= 1.0) {
            return Err(Error::Config(format!("support mass must lie in (0, 1], got {}", self.support_mass)));
        }
        if let Some(t) = self.db_threshold {
            if !(t > 0.0) {
                return Err(Error::Config(format!("Davies-Bouldin threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_vectors: usize,
    pub k_init: usize,
    pub num_concepts: usize,
    /// K-means cost or vMF free energy per iteration.
    pub trace: Vec<f64>,
    pub merges: usize,
}

/// Feature vectors used for clustering, in map and cell order.
pub fn concept_vectors(maps: &[FeatureMap], annotations: &AnnotationSet, crop: bool) -> Result<VectorSet> {
    let Some(first) = maps.first() else {
        return Err(Error::Argument("no training maps".into()));
    };
    let side = f64::from(annotations.patch_side);
    let mut out = VectorSet::with_dim(first.dim());
    for (map, ann) in maps.iter().zip(&annotations.images) {
        let bbox = if crop { ann.object_box(side) } else { None };
        let spec = map.spec();
        let tag = f64::from(map.scale_tag());
        for (i, cell) in spec.cells().enumerate() {
            let keep = match &bbox {
                Some(b) => {
                    let p = spec.map_up(cell)?;
                    let q = crate::lattice::PointL0::new(
                        (f64::from(p.x) / tag).round() as i32,
                        (f64::from(p.y) / tag).round() as i32,
                    );
                    in_box(q, b)
                }
                None => true,
            };
            if keep {
                out.push(map.vector(i))?;
            }
        }
    }
    Ok(out)
}

/// Learns concepts, spatial models, evidence and voters from annotated maps.
pub fn train(maps: &[FeatureMap], annotations: &AnnotationSet, params: &TrainParams) -> Result<(Models, TrainReport)> {
    params.validate()?;
    annotations.validate()?;
    if maps.len() != annotations.images.len() {
        return Err(Error::Argument(format!(
            "{} maps but {} annotated images",
            maps.len(),
            annotations.images.len()
        )));
    }
    let points = concept_vectors(maps, annotations, params.crop_concepts).map_err(|e| e.in_stage("concepts"))?;
    info!("clustering {} vectors into {} concepts", points.len(), params.k);
    let concept_seed = seed::subseed(params.seed, "concepts");
    let (bank, labels, trace) = match params.method {
        Method::Kmeans => {
            let fit = kmeans_fit(&points, params.k, concept_seed, params.max_iters).map_err(|e| e.in_stage("concepts"))?;
            let bank = ConceptBank::new(fit.bank.centers().clone(), params.eta, Method::Kmeans, params.k, Vec::new())?;
            (bank, fit.labels, fit.trace)
        }
        Method::Vmf => {
            let fit = vmf_fit(&points, params.k, params.eta, concept_seed, params.max_iters, params.tol)
                .map_err(|e| e.in_stage("concepts"))?;
            let labels = fit.assignment.hard_labels();
            (fit.bank, labels, fit.trace)
        }
    };
    let bank = match params.db_threshold {
        Some(t) => merge_by_db(&bank, &labels, &points, t).map_err(|e| e.in_stage("merge"))?.0,
        None => bank,
    };
    info!("{} concepts after merging", bank.len());

    let fields: Vec<DistanceField> = maps
        .par_iter()
        .map(|m| DistanceField::compute(m, &bank))
        .collect::<Result<_>>()?;
    let window = default_window(maps[0].spec());
    let samples = collect_offsets(maps, &fields, annotations, window, params.search_radius_px)
        .map_err(|e| e.in_stage("spatial"))?;
    let spatial = samples.model(params.support_mass).map_err(|e| e.in_stage("spatial"))?;
    let evidence = learn_evidence(maps, &fields, annotations, &spatial, Some(&samples), params.bins, params.epsilon)
        .map_err(|e| e.in_stage("evidence"))?;
    let names: Vec<String> = if annotations.parts.is_empty() {
        (0..annotations.num_parts()).map(|s| format!("part{s}")).collect()
    } else {
        annotations.parts.clone()
    };
    let voters = select_voters(&evidence, params.k_voters, &names).map_err(|e| e.in_stage("voters"))?;
    let report = TrainReport {
        n_vectors: points.len(),
        k_init: params.k,
        num_concepts: bank.len(),
        trace,
        merges: bank.merge_log().len(),
    };
    let models = Models {
        bank,
        spatial,
        evidence,
        voters,
    };
    models.validate()?;
    Ok((models, report))
}

/// Annotated maps rendered at unit scale.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub maps: Vec<FeatureMap>,
    pub annotations: AnnotationSet,
}

/// Unoccluded scenes with the object at its training size.
pub fn synth_dataset(world: &SyntheticWorld, width: u32, height: u32, n: usize, seed: u64) -> Result<Dataset> {
    let spec = LatticeSpec::new(width, height, world.stride, world.stride / 2)?;
    let scenes: Vec<(FeatureMap, crate::features::ImageAnnotation)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let scene_seed = seed::subseed(seed, &format!("train/scene/{i}"));
            let mut rng = seed::named_rng(scene_seed, "layout");
            let layout = world.sample_layout(&spec, 1.0, &mut rng)?;
            let map = world.render(&layout, 1.0, scene_seed)?.map;
            let ann = world.annotate(&layout, &format!("train-{i}"), &mut rng)?;
            Ok((map, ann))
        })
        .collect::<Result<_>>()?;
    let (maps, images): (Vec<_>, Vec<_>) = scenes.into_iter().unzip();
    Ok(Dataset {
        maps,
        annotations: world.annotation_set(images),
    })
}

/// Highest score any part reaches on object-free scenes at the given scales.
pub fn calibrate_threshold(
    world: &SyntheticWorld,
    bank: &ConceptBank,
    plan: &VotingPlan,
    width: u32,
    height: u32,
    n: usize,
    scales: &[f64],
    seed: u64,
) -> Result<f64> {
    let spec = LatticeSpec::new(width, height, world.stride, world.stride / 2)?;
    let jobs: Vec<(usize, f64)> = (0..n).flat_map(|i| scales.iter().map(move |&t| (i, t))).collect();
    let maxima = jobs
        .par_iter()
        .map(|&(i, t)| {
            let map = world.render_background(&spec, t, seed::subseed(seed, &format!("empty/{i}")))?;
            let field = DistanceField::compute(&map, bank)?;
            let mut m = 0.0f64;
            for s in 0..plan.parts.len() {
                let vf = vote_field(map.spec(), &field, plan, s)?;
                m = vf.scores.iter().fold(m, |a, &b| a.max(b));
            }
            Ok(m)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(maxima.into_iter().fold(0.0, f64::max))
}
