//! Matching, average precision, concept analyses and the occlusion benchmark.

pub mod ap;
pub mod benchmark;
pub mod concept;

pub use ap::{average_precision, box_iou, evaluate_detections, match_iou, match_keypoint, Matcher, PrCurve, PrPoint};
pub use benchmark::{
    benchmark_scenes, occlusion_benchmark, select_baseline, BenchmarkConfig, BenchmarkReport, BenchmarkRow, MeanAp,
    Method, ScaleMode, TestScene,
};
pub use concept::{ap_histogram, concept_firings, evaluate_concept, part_subsets, ConceptEvalParams, ConceptMode, ConceptScore};
