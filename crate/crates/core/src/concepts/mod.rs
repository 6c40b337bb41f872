//! Visual concepts: clusters of feature vectors on the unit sphere.

pub mod bank;
pub mod encode;
pub mod kmeans;
pub mod vmf;

pub use bank::{ConceptBank, MergeStep, Method, DEFAULT_DB_THRESHOLD, DEFAULT_ETA, DEFAULT_K, K_PRESETS};
pub use encode::{activation_histogram, encode_sparse, ActivationReport, ActivationRow, DistanceField, SparseCodes};
pub use kmeans::{davies_bouldin, kmeans_cost, kmeans_fit, kmeans_from, merge_by_db, KMeansFit};
pub use vmf::{free_energy, mixture_cost, vmf_e_step, vmf_fit, vmf_m_step, SoftAssignment, VmfFit};
