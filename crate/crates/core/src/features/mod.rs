//! Feature maps, annotations and the synthetic scene generator.

pub mod annotation;
pub mod map;
pub mod synth;

pub use annotation::{in_box, AnnotationSet, ImageAnnotation, PartPoint};
pub use map::{read_feature_map, sample_vectors, write_feature_map, FeatureMap};
