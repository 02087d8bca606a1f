//! Procedural stand-ins for the real data, generator and embedders: a
//! raster face world with detectors and frozen embedders, and Gaussian
//! mixtures with exact noise predictors.

pub mod detect;
pub mod mixture;
pub mod scene;

pub use detect::{
    attribute_axis, detect_attributes, detect_batch, detect_graph, embed_image, embed_image_batch,
    embed_image_graph, embed_text, neutral_score, region_statistics, EMBED_DIM, NUM_ATTRIBUTES,
};
pub use mixture::{AnalyticModel, GaussianMixture};
pub use scene::{
    render_clean, render_scene, sample_dataset, sample_scene, visual_generator,
    visual_generator_batch, AttributeId, AttributePriors, AttributeSet, Dataset, Scene, IMAGE_SIZE,
};
