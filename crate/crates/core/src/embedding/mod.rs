//! Patch descriptors and their reduction to a 2-D embedding.

mod patches;
mod pca;
mod tsne;

pub use patches::{extract_patches, fallback_features, image_pixels, patch_image, FeatureMatrix, Patch, DEFAULT_MIN_PATCH, FALLBACK_DIM};
pub use pca::{pca, Pca};
pub use tsne::{
    effective_learning_rate, joint_probabilities, kl_divergence, kl_gradient, tsne, tsne_with_trace, Embedding2D, TsneParams,
};
