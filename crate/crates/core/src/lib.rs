//! Open-world novelty discovery for semantic segmentation: segment-wise
//! quality estimation, anomaly objects, embedding and clustering, pseudo
//! labelling and class-incremental extension of a small segmentation model.

pub mod anomaly;
pub mod clustering;
pub mod data;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gbt;
pub mod metrics;
pub mod pipeline;
pub mod pseudo;
pub mod segments;
pub mod trainer;

pub use error::{Error, Result};
