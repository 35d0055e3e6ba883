//! Numeric containers, the OWT1 tensor file format, PPM images and the
//! dataset directory layout.

mod grid;
mod manifest;
mod ppm;
mod sample;
mod tensor;

pub use grid::{Grid, LabelMask, ProbMap, QualityMap, RgbImage, IGNORE_LABEL};
pub use manifest::{DatasetManifest, MANIFEST_VERSION};
pub use ppm::{read_ppm, write_ppm};
pub use sample::{load_sample, DatasetLayout, Sample, SOFTMAX_SUM_TOLERANCE};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TensorData};
