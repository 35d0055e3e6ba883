use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::grid::{LabelMask, ProbMap, RgbImage, IGNORE_LABEL};
use super::ppm::read_ppm;
use super::tensor::read_tensor;

/// Allowed deviation of a softmax row sum from 1 (f32 export rounding).
pub const SOFTMAX_SUM_TOLERANCE: f64 = 1e-4;

/// Directory layout of a dataset root:
///
/// ```text
/// <root>/images/<id>.ppm
/// <root>/softmax/<id>.owt
/// <root>/gt/<id>.owt        (optional)
/// <root>/features/<object>.owt  (optional, external patch descriptors)
/// ```
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn softmax_path(&self, id: &str) -> PathBuf {
        self.root.join("softmax").join(format!("{id}.owt"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join("gt").join(format!("{id}.owt"))
    }

    pub fn feature_path(&self, object_id: &str) -> PathBuf {
        self.root.join("features").join(format!("{object_id}.owt"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

/// One image with the segmentation network's softmax and optional ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub softmax: ProbMap,
    pub gt: Option<LabelMask>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: RgbImage,
        softmax: ProbMap,
        gt: Option<LabelMask>,
    ) -> Result<Self> {
        let sample = Sample { id: id.into(), image, softmax, gt };
        sample.validate()?;
        Ok(sample)
    }

    pub fn height(&self) -> usize {
        self.softmax.height()
    }

    pub fn width(&self) -> usize {
        self.softmax.width()
    }

    pub fn classes(&self) -> usize {
        self.softmax.classes()
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = (self.softmax.height(), self.softmax.width());
        if self.image.height() != h || self.image.width() != w {
            return Err(Error::Shape(format!(
                "{}: image is {}x{} but softmax is {}x{}",
                self.id,
                self.image.height(),
                self.image.width(),
                h,
                w
            )));
        }
        for z in 0..self.softmax.pixels() {
            let row = self.softmax.row(z);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Validation(format!(
                    "{}: invalid probability at pixel {z}",
                    self.id
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SOFTMAX_SUM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "{}: softmax row {z} sums to {sum}",
                    self.id
                )));
            }
        }
        if let Some(gt) = &self.gt {
            if gt.height() != h || gt.width() != w {
                return Err(Error::Shape(format!("{}: ground truth is {}x{}", self.id, gt.height(), gt.width())));
            }
            if let Some(bad) = gt.as_slice().iter().find(|&&v| v != IGNORE_LABEL && v < 1) {
                return Err(Error::Validation(format!("{}: ground truth label {bad}", self.id)));
            }
        }
        Ok(())
    }
}

/// Loads `<root>/{images,softmax,gt}/<id>` and validates the result.
pub fn load_sample(root: impl AsRef<Path>, id: &str) -> Result<Sample> {
    let layout = DatasetLayout::new(root.as_ref());
    let softmax_path = layout.softmax_path(id);
    if !softmax_path.exists() {
        return Err(Error::NotFound(softmax_path));
    }
    let softmax = ProbMap::from_tensor(&read_tensor(&softmax_path)?)?;
    let image = read_ppm(layout.image_path(id))?;
    let gt_path = layout.gt_path(id);
    let gt = if gt_path.exists() {
        Some(LabelMask::from_tensor(&read_tensor(&gt_path)?)?)
    } else {
        None
    };
    Sample::new(id, image, softmax, gt)
}
