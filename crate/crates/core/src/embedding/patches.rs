use serde::{Deserialize, Serialize};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::segments::{BBox, PixelObject};
use crate::anomaly::object_key;

pub const DEFAULT_MIN_PATCH: usize = 64;
/// Length of the built-in colour histogram descriptor (8 x 8 x 8 bins).
pub const FALLBACK_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub object_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub width: usize,
    pub height: usize,
}

/// Tight bounding-box crops of objects; objects whose box is smaller than
/// `min_patch` in either dimension are skipped.
pub fn extract_patches(image: &RgbImage, objects: &[PixelObject], min_patch: usize) -> Vec<Patch> {
    objects
        .iter()
        .filter_map(|o| {
            let bbox = BBox {
                r0: o.bbox.r0.min(image.height() - 1),
                c0: o.bbox.c0.min(image.width() - 1),
                r1: o.bbox.r1.min(image.height() - 1),
                c1: o.bbox.c1.min(image.width() - 1),
            };
            (bbox.height() >= min_patch && bbox.width() >= min_patch).then(|| Patch {
                object_id: object_key(&o.source_image, o.id),
                image_id: o.source_image.clone(),
                bbox,
                width: bbox.width(),
                height: bbox.height(),
            })
        })
        .collect()
}

pub fn patch_image(image: &RgbImage, patch: &Patch) -> RgbImage {
    image.crop_inclusive(patch.bbox.r0, patch.bbox.c0, patch.bbox.r1, patch.bbox.c1)
}

/// L1-normalized 8x8x8 joint RGB histogram.
pub fn fallback_features(pixels: &[[u8; 3]]) -> Result<Vec<f64>> {
    if pixels.is_empty() {
        return Err(Error::Precondition("cannot describe an empty patch".into()));
    }
    let mut hist = vec![0.0; FALLBACK_DIM];
    for &[r, g, b] in pixels {
        hist[(r as usize >> 5) * 64 + (g as usize >> 5) * 8 + (b as usize >> 5)] += 1.0;
    }
    let n = pixels.len() as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    Ok(hist)
}

pub fn image_pixels(img: &RgbImage) -> Vec<[u8; 3]> {
    img.as_slice().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Equal-length descriptors, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub patch_refs: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, patch_refs: Vec<String>) -> Result<Self> {
        if rows.len() != patch_refs.len() {
            return Err(Error::Shape("one reference per feature row required".into()));
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::Shape("feature rows differ in length".into()));
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { rows, patch_refs })
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
