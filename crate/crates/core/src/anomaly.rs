//! Anomaly mask from segment quality scores, suspicious-object merging and
//! the filtering heuristics applied before embedding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{Grid, QualityMap};
use crate::error::{Error, Result};
use crate::segments::{merge_components, BBox, Connectivity, PixelObject, SegmentSet};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_MIN_OBJECT_PIXELS: usize = 50;
pub const DEFAULT_MIN_SEGMENT_PIXELS: usize = 500;

/// Broadcasts segment scores to pixels.
pub fn quality_map(segs: &SegmentSet, scores: &[f64]) -> Result<QualityMap> {
    if scores.len() != segs.len() {
        return Err(Error::Schema(format!("{} scores for {} segments", scores.len(), segs.len())));
    }
    Ok(segs.pixel_to_segment.map(|&k| scores[k as usize]))
}

/// `a_z = 1` iff `s(k(z)) < tau` (strict).
pub fn anomaly_mask(segs: &SegmentSet, scores: &[f64], tau: f64) -> Result<Grid<u8>> {
    if scores.len() != segs.len() {
        return Err(Error::Schema(format!("{} scores for {} segments", scores.len(), segs.len())));
    }
    Ok(segs.pixel_to_segment.map(|&k| u8::from(scores[k as usize] < tau)))
}

/// Connected components of the anomaly mask annotated with the segments they consist of.
pub fn suspicious_objects(
    mask: &Grid<u8>,
    segs: &SegmentSet,
    min_pixels: usize,
    image_id: &str,
) -> Vec<PixelObject> {
    let mut objects = merge_components(mask, min_pixels, Connectivity::Eight);
    for obj in &mut objects {
        let members: BTreeSet<usize> = obj.pixels.iter().map(|&(r, c)| segs.segment_of(r, c)).collect();
        obj.member_segments = members.into_iter().collect();
        obj.source_image = image_id.to_string();
    }
    objects
}

/// Drops objects that consist of exactly one segment once segments smaller
/// than `min_segment_pixels` are disregarded.
pub fn single_segment_filter(
    objects: Vec<PixelObject>,
    segs: &SegmentSet,
    min_segment_pixels: usize,
) -> Vec<PixelObject> {
    objects
        .into_iter()
        .filter(|o| {
            let large = o
                .member_segments
                .iter()
                .filter(|&&k| segs.segments[k].size() >= min_segment_pixels)
                .count();
            large != 1
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageRejection {
    pub mean_floor: f64,
    pub frac_ceiling: f64,
    pub pixel_floor: f64,
}

impl Default for ImageRejection {
    fn default() -> Self {
        ImageRejection { mean_floor: 0.7, frac_ceiling: 1.0 / 3.0, pixel_floor: 0.9 }
    }
}

impl ImageRejection {
    /// True when the image is rated as badly predicted overall.
    pub fn rejects(&self, qmap: &QualityMap) -> bool {
        let n = qmap.len() as f64;
        let low = qmap.as_slice().iter().filter(|&&q| q < self.pixel_floor).count() as f64;
        qmap.mean() < self.mean_floor || low / n > self.frac_ceiling
    }
}

pub fn image_rejection(qmap: &QualityMap, thresholds: &ImageRejection) -> bool {
    thresholds.rejects(qmap)
}

/// JSON checkpoint record of a suspicious object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    /// Object number within its image.
    pub index: usize,
    pub image: String,
    pub bbox: BBox,
    pub pixel_count: usize,
    pub member_segments: Vec<usize>,
}

impl ObjectRecord {
    pub fn from_object(obj: &PixelObject) -> Self {
        ObjectRecord {
            id: object_key(&obj.source_image, obj.id),
            index: obj.id,
            image: obj.source_image.clone(),
            bbox: obj.bbox,
            pixel_count: obj.size(),
            member_segments: obj.member_segments.clone(),
        }
    }

    /// Rebuilds the pixel list from the segment structure of the source image.
    pub fn to_object(&self, segs: &SegmentSet) -> PixelObject {
        let mut pixels: Vec<(usize, usize)> = self
            .member_segments
            .iter()
            .flat_map(|&k| segs.segments[k].pixels.iter().copied())
            .collect();
        pixels.sort_unstable();
        PixelObject {
            id: self.index,
            pixels,
            member_segments: self.member_segments.clone(),
            bbox: self.bbox,
            source_image: self.image.clone(),
        }
    }
}

pub fn object_key(image: &str, index: usize) -> String {
    format!("{image}_o{index:03}")
}
