//! Pseudo ground truth for discovered classes, related-class statistics and
//! the choice of replayed training images.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::segments::SegmentSet;

/// Segments of one image assigned to a novel class id.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelAssignment {
    pub class_id: i32,
    pub member_segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub image_id: String,
    pub pseudo_label: LabelMask,
    pub novel_pixel_count: BTreeMap<i32, usize>,
}

/// Pixels of assigned segments get their novel id; every other pixel keeps
/// the predicted class, or becomes ignore when `ignore_known` is set.
///
/// Returns `None` when nothing novel was found in the image, in which case
/// the image is not part of the retraining data.
pub fn pseudo_label(
    image_id: &str,
    mask: &LabelMask,
    segs: &SegmentSet,
    novel: &[NovelAssignment],
    ignore_known: bool,
) -> Result<Option<PseudoSample>> {
    if mask.height() != segs.height() || mask.width() != segs.width() {
        return Err(Error::Shape("mask and segments differ in size".into()));
    }
    let mut segment_class: Vec<Option<i32>> = vec![None; segs.len()];
    for a in novel {
        for &k in &a.member_segments {
            let slot = segment_class
                .get_mut(k)
                .ok_or_else(|| Error::Precondition(format!("segment {k} not in image {image_id}")))?;
            if slot.is_none() {
                *slot = Some(a.class_id);
            }
        }
    }
    if segment_class.iter().all(Option::is_none) {
        return Ok(None);
    }
    let mut counts = BTreeMap::new();
    let labels = mask
        .as_slice()
        .iter()
        .zip(segs.pixel_to_segment.as_slice())
        .map(|(&m, &k)| match segment_class[k as usize] {
            Some(c) => {
                *counts.entry(c).or_insert(0) += 1;
                c
            }
            None if ignore_known => IGNORE_LABEL,
            None => m,
        })
        .collect();
    Ok(Some(PseudoSample {
        image_id: image_id.to_string(),
        pseudo_label: LabelMask::from_vec(mask.height(), mask.width(), labels)?,
        novel_pixel_count: counts,
    }))
}

/// For each novel id: how often each initial class was predicted on its pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelatedClassHistogram {
    pub counts: BTreeMap<i32, BTreeMap<i32, u64>>,
}

impl RelatedClassHistogram {
    /// Up to `m` most frequent initial classes over all novel ids (ties: lower id).
    pub fn top_related(&self, m: usize) -> Vec<i32> {
        let mut total: BTreeMap<i32, u64> = BTreeMap::new();
        for per_class in self.counts.values() {
            for (&c, &n) in per_class {
                *total.entry(c).or_default() += n;
            }
        }
        let mut ranked: Vec<(i32, u64)> = total.into_iter().filter(|&(_, n)| n > 0).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(m).map(|(c, _)| c).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().flat_map(|m| m.values()).sum()
    }
}

/// Counts pixels with `pseudo == novel id` by the initial prediction there.
pub fn related_class_histogram(samples: &[PseudoSample], masks: &[&LabelMask]) -> Result<RelatedClassHistogram> {
    if samples.len() != masks.len() {
        return Err(Error::Shape("one prediction mask per pseudo sample required".into()));
    }
    let mut hist = RelatedClassHistogram::default();
    for (s, m) in samples.iter().zip(masks) {
        if s.pseudo_label.len() != m.len() {
            return Err(Error::Shape(format!("{}: mask size differs", s.image_id)));
        }
        for (&y, &pred) in s.pseudo_label.as_slice().iter().zip(m.as_slice()) {
            if s.novel_pixel_count.contains_key(&y) {
                *hist.counts.entry(y).or_default().entry(pred).or_default() += 1;
            }
        }
    }
    Ok(hist)
}

/// Image id -> classes present in its (known-class) ground truth.
pub type TrainIndex = BTreeMap<String, BTreeSet<i32>>;

#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalSelection {
    pub ids: Vec<String>,
    pub warnings: Vec<String>,
}

/// Draws `n` images such that each quota class appears in at least
/// `ceil(share * n)` of them where the corpus allows it; the rest is uniform.
pub fn select_rehearsal(
    index: &TrainIndex,
    quotas: &BTreeMap<i32, f64>,
    n: usize,
    seed: u64,
) -> Result<RehearsalSelection> {
    if n == 0 {
        return Err(Error::Config("rehearsal size must be >= 1".into()));
    }
    let mut warnings = Vec::new();
    if n >= index.len() {
        if n > index.len() {
            warnings.push(format!("requested {n} rehearsal images, corpus has {}", index.len()));
        }
        warnings.iter().for_each(|w| warn!("{w}"));
        return Ok(RehearsalSelection { ids: index.keys().cloned().collect(), warnings });
    }
    let mut order: Vec<&String> = index.keys().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<String> = Vec::with_capacity(n);
    let mut taken = BTreeSet::new();
    for (&class, &share) in quotas {
        let need = ((share * n as f64) - 1e-9).ceil().max(0.0) as usize;
        let mut have = chosen.iter().filter(|id| index[*id].contains(&class)).count();
        for id in &order {
            if have >= need || chosen.len() == n {
                break;
            }
            if !taken.contains(*id) && index[*id].contains(&class) {
                taken.insert((*id).clone());
                chosen.push((*id).clone());
                have += 1;
            }
        }
        if have < need {
            warnings.push(format!("quota for class {class} not met: {have} of {need} images"));
        }
    }
    for id in &order {
        if chosen.len() == n {
            break;
        }
        if taken.insert((*id).clone()) {
            chosen.push((*id).clone());
        }
    }
    warnings.iter().for_each(|w| warn!("{w}"));
    Ok(RehearsalSelection { ids: chosen, warnings })
}

/// How quota classes are derived from the pseudo-labelled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RehearsalPolicy {
    /// Number of most frequently co-predicted classes treated as related.
    pub top_related: usize,
    pub related_share: f64,
    pub rare_share: f64,
    /// A known class is rare when it occurs in fewer than this fraction of
    /// the pseudo-labelled images.
    pub rare_threshold: f64,
    /// Explicit per-class shares; override derived ones.
    pub explicit: BTreeMap<i32, f64>,
}

impl Default for RehearsalPolicy {
    fn default() -> Self {
        RehearsalPolicy {
            top_related: 3,
            related_share: 0.3,
            rare_share: 0.25,
            rare_threshold: 0.1,
            explicit: BTreeMap::new(),
        }
    }
}

impl RehearsalPolicy {
    pub fn quotas(
        &self,
        histogram: &RelatedClassHistogram,
        pseudo: &[PseudoSample],
        known_classes: &[i32],
    ) -> BTreeMap<i32, f64> {
        let mut quotas = BTreeMap::new();
        if !pseudo.is_empty() {
            for &c in known_classes {
                let present = pseudo.iter().filter(|s| s.pseudo_label.as_slice().contains(&c)).count();
                if (present as f64) < self.rare_threshold * pseudo.len() as f64 {
                    quotas.insert(c, self.rare_share);
                }
            }
        }
        for c in histogram.top_related(self.top_related) {
            let e = quotas.entry(c).or_insert(0.0);
            *e = f64::max(*e, self.related_share);
        }
        quotas.extend(self.explicit.iter().map(|(&c, &s)| (c, s)));
        quotas
    }
}

/// JSON description of the retraining data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainManifest {
    pub novel_ids: Vec<i32>,
    pub pseudo_images: Vec<String>,
    pub rehearsal_images: Vec<String>,
    pub quotas: BTreeMap<i32, f64>,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segments::{connected_components, Connectivity};

    fn setup() -> (LabelMask, SegmentSet) {
        let m = LabelMask::from_vec(2, 4, vec![1, 1, 2, 2, 1, 1, 3, 3]).unwrap();
        let s = connected_components(&m, Connectivity::Four);
        (m, s)
    }

    #[test]
    fn pseudo_label_marks_member_segments_only() {
        let (m, s) = setup();
        let a = NovelAssignment { class_id: 4, member_segments: vec![1] };
        let p = pseudo_label("x", &m, &s, &[a], false).unwrap().unwrap();
        assert_eq!(p.pseudo_label.as_slice(), &[1, 1, 4, 4, 1, 1, 3, 3]);
        assert_eq!(p.novel_pixel_count[&4], 2);
    }

    #[test]
    fn ignore_known_mode() {
        let (m, s) = setup();
        let a = NovelAssignment { class_id: 4, member_segments: vec![1, 2] };
        let p = pseudo_label("x", &m, &s, &[a], true).unwrap().unwrap();
        assert!(p.pseudo_label.as_slice().iter().all(|&v| v == -1 || v == 4));
    }

    #[test]
    fn nothing_novel_is_not_included() {
        let (m, s) = setup();
        assert!(pseudo_label("x", &m, &s, &[], false).unwrap().is_none());
    }

    #[test]
    fn histogram_counts() {
        let mask = LabelMask::from_vec(1, 100, [vec![5; 60], vec![6; 40]].concat()).unwrap();
        let p = PseudoSample {
            image_id: "a".into(),
            pseudo_label: LabelMask::filled(1, 100, 8),
            novel_pixel_count: BTreeMap::from([(8, 100)]),
        };
        let h = related_class_histogram(&[p], &[&mask]).unwrap();
        assert_eq!(h.counts[&8], BTreeMap::from([(5, 60), (6, 40)]));
        assert_eq!(h.total(), 100);
        assert_eq!(h.top_related(1), vec![5]);
        assert_eq!(related_class_histogram(&[], &[]).unwrap().total(), 0);
    }

    fn index() -> TrainIndex {
        (0..30)
            .map(|i| {
                let mut classes = BTreeSet::from([1]);
                if i % 5 == 0 {
                    classes.insert(7); // 6 "truck" images
                }
                (format!("img{i:02}"), classes)
            })
            .collect()
    }

    #[test]
    fn quota_is_met() {
        let idx = index();
        let sel = select_rehearsal(&idx, &BTreeMap::from([(7, 0.5)]), 10, 3).unwrap();
        assert_eq!(sel.ids.len(), 10);
        assert!(sel.ids.iter().filter(|id| idx[*id].contains(&7)).count() >= 5);
        assert!(sel.warnings.is_empty());
        let unique: BTreeSet<_> = sel.ids.iter().collect();
        assert_eq!(unique.len(), 10);
        assert_eq!(sel, select_rehearsal(&idx, &BTreeMap::from([(7, 0.5)]), 10, 3).unwrap());
    }

    #[test]
    fn infeasible_quota_warns() {
        let sel = select_rehearsal(&index(), &BTreeMap::from([(7, 0.9)]), 10, 3).unwrap();
        assert_eq!(sel.ids.len(), 10);
        assert_eq!(sel.warnings.len(), 1);
    }

    #[test]
    fn oversized_request_returns_corpus() {
        let sel = select_rehearsal(&index(), &BTreeMap::new(), 100, 0).unwrap();
        assert_eq!(sel.ids.len(), 30);
        assert_eq!(sel.warnings.len(), 1);
        let sel = select_rehearsal(&index(), &BTreeMap::new(), 12, 0).unwrap();
        assert_eq!(sel.ids.len(), 12);
    }
}
