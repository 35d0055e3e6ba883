//! Confusion counts and class-wise IoU, precision and recall.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, IGNORE_LABEL};
use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions; class `c` lives at index `c - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn get(&self, gt: i32, pred: i32) -> u64 {
        self.counts[(gt as usize - 1) * self.n_classes + pred as usize - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n_classes, other.n_classes, "confusion matrices differ in size");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }
}

fn check_label(v: i32, n_classes: usize, allow_ignore: bool) -> Result<()> {
    if (allow_ignore && v == IGNORE_LABEL) || (1..=n_classes as i32).contains(&v) {
        Ok(())
    } else {
        Err(Error::Validation(format!("label {v} outside 1..={n_classes}")))
    }
}

/// Accumulates pixel counts over aligned prediction / ground-truth pairs,
/// skipping ignore pixels of the ground truth.
pub fn confusion(preds: &[&LabelMask], gts: &[&LabelMask], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (p, g) in preds.iter().zip(gts) {
        if p.height() != g.height() || p.width() != g.width() {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        for (&pv, &gv) in p.as_slice().iter().zip(g.as_slice()) {
            check_label(gv, n_classes, true)?;
            if gv == IGNORE_LABEL {
                continue;
            }
            check_label(pv, n_classes, false)?;
            cm.counts[(gv as usize - 1) * n_classes + pv as usize - 1] += 1;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: i32,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScore> {
    let k = cm.n_classes;
    (0..k)
        .map(|c| {
            let tp = cm.counts[c * k + c];
            let fp: u64 = (0..k).filter(|&r| r != c).map(|r| cm.counts[r * k + c]).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.counts[c * k + p]).sum();
            ClassScore {
                class_id: c as i32 + 1,
                iou: ratio(tp, tp + fp + fn_),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub classes: Vec<ClassScore>,
    pub known_ids: Vec<i32>,
    pub novel_ids: Vec<i32>,
    pub miou_known: f64,
    pub miou_all: f64,
}

fn mean_iou(scores: &[ClassScore], ids: &[i32]) -> f64 {
    let vals: Vec<f64> = ids
        .iter()
        .filter_map(|id| scores.iter().find(|s| s.class_id == *id).map(|s| s.iou))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Unweighted means over the known ids and over known plus novel ids.
pub fn summarize(scores: &[ClassScore], known_ids: &[i32], novel_ids: &[i32]) -> Summary {
    let all: Vec<i32> = known_ids.iter().chain(novel_ids).copied().collect();
    let mut classes = scores.to_vec();
    classes.sort_by_key(|s| s.class_id);
    Summary {
        miou_known: mean_iou(scores, known_ids),
        miou_all: mean_iou(scores, &all),
        classes,
        known_ids: known_ids.to_vec(),
        novel_ids: novel_ids.to_vec(),
    }
}

impl Summary {
    pub fn novel_iou(&self) -> f64 {
        mean_iou(&self.classes, &self.novel_ids)
    }

    /// Per-class rows in id order, then the two means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,precision,recall\n");
        for s in &self.classes {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", s.class_id, s.iou, s.precision, s.recall));
        }
        out.push_str(&format!("mean_C,{:.6},,\n", self.miou_known));
        out.push_str(&format!("mean_C_plus,{:.6},,\n", self.miou_all));
        out
    }
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
