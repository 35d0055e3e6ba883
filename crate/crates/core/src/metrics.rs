//! Pixel-wise dispersion measures and the per-segment metric table used
//! as input to the meta regressor.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Grid, LabelMask, ProbMap, Tensor, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::segments::{connected_components, Connectivity, Segment, SegmentSet};

/// Entropy, probability margin and variation ratio, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionMaps {
    pub entropy: Grid<f64>,
    pub margin: Grid<f64>,
    pub variation: Grid<f64>,
}

impl DispersionMaps {
    fn all(&self) -> [&Grid<f64>; 3] {
        [&self.entropy, &self.margin, &self.variation]
    }
}

/// Normalized entropy `-(1/ln C) sum p ln p` of one probability row.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (h / (row.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Largest and second largest entries of a row (the second taken over the
/// remaining classes after removing the argmax).
pub fn top_two(row: &[f64]) -> (f64, f64) {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = c;
        }
    }
    let second = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != best)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    (row[best], second)
}

pub fn pixel_dispersions(softmax: &ProbMap) -> Result<DispersionMaps> {
    if softmax.classes() < 2 {
        return Err(Error::Config(format!(
            "dispersion measures need at least 2 classes, got {}",
            softmax.classes()
        )));
    }
    let n = softmax.pixels();
    let (mut e, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for z in 0..n {
        let row = softmax.row(z);
        let (p1, p2) = top_two(row);
        e.push(normalized_entropy(row));
        m.push((1.0 - p1 + p2).clamp(0.0, 1.0));
        v.push((1.0 - p1).clamp(0.0, 1.0));
    }
    let (h, w) = (softmax.height(), softmax.width());
    Ok(DispersionMaps {
        entropy: Grid::from_vec(h, w, e)?,
        margin: Grid::from_vec(h, w, m)?,
        variation: Grid::from_vec(h, w, v)?,
    })
}

/// Names of the class independent columns, in table order.
pub const BASE_FEATURES: [&str; 32] = [
    "S", "S_in", "S_bd", "S_rel", "S_in_rel",
    "E_mean", "E_in_mean", "E_bd_mean",
    "M_mean", "M_in_mean", "M_bd_mean",
    "V_mean", "V_in_mean", "V_bd_mean",
    "E_rel", "E_in_rel", "M_rel", "M_in_rel", "V_rel", "V_in_rel",
    "E_var", "E_in_var", "E_bd_var",
    "M_var", "M_in_var", "M_bd_var",
    "V_var", "V_in_var", "V_bd_var",
    "class", "center_row", "center_col",
];

pub fn feature_names(classes: usize) -> Vec<String> {
    let mut names: Vec<String> = BASE_FEATURES.iter().map(|s| s.to_string()).collect();
    names.extend((1..=classes).map(|c| format!("softmax_mean_{c}")));
    names.extend((1..=classes).map(|c| format!("neighbour_ratio_{c}")));
    names
}

/// Per-segment feature rows, optionally with IoU targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub image_ids: Vec<String>,
    pub segment_ids: Vec<usize>,
    pub feature_names: Vec<String>,
    rows: Vec<f64>,
    pub iou_targets: Option<Vec<f64>>,
}

impl MetricTable {
    pub fn new(
        image_ids: Vec<String>,
        segment_ids: Vec<usize>,
        feature_names: Vec<String>,
        rows: Vec<f64>,
        iou_targets: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = segment_ids.len();
        if image_ids.len() != n || rows.len() != n * feature_names.len() {
            return Err(Error::Shape("metric table dimensions disagree".into()));
        }
        if iou_targets.as_ref().is_some_and(|t| t.len() != n) {
            return Err(Error::Shape("target count differs from row count".into()));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("metric table contains non-finite values".into()));
        }
        Ok(MetricTable { image_ids, segment_ids, feature_names, rows, iou_targets })
    }

    pub fn empty(feature_names: Vec<String>) -> Self {
        MetricTable {
            image_ids: Vec::new(),
            segment_ids: Vec::new(),
            feature_names,
            rows: Vec::new(),
            iou_targets: None,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        &self.rows[i * f..(i + 1) * f]
    }

    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    pub fn with_targets(mut self, targets: Vec<f64>) -> Result<Self> {
        if targets.len() != self.n_rows() {
            return Err(Error::Shape("target count differs from row count".into()));
        }
        self.iou_targets = Some(targets);
        Ok(self)
    }

    /// The given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> MetricTable {
        MetricTable {
            image_ids: rows.iter().map(|&i| self.image_ids[i].clone()).collect(),
            segment_ids: rows.iter().map(|&i| self.segment_ids[i]).collect(),
            feature_names: self.feature_names.clone(),
            rows: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            iou_targets: self.iou_targets.as_ref().map(|t| rows.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Appends the rows of `other`; targets are kept only if both tables have them.
    pub fn extend(&mut self, other: MetricTable) -> Result<()> {
        if other.feature_names != self.feature_names {
            return Err(Error::Schema("cannot concatenate tables with different features".into()));
        }
        let had_rows = self.n_rows() > 0;
        self.iou_targets = match (self.iou_targets.take(), other.iou_targets) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, Some(b)) if !had_rows => Some(b),
            _ => None,
        };
        self.image_ids.extend(other.image_ids);
        self.segment_ids.extend(other.segment_ids);
        self.rows.extend(other.rows);
        Ok(())
    }

    /// (n_rows x n_features) f64 matrix.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.n_rows().max(1), self.n_features()], if self.n_rows() == 0 {
            vec![0.0; self.n_features()]
        } else {
            self.rows.clone()
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,segment");
        for name in &self.feature_names {
            out.push(',');
            out.push_str(name);
        }
        if self.iou_targets.is_some() {
            out.push_str(",iou");
        }
        out.push('\n');
        for i in 0..self.n_rows() {
            write!(out, "{},{}", self.image_ids[i], self.segment_ids[i]).unwrap();
            for v in self.row(i) {
                write!(out, ",{v}").unwrap();
            }
            if let Some(t) = &self.iou_targets {
                write!(out, ",{}", t[i]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty metric csv".into()))?
            .split(',')
            .collect();
        if header.len() < 2 || header[0] != "image" || header[1] != "segment" {
            return Err(Error::Format("metric csv header must start with image,segment".into()));
        }
        let has_iou = header.last() == Some(&"iou");
        let n_feat = header.len() - 2 - usize::from(has_iou);
        let names: Vec<String> = header[2..2 + n_feat].iter().map(|s| s.to_string()).collect();
        let (mut images, mut segs, mut rows, mut targets) = (vec![], vec![], vec![], vec![]);
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(Error::Format("ragged metric csv row".into()));
            }
            images.push(fields[0].to_string());
            segs.push(fields[1].parse().map_err(|_| Error::Format("bad segment id".into()))?);
            for f in &fields[2..2 + n_feat] {
                rows.push(num(f)?);
            }
            if has_iou {
                targets.push(num(fields[header.len() - 1])?);
            }
        }
        MetricTable::new(images, segs, names, rows, has_iou.then_some(targets))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    sum: f64,
}

fn mean_and_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut m = Moments::default();
    for v in values.clone() {
        m.n += 1;
        m.sum += v;
    }
    if m.n == 0 {
        return (0.0, 0.0);
    }
    let mean = m.sum / m.n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.n as f64;
    (mean, var)
}

/// Pixels of the 1-pixel 8-dilation ring around `seg` (excluding `seg`).
fn neighbourhood(seg: &Segment, segs: &SegmentSet, stamp: &mut Grid<u32>, tag: u32) -> Vec<(usize, usize)> {
    let (h, w) = (segs.height(), segs.width());
    let mut ring = Vec::new();
    for &(r, c) in &seg.boundary {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if segs.segment_of(nr, nc) != seg.id && *stamp.get(nr, nc) != tag {
                    stamp.set(nr, nc, tag);
                    ring.push((nr, nc));
                }
            }
        }
    }
    ring
}

/// One row of metrics per segment, in segment id order.
pub fn segment_metrics(
    segs: &SegmentSet,
    maps: &DispersionMaps,
    softmax: &ProbMap,
    image_id: &str,
) -> Result<MetricTable> {
    let classes = softmax.classes();
    if softmax.height() != segs.height() || softmax.width() != segs.width() {
        return Err(Error::Shape("segments and softmax differ in size".into()));
    }
    let names = feature_names(classes);
    let mut rows = Vec::with_capacity(segs.len() * names.len());
    let mut stamp = Grid::filled(segs.height(), segs.width(), u32::MAX);
    let mask_class = |r: usize, c: usize| segs.segments[segs.segment_of(r, c)].class_id;

    for seg in &segs.segments {
        let s = seg.pixels.len() as f64;
        let s_in = seg.interior.len() as f64;
        let s_bd = seg.boundary.len() as f64;
        let s_rel = s / s_bd;
        let s_in_rel = s_in / s_bd;
        rows.extend_from_slice(&[s, s_in, s_bd, s_rel, s_in_rel]);

        let mut means = [[0.0; 3]; 3];
        let mut vars = [[0.0; 3]; 3];
        for (d, map) in maps.all().into_iter().enumerate() {
            for (a, domain) in [&seg.pixels, &seg.interior, &seg.boundary].into_iter().enumerate() {
                let (mean, var) = mean_and_var(domain.iter().map(|&(r, c)| *map.get(r, c)));
                means[d][a] = mean;
                vars[d][a] = var;
            }
        }
        for m in &means {
            rows.extend_from_slice(m);
        }
        for m in &means {
            rows.push(m[0] * s);
            rows.push(m[1] * s_in_rel);
        }
        for v in &vars {
            rows.extend_from_slice(v);
        }

        rows.push(seg.class_id as f64);
        rows.push(seg.pixels.iter().map(|p| p.0 as f64).sum::<f64>() / s);
        rows.push(seg.pixels.iter().map(|p| p.1 as f64).sum::<f64>() / s);

        let mut class_mean = vec![0.0; classes];
        for &(r, c) in &seg.pixels {
            for (acc, p) in class_mean.iter_mut().zip(softmax.at(r, c)) {
                *acc += p;
            }
        }
        rows.extend(class_mean.iter().map(|m| m / s));

        let ring = neighbourhood(seg, segs, &mut stamp, seg.id as u32);
        let mut ratio = vec![0.0; classes];
        for &(r, c) in &ring {
            let k = mask_class(r, c);
            if k >= 1 && (k as usize) <= classes {
                ratio[k as usize - 1] += 1.0;
            }
        }
        if !ring.is_empty() {
            ratio.iter_mut().for_each(|x| *x /= ring.len() as f64);
        }
        rows.extend(ratio);
    }
    MetricTable::new(
        vec![image_id.to_string(); segs.len()],
        (0..segs.len()).collect(),
        names,
        rows,
        None,
    )
}

/// Localized segment IoU against ground truth.
///
/// For a segment `k` of class `c` the reference region is the union of all
/// class-`c` ground-truth components that intersect `k`. Ignore pixels are
/// excluded from both intersection and union.
pub fn segment_iou_targets(segs: &SegmentSet, gt: &LabelMask) -> Result<Vec<f64>> {
    if gt.height() != segs.height() || gt.width() != segs.width() {
        return Err(Error::Precondition("ground truth not aligned with segments".into()));
    }
    let gt_segs = connected_components(gt, Connectivity::Eight);
    let mut targets = Vec::with_capacity(segs.len());
    let mut seen = vec![usize::MAX; gt_segs.len()];
    for seg in &segs.segments {
        let mut intersection = 0usize;
        let mut outside_valid = 0usize;
        let mut reference = 0usize;
        for &(r, c) in &seg.pixels {
            let label = *gt.get(r, c);
            if label == seg.class_id {
                intersection += 1;
                let g = gt_segs.segment_of(r, c);
                if seen[g] != seg.id {
                    seen[g] = seg.id;
                    reference += gt_segs.segments[g].size();
                }
            } else if label != IGNORE_LABEL {
                outside_valid += 1;
            }
        }
        let union = reference + outside_valid;
        targets.push(if intersection == 0 || union == 0 {
            0.0
        } else {
            intersection as f64 / union as f64
        });
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segments::argmax_mask;
    use approx::assert_abs_diff_eq;

    fn single(p: &[f64]) -> DispersionMaps {
        pixel_dispersions(&ProbMap::from_vec(1, 1, p.len(), p.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn dispersion_examples() {
        let d = single(&[0.75, 0.25]);
        // -(0.75 ln 0.75 + 0.25 ln 0.25) / ln 2
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
        assert_abs_diff_eq!(*d.entropy.get(0, 0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(*d.entropy.get(0, 0), 0.811278, epsilon = 1e-6);
        let d = single(&[0.5, 0.3, 0.2]);
        assert_abs_diff_eq!(*d.margin.get(0, 0), 0.8, epsilon = 1e-12);
        let d = single(&[0.25; 4]);
        assert_abs_diff_eq!(*d.variation.get(0, 0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(*d.entropy.get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(*d.margin.get(0, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn one_class_is_config_error() {
        let p = ProbMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(pixel_dispersions(&p), Err(Error::Config(_))));
    }

    #[test]
    fn whole_image_segment_sizes() {
        let p = ProbMap::from_vec(2, 2, 2, [0.9, 0.1].repeat(4)).unwrap();
        let mask = argmax_mask(&p).unwrap();
        let segs = connected_components(&mask, Connectivity::Eight);
        let maps = pixel_dispersions(&p).unwrap();
        let t = segment_metrics(&segs, &maps, &p, "x").unwrap();
        assert_eq!(t.n_features(), 32 + 4);
        let row = t.row(0);
        assert_eq!(&row[..5], &[4.0, 0.0, 4.0, 1.0, 0.0]);
        // constant maps: all three means equal (interior empty -> 0), variances 0
        assert_abs_diff_eq!(row[8], 0.2, epsilon = 1e-12);
        assert_eq!(row[9], 0.0);
        assert_abs_diff_eq!(row[10], 0.2, epsilon = 1e-12);
        assert!(row[20..29].iter().all(|&v| v.abs() < 1e-15));
        // single segment: empty neighbourhood
        assert_eq!(&row[34..36], &[0.0, 0.0]);
    }

    #[test]
    fn iou_examples() {
        // 10 px segment of class 1 in row 0..10; gt class 1 component of 12 px
        // overlapping 8 of them.
        let mut pred = vec![2; 2 * 12];
        pred[..10].fill(1);
        let mut gt = vec![2; 2 * 12];
        gt[2..12].fill(1);
        gt[12] = 1;
        gt[13] = 1;
        let pred = Grid::from_vec(2, 12, pred).unwrap();
        let gt = Grid::from_vec(2, 12, gt).unwrap();
        let segs = connected_components(&pred, Connectivity::Eight);
        let t = segment_iou_targets(&segs, &gt).unwrap();
        // brute force set arithmetic
        let k: Vec<usize> = (0..10).collect();
        let g: Vec<usize> = (2..14).collect();
        let inter = k.iter().filter(|z| g.contains(z)).count();
        let uni = k.len() + g.len() - inter;
        assert_eq!((inter, uni), (8, 14));
        assert_abs_diff_eq!(t[0], 8.0 / 14.0, epsilon = 1e-12);

        let same = segment_iou_targets(&segs, &pred).unwrap();
        assert!(same.iter().all(|&v| v == 1.0));
        let other = Grid::filled(2, 12, 3);
        assert!(segment_iou_targets(&segs, &other).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_roundtrip() {
        let p = ProbMap::from_vec(2, 3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7, 0.5, 0.5, 0.1, 0.9]).unwrap();
        let segs = connected_components(&argmax_mask(&p).unwrap(), Connectivity::Eight);
        let t = segment_metrics(&segs, &pixel_dispersions(&p).unwrap(), &p, "img")
            .unwrap()
            .with_targets(vec![0.5; segs.len()])
            .unwrap();
        assert_eq!(MetricTable::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn feature_count_band() {
        // 32 + 2|C|: 18 and 19 classes fall inside the 67..=75 band of the reference setup
        assert_eq!(feature_names(18).len(), 68);
        assert_eq!(feature_names(19).len(), 70);
    }
}
