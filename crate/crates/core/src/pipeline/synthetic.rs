//! Built-in synthetic open-world scenario: images of coloured shapes with
//! the softmax output of a simulated segmentation network that knows
//! background, rectangles and disks but has never seen the novel shapes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_ppm, write_tensor, DatasetManifest, DatasetLayout, Grid, LabelMask, ProbMap, RgbImage, MANIFEST_VERSION};
use crate::error::{Error, Result};

pub const KNOWN_CLASSES: [&str; 3] = ["background", "rectangle", "disk"];
const BACKGROUND: i32 = 1;
const RECTANGLE: i32 = 2;
const DISK: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NovelShape {
    Diamond,
    Triangle,
}

impl NovelShape {
    pub fn name(self) -> &'static str {
        match self {
            NovelShape::Diamond => "diamond",
            NovelShape::Triangle => "triangle",
        }
    }

    fn colour(self) -> [f64; 3] {
        match self {
            NovelShape::Diamond => [215.0, 200.0, 45.0],
            NovelShape::Triangle => [190.0, 70.0, 190.0],
        }
    }
}

fn known_colour(class: i32) -> [f64; 3] {
    match class {
        BACKGROUND => [95.0, 115.0, 90.0],
        RECTANGLE => [185.0, 55.0, 50.0],
        _ => [55.0, 70.0, 185.0],
    }
}

/// Generator knobs. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub novel_shapes: Vec<NovelShape>,
    /// Probability that an image contains a novel object.
    pub novel_prob: f64,
    pub novel_radius: (usize, usize),
    pub rect_count: (usize, usize),
    pub rect_size: (usize, usize),
    pub disk_count: (usize, usize),
    pub disk_radius: (usize, usize),
    /// Top probability on the interior of known objects.
    pub known_confidence: f64,
    /// Top probability range on the one-pixel band around class borders.
    pub boundary_confidence: (f64, f64),
    /// Top probability range on novel objects.
    pub novel_confidence: (f64, f64),
    /// Number of differently predicted pieces a novel object is split into.
    pub fragments: (usize, usize),
    /// Chance that a known object is predicted poorly, half of it as the wrong class.
    pub hard_known_prob: f64,
    pub pixel_noise: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n_train: 60,
            n_test: 40,
            height: 96,
            width: 96,
            novel_shapes: vec![NovelShape::Diamond],
            novel_prob: 0.65,
            novel_radius: (10, 15),
            rect_count: (1, 3),
            rect_size: (12, 26),
            disk_count: (1, 2),
            disk_radius: (6, 12),
            known_confidence: 0.99,
            boundary_confidence: (0.86, 0.94),
            novel_confidence: (0.42, 0.55),
            fragments: (3, 5),
            hard_known_prob: 0.05,
            pixel_noise: 18.0,
        }
    }
}

impl ScenarioSpec {
    /// Novel objects too small to ever yield a patch of `min_patch` pixels.
    pub fn negative_control() -> Self {
        ScenarioSpec { novel_radius: (3, 5), hard_known_prob: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.novel_shapes.is_empty() {
            return Err(Error::Config("the scenario needs at least one novel class".into()));
        }
        let mut shapes = self.novel_shapes.clone();
        shapes.dedup();
        if shapes.len() != self.novel_shapes.len() {
            return Err(Error::Config("novel shapes must be distinct".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("the scenario needs training images".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("images must be at least 32x32".into()));
        }
        let ranges = [self.novel_radius, self.rect_count, self.rect_size, self.disk_count, self.disk_radius, self.fragments];
        if ranges.iter().any(|&(lo, hi)| lo > hi) || self.fragments.0 == 0 {
            return Err(Error::Config("invalid integer range".into()));
        }
        let probs = [self.known_confidence, self.boundary_confidence.0, self.boundary_confidence.1, self.novel_confidence.0, self.novel_confidence.1];
        if probs.iter().any(|p| !(0.34..1.0).contains(p)) || self.boundary_confidence.0 > self.boundary_confidence.1 || self.novel_confidence.0 > self.novel_confidence.1 {
            return Err(Error::Config("confidences must lie in [0.34, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.novel_prob) || !(0.0..=1.0).contains(&self.hard_known_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One generated image with its simulated network output and ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub image: RgbImage,
    pub softmax: ProbMap,
    pub gt: LabelMask,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { r0: i64, c0: i64, h: i64, w: i64 },
    Disk { r: i64, c: i64, radius: i64 },
    Diamond { r: i64, c: i64, radius: i64 },
    /// Apex at `(r0, c)`, widening by one pixel per row on each side.
    Triangle { r0: i64, c: i64, h: i64 },
}

impl Shape {
    fn contains(&self, r: i64, c: i64) -> bool {
        match *self {
            Shape::Rect { r0, c0, h, w } => r >= r0 && r < r0 + h && c >= c0 && c < c0 + w,
            Shape::Disk { r: cr, c: cc, radius } => (r - cr).pow(2) + (c - cc).pow(2) <= radius * radius,
            Shape::Diamond { r: cr, c: cc, radius } => (r - cr).abs() + (c - cc).abs() <= radius,
            Shape::Triangle { r0, c: cc, h } => {
                let dr = r - r0;
                (0..h).contains(&dr) && (c - cc).abs() <= dr
            }
        }
    }

    /// Inclusive bounding box (r0, c0, r1, c1).
    fn bounds(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Rect { r0, c0, h, w } => (r0, c0, r0 + h - 1, c0 + w - 1),
            Shape::Disk { r, c, radius } | Shape::Diamond { r, c, radius } => (r - radius, c - radius, r + radius, c + radius),
            Shape::Triangle { r0, c, h } => (r0, c - (h - 1), r0 + h - 1, c + (h - 1)),
        }
    }

    fn centre(&self) -> (f64, f64) {
        let (r0, c0, r1, c1) = self.bounds();
        ((r0 + r1) as f64 / 2.0, (c0 + c1) as f64 / 2.0)
    }
}

struct Placed {
    shape: Shape,
    /// Ground-truth class id.
    class: i32,
    colour: [f64; 3],
    hard: bool,
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

fn pick(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

/// Tries to place `make(rng)` inside the image, at least `margin` pixels
/// away from already placed shapes.
fn place(
    rng: &mut ChaCha8Rng,
    occupied: &Grid<bool>,
    margin: i64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Shape,
) -> Option<Shape> {
    let (h, w) = (occupied.height() as i64, occupied.width() as i64);
    'attempt: for _ in 0..60 {
        let shape = make(rng);
        let (r0, c0, r1, c1) = shape.bounds();
        if r0 < 0 || c0 < 0 || r1 >= h || c1 >= w {
            continue;
        }
        for r in (r0 - margin).max(0)..=(r1 + margin).min(h - 1) {
            for c in (c0 - margin).max(0)..=(c1 + margin).min(w - 1) {
                if *occupied.get(r as usize, c as usize) {
                    continue 'attempt;
                }
            }
        }
        return Some(shape);
    }
    None
}

fn mark(occupied: &mut Grid<bool>, shape: &Shape) {
    let (r0, c0, r1, c1) = shape.bounds();
    for r in r0..=r1 {
        for c in c0..=c1 {
            occupied.set(r as usize, c as usize, true);
        }
    }
}

fn layout_objects(spec: &ScenarioSpec, n_known: i32, rng: &mut ChaCha8Rng) -> Vec<Placed> {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut occupied = Grid::filled(spec.height, spec.width, false);
    let mut placed = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3]| base.map(|v| v + rng.gen_range(-12.0..=12.0));

    if rng.gen_bool(spec.novel_prob) {
        let idx = rng.gen_range(0..spec.novel_shapes.len());
        let kind = spec.novel_shapes[idx];
        let shape = place(rng, &occupied, 3, |rng| {
            let radius = pick(rng, spec.novel_radius) as i64;
            match kind {
                NovelShape::Diamond => Shape::Diamond { r: rng.gen_range(0..h), c: rng.gen_range(0..w), radius },
                NovelShape::Triangle => Shape::Triangle { r0: rng.gen_range(0..h), c: rng.gen_range(0..w), h: 2 * radius },
            }
        });
        if let Some(shape) = shape {
            mark(&mut occupied, &shape);
            let colour = jitter(rng, kind.colour());
            placed.push(Placed { shape, class: n_known + 1 + idx as i32, colour, hard: false });
        }
    }
    let n_rect = pick(rng, spec.rect_count);
    let n_disk = pick(rng, spec.disk_count);
    for i in 0..n_rect + n_disk {
        let class = if i < n_rect { RECTANGLE } else { DISK };
        let shape = place(rng, &occupied, 3, |rng| {
            if class == RECTANGLE {
                Shape::Rect {
                    r0: rng.gen_range(0..h),
                    c0: rng.gen_range(0..w),
                    h: pick(rng, spec.rect_size) as i64,
                    w: pick(rng, spec.rect_size) as i64,
                }
            } else {
                Shape::Disk { r: rng.gen_range(0..h), c: rng.gen_range(0..w), radius: pick(rng, spec.disk_radius) as i64 }
            }
        });
        if let Some(shape) = shape {
            mark(&mut occupied, &shape);
            let colour = jitter(rng, known_colour(class));
            let hard = rng.gen_bool(spec.hard_known_prob);
            placed.push(Placed { shape, class, colour, hard });
        }
    }
    placed
}

/// Writes probabilities for one pixel: `top` on `first`, most of the rest on
/// `second` (share drawn from `second_share`), the remainder spread evenly.
fn fill_row(row: &mut [f64], first: usize, top: f64, second: usize, second_share: f64) {
    let c = row.len();
    let rest = 1.0 - top;
    row.iter_mut().for_each(|v| *v = 0.0);
    row[first] = top;
    if c == 2 {
        row[second] += rest;
        return;
    }
    row[second] = rest * second_share;
    let spread = rest * (1.0 - second_share) / (c - 2) as f64;
    for (k, v) in row.iter_mut().enumerate() {
        if k != first && k != second {
            *v = spread;
        }
    }
}

/// Generates one sample; `index` selects an independent random stream.
pub fn generate_sample(spec: &ScenarioSpec, seed: u64, index: u64, id: &str) -> Result<SyntheticSample> {
    spec.validate()?;
    let n_known = KNOWN_CLASSES.len() as i32;
    let classes = KNOWN_CLASSES.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (spec.height, spec.width);
    let objects = layout_objects(spec, n_known, &mut rng);

    let mut gt = Grid::filled(h, w, BACKGROUND);
    let mut owner: Grid<i32> = Grid::filled(h, w, -1);
    for (i, o) in objects.iter().enumerate() {
        let (r0, c0, r1, c1) = o.shape.bounds();
        for r in r0..=r1 {
            for c in c0..=c1 {
                if o.shape.contains(r, c) {
                    gt.set(r as usize, c as usize, o.class);
                    owner.set(r as usize, c as usize, i as i32);
                }
            }
        }
    }

    let background = known_colour(BACKGROUND);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let base = match *owner.get(r, c) {
                -1 => background,
                i => objects[i as usize].colour,
            };
            for v in base {
                let noisy = v + rng.gen_range(-spec.pixel_noise..=spec.pixel_noise);
                pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let image = RgbImage::from_vec(h, w, pixels)?;

    // fragment seeds and predicted classes of novel objects; split lines of hard objects
    let mut fragments: Vec<Vec<((i64, i64), usize)>> = Vec::with_capacity(objects.len());
    let mut split: Vec<(f64, f64)> = Vec::with_capacity(objects.len());
    for o in &objects {
        let mut seeds = Vec::new();
        if o.class > n_known {
            let (r0, c0, r1, c1) = o.shape.bounds();
            let inside: Vec<(i64, i64)> =
                (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).filter(|&(r, c)| o.shape.contains(r, c)).collect();
            let n = pick(&mut rng, spec.fragments);
            let offset = rng.gen_range(0..2);
            for k in 0..n {
                let p = inside[rng.gen_range(0..inside.len())];
                // alternate between the two object classes
                seeds.push((p, (RECTANGLE as usize - 1) + (k + offset) % 2));
            }
        }
        fragments.push(seeds);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        split.push((angle.cos(), angle.sin()));
    }

    let mut probs = vec![0.0; h * w * classes];
    for r in 0..h {
        for c in 0..w {
            let z = r * w + c;
            let row = &mut probs[z * classes..(z + 1) * classes];
            let label = *gt.get(r, c);
            let own = *owner.get(r, c);
            if label > n_known {
                let seeds = &fragments[own as usize];
                let &(_, class) = seeds
                    .iter()
                    .min_by_key(|((sr, sc), _)| (sr - r as i64).pow(2) + (sc - c as i64).pow(2))
                    .expect("novel object has fragments");
                let other = if class == RECTANGLE as usize - 1 { DISK as usize - 1 } else { RECTANGLE as usize - 1 };
                let top = uniform(&mut rng, spec.novel_confidence);
                let share = rng.gen_range(0.55..0.8);
                fill_row(row, class, top, other, share);
                continue;
            }
            let true_idx = (label - 1) as usize;
            if own >= 0 && objects[own as usize].hard {
                let o = &objects[own as usize];
                let (cr, cc) = o.shape.centre();
                let (dx, dy) = split[own as usize];
                let wrong = if label == RECTANGLE { DISK as usize - 1 } else { RECTANGLE as usize - 1 };
                let top = rng.gen_range(0.45..0.6);
                let share = rng.gen_range(0.7..0.95);
                if (r as f64 - cr) * dx + (c as f64 - cc) * dy >= 0.0 {
                    fill_row(row, true_idx, top, wrong, share);
                } else {
                    fill_row(row, wrong, top, true_idx, share);
                }
                continue;
            }
            // neighbouring class across a border, if any
            let mut across = None;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let l = *gt.get(rr as usize, cc as usize);
                    if l != label && across.is_none() {
                        across = Some(l);
                    }
                }
            }
            let (top, second) = match across {
                Some(l) => {
                    let second = if (1..=n_known).contains(&l) { (l - 1) as usize } else { (true_idx + 1) % classes };
                    (uniform(&mut rng, spec.boundary_confidence), second)
                }
                None => {
                    let jitter = (1.0 - spec.known_confidence) * 0.5;
                    let top = (spec.known_confidence + rng.gen_range(-jitter..=jitter)).min(1.0 - 1e-6);
                    (top, (true_idx + rng.gen_range(1..classes)) % classes)
                }
            };
            let share = rng.gen_range(0.7..0.95);
            fill_row(row, true_idx, top, second, share);
        }
    }
    // store-and-reload precision: the files hold f32
    let probs: Vec<f64> = probs.into_iter().map(|p| p as f32 as f64).collect();
    Ok(SyntheticSample {
        id: id.to_string(),
        image,
        softmax: ProbMap::from_vec(h, w, classes, probs)?,
        gt,
    })
}

pub fn sample_ids(spec: &ScenarioSpec) -> (Vec<String>, Vec<String>) {
    (
        (0..spec.n_train).map(|i| format!("train_{i:03}")).collect(),
        (0..spec.n_test).map(|i| format!("test_{i:03}")).collect(),
    )
}

/// Writes a complete dataset (images, softmax, ground truth, manifest) to `root`.
pub fn gen_synthetic(spec: &ScenarioSpec, seed: u64, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let layout = DatasetLayout::new(root);
    let (train, test) = sample_ids(spec);
    let all: Vec<&String> = train.iter().chain(&test).collect();
    all.par_iter().enumerate().try_for_each(|(i, id)| -> Result<()> {
        let s = generate_sample(spec, seed, i as u64, id)?;
        write_ppm(&s.image, layout.image_path(id))?;
        write_tensor(&s.softmax.to_tensor_f32(), layout.softmax_path(id))?;
        write_tensor(&s.gt.to_tensor(), layout.gt_path(id))?;
        Ok(())
    })?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        source_model: "synthetic-oracle".into(),
        classes: KNOWN_CLASSES.iter().map(|s| s.to_string()).collect(),
        novel_classes: spec.novel_shapes.iter().map(|s| s.name().to_string()).collect(),
        train,
        test,
        feature_extractor: None,
        feature_dim: None,
        generator: Some(serde_json::json!({ "seed": seed, "spec": spec })),
    };
    manifest.write(layout.manifest_path())?;
    Ok(manifest)
}
