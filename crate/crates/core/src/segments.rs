//! Decision rule, connected-component segments and their adjacency.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::{Grid, LabelMask, ProbMap};
use crate::error::{Error, Result};

/// Pixel neighbourhood used to join pixels into components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

const N8: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &N4,
            Connectivity::Eight => &N8,
        }
    }
}

#[inline]
fn shifted(r: usize, c: usize, dr: isize, dc: isize, h: usize, w: usize) -> Option<(usize, usize)> {
    let nr = r as isize + dr;
    let nc = c as isize + dc;
    (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then(|| (nr as usize, nc as usize))
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn of(pixels: &[(usize, usize)]) -> Option<BBox> {
        let (&(r, c), rest) = pixels.split_first()?;
        Some(rest.iter().fold(BBox { r0: r, c0: c, r1: r, c1: c }, |b, &(r, c)| BBox {
            r0: b.r0.min(r),
            c0: b.c0.min(c),
            r1: b.r1.max(r),
            c1: b.c1.max(c),
        }))
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub class_id: i32,
    /// Row-major ordered.
    pub pixels: Vec<(usize, usize)>,
    pub boundary: Vec<(usize, usize)>,
    pub interior: Vec<(usize, usize)>,
    pub bbox: BBox,
}

impl Segment {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    /// `pixel_to_segment[z] = k(z)`.
    pub pixel_to_segment: Grid<i32>,
    /// Unordered adjacent pairs stored as `(min, max)`.
    pub adjacency: BTreeSet<(usize, usize)>,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn height(&self) -> usize {
        self.pixel_to_segment.height()
    }

    pub fn width(&self) -> usize {
        self.pixel_to_segment.width()
    }

    #[inline]
    pub fn segment_of(&self, row: usize, col: usize) -> usize {
        *self.pixel_to_segment.get(row, col) as usize
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency.contains(&(a.min(b), a.max(b)))
    }

    /// Rebuilds the full structure from a class mask and a dense segment id map.
    pub fn from_pixel_map(mask: &LabelMask, pixel_to_segment: Grid<i32>) -> Result<Self> {
        if mask.height() != pixel_to_segment.height() || mask.width() != pixel_to_segment.width() {
            return Err(Error::Shape("segment map does not match mask".into()));
        }
        let n = pixel_to_segment.as_slice().iter().map(|&k| k + 1).max().unwrap_or(0);
        if pixel_to_segment.as_slice().iter().any(|&k| k < 0) {
            return Err(Error::Validation("negative segment id".into()));
        }
        let mut classes = vec![None; n as usize];
        for (z, &k) in pixel_to_segment.as_slice().iter().enumerate() {
            let class = mask.as_slice()[z];
            match classes[k as usize] {
                None => classes[k as usize] = Some(class),
                Some(c) if c != class => {
                    return Err(Error::Validation(format!("segment {k} spans several classes")))
                }
                _ => {}
            }
        }
        if classes.iter().any(Option::is_none) {
            return Err(Error::Validation("segment ids are not dense".into()));
        }
        let classes: Vec<i32> = classes.into_iter().map(Option::unwrap).collect();
        Ok(assemble(pixel_to_segment, &classes))
    }
}

/// Per-pixel argmax with ties resolved towards the lowest class index.
/// Returns 1-based class ids.
pub fn argmax_mask(softmax: &ProbMap) -> Result<LabelMask> {
    if softmax.classes() < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", softmax.classes())));
    }
    let mut labels = Vec::with_capacity(softmax.pixels());
    for z in 0..softmax.pixels() {
        let row = softmax.row(z);
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::Numeric(format!("non-finite probability at pixel {z}")));
            }
            if p > row[best] {
                best = c;
            }
        }
        labels.push(best as i32 + 1);
    }
    Grid::from_vec(softmax.height(), softmax.width(), labels)
}

fn label_components<T: PartialEq>(
    grid: &Grid<T>,
    connectivity: Connectivity,
    include: impl Fn(&T) -> bool,
) -> (Grid<i32>, usize) {
    let (h, w) = (grid.height(), grid.width());
    let mut ids = Grid::filled(h, w, -1i32);
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if *ids.get(r, c) >= 0 || !include(grid.get(r, c)) {
                continue;
            }
            let value = grid.get(r, c);
            ids.set(r, c, next);
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                for &(dr, dc) in connectivity.offsets() {
                    if let Some((nr, nc)) = shifted(pr, pc, dr, dc, h, w) {
                        if *ids.get(nr, nc) < 0 && grid.get(nr, nc) == value {
                            ids.set(nr, nc, next);
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            next += 1;
        }
    }
    (ids, next as usize)
}

fn assemble(pixel_to_segment: Grid<i32>, classes: &[i32]) -> SegmentSet {
    let (h, w) = (pixel_to_segment.height(), pixel_to_segment.width());
    let n = classes.len();
    let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut boundary: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut interior: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut adjacency = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let k = *pixel_to_segment.get(r, c) as usize;
            pixels[k].push((r, c));
            let mut on_boundary = false;
            for &(dr, dc) in &N8 {
                match shifted(r, c, dr, dc, h, w) {
                    None => on_boundary = true,
                    Some((nr, nc)) => {
                        let other = *pixel_to_segment.get(nr, nc) as usize;
                        if other != k {
                            on_boundary = true;
                            adjacency.insert((k.min(other), k.max(other)));
                        }
                    }
                }
            }
            if on_boundary {
                boundary[k].push((r, c));
            } else {
                interior[k].push((r, c));
            }
        }
    }
    let segments = pixels
        .into_iter()
        .zip(boundary)
        .zip(interior)
        .enumerate()
        .map(|(id, ((pixels, boundary), interior))| Segment {
            id,
            class_id: classes[id],
            bbox: BBox::of(&pixels).expect("segments are non-empty"),
            pixels,
            boundary,
            interior,
        })
        .collect();
    SegmentSet { segments, pixel_to_segment, adjacency }
}

/// Maximal same-class components of `mask` with boundary/interior split.
///
/// A pixel is on the boundary when at least one of its 8 neighbours lies
/// outside the segment; positions beyond the image border count as outside.
pub fn connected_components(mask: &LabelMask, connectivity: Connectivity) -> SegmentSet {
    let (ids, n) = label_components(mask, connectivity, |_| true);
    let mut classes = vec![0; n];
    for (z, &k) in ids.as_slice().iter().enumerate() {
        classes[k as usize] = mask.as_slice()[z];
    }
    assemble(ids, &classes)
}

/// A connected group of pixels, e.g. a suspicious object made of anomalous segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelObject {
    pub id: usize,
    #[serde(skip)]
    pub pixels: Vec<(usize, usize)>,
    pub member_segments: Vec<usize>,
    pub bbox: BBox,
    pub source_image: String,
}

impl PixelObject {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Components of the 1-region of a binary mask, dropping those below `min_pixels`.
pub fn merge_components(
    binary: &Grid<u8>,
    min_pixels: usize,
    connectivity: Connectivity,
) -> Vec<PixelObject> {
    let (ids, n) = label_components(binary, connectivity, |&v| v != 0);
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for r in 0..binary.height() {
        for c in 0..binary.width() {
            let k = *ids.get(r, c);
            if k >= 0 {
                groups[k as usize].push((r, c));
            }
        }
    }
    groups
        .into_iter()
        .filter(|g| g.len() >= min_pixels)
        .enumerate()
        .map(|(id, pixels)| PixelObject {
            id,
            bbox: BBox::of(&pixels).expect("non-empty component"),
            pixels,
            member_segments: Vec::new(),
            source_image: String::new(),
        })
        .collect()
}
