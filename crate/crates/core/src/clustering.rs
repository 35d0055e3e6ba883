//! DBSCAN over the 2-D embedding and the rules that turn clusters into
//! novel-class candidates.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Core,
    Border,
    Noise,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Core => "core",
            Role::Border => "border",
            Role::Noise => "noise",
        }
    }
}

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct DbscanResult {
    /// Cluster id per point, [`NOISE`] for noise.
    pub labels: Vec<i32>,
    pub roles: Vec<Role>,
    pub epsilon: f64,
    pub n_min: usize,
}

impl DbscanResult {
    pub fn n_clusters(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Indices of the core points belonging to `cluster`.
    pub fn core_members(&self, cluster: i32) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == cluster && self.roles[i] == Role::Core)
            .collect()
    }
}

#[inline]
fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// DBSCAN with closed, self-inclusive `epsilon` balls.
///
/// Points are visited in index order; a border point joins the first cluster
/// that reaches it.
pub fn dbscan(points: &[[f64; 2]], epsilon: f64, n_min: usize) -> DbscanResult {
    let n = points.len();
    let eps2 = epsilon * epsilon;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| dist2(&points[i], &points[j]) <= eps2).collect())
        .collect();
    let is_core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= n_min).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if labels[seed] != NOISE || !is_core[seed] {
            continue;
        }
        labels[seed] = next;
        queue.push_back(seed);
        while let Some(q) = queue.pop_front() {
            for &r in &neighbours[q] {
                if labels[r] == NOISE {
                    labels[r] = next;
                    if is_core[r] {
                        queue.push_back(r);
                    }
                }
            }
        }
        next += 1;
    }
    let roles = (0..n)
        .map(|i| match (is_core[i], labels[i] != NOISE) {
            (true, _) => Role::Core,
            (false, true) => Role::Border,
            (false, false) => Role::Noise,
        })
        .collect();
    DbscanResult { labels, roles, epsilon, n_min }
}

/// Clusters ordered by descending core count (ties: lower id first). Returns
/// every cluster with at least `min_core_points` core points, and at least
/// the largest one whenever a cluster exists.
pub fn select_novel_clusters(result: &DbscanResult, min_core_points: usize) -> Vec<i32> {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for (l, r) in result.labels.iter().zip(&result.roles) {
        if *l >= 0 && *r == Role::Core {
            *counts.entry(*l).or_default() += 1;
        }
    }
    let mut ranked: Vec<(i32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .iter()
        .enumerate()
        .filter(|&(rank, &(_, count))| rank == 0 || count >= min_core_points)
        .map(|(_, &(id, _))| id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnownRejection {
    pub radius: f64,
    pub min_neighbors: usize,
    pub majority: f64,
}

impl Default for KnownRejection {
    fn default() -> Self {
        KnownRejection { radius: 2.75, min_neighbors: 10, majority: 0.8 }
    }
}

/// Keep-mask over `points`: a point is rejected when its closed `radius`
/// ball holds at least `min_neighbors` known points whose most frequent
/// class has a share of at least `majority`.
pub fn reject_known(points: &[[f64; 2]], known: &[([f64; 2], i32)], rule: &KnownRejection) -> Vec<bool> {
    let r2 = rule.radius * rule.radius;
    points
        .iter()
        .map(|p| {
            let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
            for (q, class) in known {
                if dist2(p, q) <= r2 {
                    *counts.entry(*class).or_default() += 1;
                }
            }
            let total: usize = counts.values().sum();
            let top = counts.values().copied().max().unwrap_or(0);
            let reject = total >= rule.min_neighbors && top as f64 >= rule.majority * total as f64;
            !reject
        })
        .collect()
}
