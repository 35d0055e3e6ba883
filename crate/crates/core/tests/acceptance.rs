//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any of them fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use novelseg_core::anomaly::{anomaly_mask, single_segment_filter, suspicious_objects, ImageRejection};
use novelseg_core::clustering::{dbscan, reject_known, KnownRejection, Role};
use novelseg_core::data::{Grid, LabelMask, ProbMap, QualityMap};
use novelseg_core::embedding::{joint_probabilities, kl_divergence, kl_gradient, tsne_with_trace, TsneParams};
use novelseg_core::gbt::{fit_gbt_with_trace, predict_quality, GbtParams};
use novelseg_core::metrics::{pixel_dispersions, segment_metrics, MetricTable};
use novelseg_core::pipeline::{gen_synthetic, run_pipeline, PipelineConfig, RunOptions, RunOutcome, ScenarioSpec};
use novelseg_core::segments::{argmax_mask, connected_components, Connectivity};
use novelseg_core::trainer::{
    batch_loss, batch_loss_and_grad, class_weights, distill_loss, weighted_ce, BatchItem, Decoder, FeatureMap,
};

const SEEDS: [u64; 5] = [14, 123, 666, 375, 693];

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn dispersion_correctness() -> Check {
    // (probabilities, E, M, V) with E written out from its definition
    let h = |p: &[f64]| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / (p.len() as f64).ln();
    let cases: Vec<(Vec<f64>, f64, f64, f64)> = vec![
        (vec![0.25; 4], 1.0, 1.0, 0.75),
        (vec![1.0, 0.0, 0.0], 0.0, 0.0, 0.0),
        (vec![0.75, 0.25], 0.811_278_124_459_132_8, 0.5, 0.25),
        (vec![0.5, 0.3, 0.2], 0.937_230_563_216_129_5, 0.8, 0.5),
    ];
    for (p, e, m, v) in &cases {
        ensure((h(p) - e).abs() <= 1e-12, format!("reference entropy of {p:?}"))?;
        let map = ProbMap::from_vec(1, 1, p.len(), p.clone()).map_err(|e| e.to_string())?;
        let d = pixel_dispersions(&map).map_err(|e| e.to_string())?;
        let got = (*d.entropy.get(0, 0), *d.margin.get(0, 0), *d.variation.get(0, 0));
        ensure(
            (got.0 - e).abs() <= 1e-12 && (got.1 - m).abs() <= 1e-12 && (got.2 - v).abs() <= 1e-12,
            format!("{p:?}: got {got:?}, want ({e}, {m}, {v})"),
        )?;
    }
    Ok(format!("{} hand inputs", cases.len()))
}

/// Union-find segment labelling ordered by first raster pixel.
fn naive_segments(labels: &[i32], h: usize, w: usize) -> Vec<i32> {
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < h as i64 && nc >= 0 && nc < w as i64 {
                    let (a, b) = (r * w + c, nr as usize * w + nc as usize);
                    if labels[a] == labels[b] {
                        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
    }
    let mut ids = BTreeMap::new();
    (0..h * w)
        .map(|z| {
            let root = find(&mut parent, z);
            let next = ids.len() as i32;
            *ids.entry(root).or_insert(next)
        })
        .collect()
}

fn naive_rows(probs: &[f64], h: usize, w: usize, k: usize, seg: &[i32], labels: &[i32]) -> Vec<Vec<f64>> {
    let n_seg = *seg.iter().max().unwrap() as usize + 1;
    let at = |r: i64, c: i64| -> Option<usize> {
        (r >= 0 && c >= 0 && r < h as i64 && c < w as i64).then(|| r as usize * w + c as usize)
    };
    let nb = |z: usize| -> Vec<Option<usize>> {
        let (r, c) = ((z / w) as i64, (z % w) as i64);
        let mut out = Vec::new();
        for dr in -1..=1 {
            for dc in -1..=1 {
                if dr != 0 || dc != 0 {
                    out.push(at(r + dr, c + dc));
                }
            }
        }
        out
    };
    let disp: Vec<[f64; 3]> = (0..h * w)
        .map(|z| {
            let p = &probs[z * k..(z + 1) * k];
            let mut sorted = p.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let e = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / (k as f64).ln();
            [e.clamp(0.0, 1.0), (1.0 - sorted[0] + sorted[1]).clamp(0.0, 1.0), (1.0 - sorted[0]).clamp(0.0, 1.0)]
        })
        .collect();
    let stats = |zs: &[usize], d: usize| -> (f64, f64) {
        if zs.is_empty() {
            return (0.0, 0.0);
        }
        let n = zs.len() as f64;
        let mean = zs.iter().map(|&z| disp[z][d]).sum::<f64>() / n;
        (mean, zs.iter().map(|&z| (disp[z][d] - mean).powi(2)).sum::<f64>() / n)
    };
    (0..n_seg as i32)
        .map(|s| {
            let all: Vec<usize> = (0..h * w).filter(|&z| seg[z] == s).collect();
            let bd: Vec<usize> =
                all.iter().copied().filter(|&z| nb(z).iter().any(|o| o.map_or(true, |o| seg[o] != s))).collect();
            let inn: Vec<usize> = all.iter().copied().filter(|z| !bd.contains(z)).collect();
            let (sz, si, sb) = (all.len() as f64, inn.len() as f64, bd.len() as f64);
            let mut row = vec![sz, si, sb, sz / sb, si / sb];
            for d in 0..3 {
                row.extend([stats(&all, d).0, stats(&inn, d).0, stats(&bd, d).0]);
            }
            for d in 0..3 {
                row.extend([stats(&all, d).0 * sz, stats(&inn, d).0 * si / sb]);
            }
            for d in 0..3 {
                row.extend([stats(&all, d).1, stats(&inn, d).1, stats(&bd, d).1]);
            }
            row.push(labels[all[0]] as f64);
            row.push(all.iter().map(|z| (z / w) as f64).sum::<f64>() / sz);
            row.push(all.iter().map(|z| (z % w) as f64).sum::<f64>() / sz);
            for c in 0..k {
                row.push(all.iter().map(|z| probs[z * k + c]).sum::<f64>() / sz);
            }
            let ring: Vec<usize> = (0..h * w)
                .filter(|&z| seg[z] != s && nb(z).iter().any(|o| o.is_some_and(|o| seg[o] == s)))
                .collect();
            for c in 1..=k as i32 {
                let hits = ring.iter().filter(|&&z| labels[z] == c).count();
                row.push(if ring.is_empty() { 0.0 } else { hits as f64 / ring.len() as f64 });
            }
            row
        })
        .collect()
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut n_segments = 0;
    for case in 0..200 {
        let (h, w, k) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(2..=4));
        // coarse logits so that segments span several pixels
        let cell = rng.gen_range(1..=4);
        let coarse: Vec<f64> = (0..(h / cell + 1) * (w / cell + 1) * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut probs = Vec::with_capacity(h * w * k);
        for r in 0..h {
            for c in 0..w {
                let base = ((r / cell) * (w / cell + 1) + c / cell) * k;
                let logits: Vec<f64> = (0..k).map(|j| coarse[base + j] + rng.gen_range(-0.3..0.3)).collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                probs.extend(logits.iter().map(|v| v.exp() / z));
            }
        }
        let softmax = ProbMap::from_vec(h, w, k, probs.clone()).map_err(|e| e.to_string())?;
        let mask = argmax_mask(&softmax).map_err(|e| e.to_string())?;
        let labels: Vec<i32> = (0..h * w)
            .map(|z| {
                let p = &probs[z * k..(z + 1) * k];
                (0..k).fold(0, |b, j| if p[j] > p[b] { j } else { b }) as i32 + 1
            })
            .collect();
        ensure(mask.as_slice() == labels.as_slice(), format!("case {case}: argmax differs"))?;
        let segs = connected_components(&mask, Connectivity::Eight);
        let seg = naive_segments(&labels, h, w);
        ensure(segs.pixel_to_segment.as_slice() == seg.as_slice(), format!("case {case}: segments differ"))?;
        let maps = pixel_dispersions(&softmax).map_err(|e| e.to_string())?;
        let table = segment_metrics(&segs, &maps, &softmax, "x").map_err(|e| e.to_string())?;
        let want = naive_rows(&probs, h, w, k, &seg, &labels);
        ensure(table.n_rows() == want.len(), format!("case {case}: row count"))?;
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let got = table.row(i)[j];
                ensure(close(got, *v, 1e-12), format!("case {case} segment {i} {}: {got} vs {v}", table.feature_names[j]))?;
            }
        }
        n_segments += want.len();
    }
    Ok(format!("200 tensors, {n_segments} segments, all columns within 1e-12"))
}

fn gbt_quality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = |x: &[f64]| {
        if x[3] < 0.5 {
            if x[7] < 0.3 {
                0.2
            } else {
                0.9
            }
        } else if x[7] < 0.6 {
            0.5
        } else {
            0.1
        }
    };
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let rows: Vec<f64> = (0..n * 10).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = rows.chunks(10).map(target).collect();
        MetricTable::new(vec!["s".into(); n], (0..n).collect(), (0..10).map(|i| format!("f{i}")).collect(), rows, Some(y))
            .unwrap()
    };
    let train = make(&mut rng, 2000);
    let test = make(&mut rng, 1000);
    let (model, trace) = fit_gbt_with_trace(&train, &GbtParams::default()).map_err(|e| e.to_string())?;
    let bad = trace.windows(2).position(|w| w[1] > w[0]);
    ensure(bad.is_none(), format!("training MSE rises at stage {}", bad.unwrap_or(0) + 1))?;
    let pred = predict_quality(&model, &test).map_err(|e| e.to_string())?;
    let y = test.iou_targets.as_ref().unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    ensure(r2 >= 0.9, format!("held-out R2 {r2:.4} < 0.9"))?;
    Ok(format!("held-out R2 {r2:.4}, MSE trace monotone over {} stages", trace.len() - 1))
}

fn dbscan_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut runs = 0;
    for set in 0..100 {
        let n = rng.gen_range(1..=200);
        let spread = rng.gen_range(1.0..6.0);
        let points: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..spread), rng.gen_range(0.0..spread)]).collect();
        for eps in [0.1, 0.5, 1.0] {
            for n_min in [1, 3, 5] {
                runs += 1;
                let near = |i: usize, j: usize| {
                    (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2) <= eps * eps
                };
                let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= n_min).collect();
                // core components by repeated relaxation of the minimum index
                let mut comp: Vec<usize> = (0..n).collect();
                loop {
                    let mut changed = false;
                    for i in 0..n {
                        for j in 0..n {
                            if core[i] && core[j] && near(i, j) && comp[j] < comp[i] {
                                comp[i] = comp[j];
                                changed = true;
                            }
                        }
                    }
                    if !changed {
                        break;
                    }
                }
                let res = dbscan(&points, eps, n_min);
                let tag = format!("set {set} eps {eps} n_min {n_min}");
                let mut relabel: BTreeMap<i32, usize> = BTreeMap::new();
                let mut inverse: BTreeMap<usize, i32> = BTreeMap::new();
                for i in 0..n {
                    let border = !core[i] && (0..n).any(|j| core[j] && near(i, j));
                    let want = if core[i] {
                        Role::Core
                    } else if border {
                        Role::Border
                    } else {
                        Role::Noise
                    };
                    ensure(res.roles[i] == want, format!("{tag}: role of point {i}"))?;
                    match want {
                        Role::Noise => ensure(res.labels[i] == -1, format!("{tag}: noise point {i} labelled"))?,
                        Role::Core => {
                            let a = *relabel.entry(res.labels[i]).or_insert(comp[i]);
                            let b = *inverse.entry(comp[i]).or_insert(res.labels[i]);
                            ensure(a == comp[i] && b == res.labels[i], format!("{tag}: core partition differs at {i}"))?;
                        }
                        Role::Border => {}
                    }
                }
                for i in (0..n).filter(|&i| res.roles[i] == Role::Border) {
                    let ok = (0..n).any(|j| core[j] && near(i, j) && relabel.get(&res.labels[i]) == Some(&comp[j]));
                    ensure(ok, format!("{tag}: border point {i} joined a cluster it does not touch"))?;
                }
            }
        }
    }
    Ok(format!("{runs} runs agree with the brute-force reference"))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn tsne_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // gradient against central differences of the KL divergence
    let y: Vec<Vec<f64>> = (0..15).map(|_| (0..4).map(|_| gaussian(&mut rng)).collect()).collect();
    let p = joint_probabilities(&y, 4.0).map_err(|e| e.to_string())?;
    let points: Vec<[f64; 2]> = (0..15).map(|_| [gaussian(&mut rng), gaussian(&mut rng)]).collect();
    let grad = kl_gradient(&p, &points, 1.0);
    let mut worst: f64 = 0.0;
    for i in 0..points.len() {
        for d in 0..2 {
            let shifted = |delta: f64| {
                let mut q = points.clone();
                q[i][d] += delta;
                kl_divergence(&p, &q)
            };
            let h = 1e-5;
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (fd - grad[i][d]).abs() / fd.abs().max(grad[i][d].abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-4, format!("gradient relative error {worst:.2e}"))?;

    // two blobs 10 sigma apart
    let mut blobs = Vec::new();
    for b in 0..2 {
        for _ in 0..20 {
            blobs.push((0..10).map(|j| if j == 0 { 10.0 * b as f64 } else { 0.0 } + gaussian(&mut rng)).collect::<Vec<f64>>());
        }
    }
    let params = TsneParams { perplexity: 10.0, ..TsneParams::default() };
    let (emb, trace) = tsne_with_trace(&blobs, &params, 11).map_err(|e| e.to_string())?;
    let start = params.exaggeration_iterations;
    let mut windows = 0;
    for t in start..trace.len() - 50 {
        ensure(trace[t + 50] <= trace[t] + 1e-6, format!("KL rises from iteration {t} to {} by {:.2e} (KL {:.6})", t + 50, trace[t + 50] - trace[t], trace[t]))?;
        windows += 1;
    }
    let label = |i: usize| i / 20;
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let silhouette = (0..40)
        .map(|i| {
            let mean_to = |l: usize| {
                let others: Vec<usize> = (0..40).filter(|&j| j != i && label(j) == l).collect();
                others.iter().map(|&j| dist(&emb[i], &emb[j])).sum::<f64>() / others.len() as f64
            };
            let (a, b) = (mean_to(label(i)), mean_to(1 - label(i)));
            (b - a) / a.max(b)
        })
        .sum::<f64>()
        / 40.0;
    ensure(silhouette >= 0.8, format!("silhouette {silhouette:.3} < 0.8"))?;
    Ok(format!("gradient rel err {worst:.1e}, {windows} KL windows non-increasing, silhouette {silhouette:.3}"))
}

fn loss_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (k, n_old, dim) = (4, 3, 5);
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.5, 1.0] {
        for seed in 0..3u64 {
            let dec = Decoder::random(k, dim, 0.5, seed);
            let maps: Vec<FeatureMap> = (0..2)
                .map(|_| FeatureMap { height: 3, width: 4, dim, data: (0..12 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect() })
                .collect();
            let labels: Vec<Vec<i32>> =
                (0..2).map(|_| (0..12).map(|_| rng.gen_range(0..=k as i32)).map(|y| if y == 0 { -1 } else { y }).collect()).collect();
            let teachers: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    (0..12)
                        .flat_map(|_| {
                            let raw: Vec<f64> = (0..n_old).map(|_| rng.gen_range(0.05..1.0)).collect();
                            let s: f64 = raw.iter().sum();
                            raw.into_iter().map(move |v| v / s)
                        })
                        .collect()
                })
                .collect();
            let batch: Vec<BatchItem> =
                (0..2).map(|i| BatchItem { features: &maps[i], labels: &labels[i], teacher: &teachers[i] }).collect();
            let (_, grad) = batch_loss_and_grad(&dec, &batch, n_old, lambda);
            let n_w = dec.weights.len();
            for i in 0..dec.n_params() {
                let at = |delta: f64| {
                    let mut d = dec.clone();
                    if i < n_w {
                        d.weights[i] += delta;
                    } else {
                        d.bias[i - n_w] += delta;
                    }
                    batch_loss(&d, &batch, n_old, lambda).total
                };
                let h = 1e-5;
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }

            // endpoints against the standalone loss terms on one crop
            let single = &batch[..1];
            let probs = dec.predict(&maps[0]);
            let w = class_weights([labels[0].as_slice()], k).unwrap();
            let ce = weighted_ce(probs.as_slice(), k, &labels[0], &w);
            let d = distill_loss(probs.as_slice(), k, &teachers[0], n_old);
            let at1 = batch_loss(&dec, single, n_old, 1.0).total;
            let at0 = batch_loss(&dec, single, n_old, 0.0).total;
            ensure((at1 - ce).abs() <= 1e-12, format!("lambda 1 gives {at1}, CE is {ce}"))?;
            ensure((at0 - d).abs() <= 1e-12, format!("lambda 0 gives {at0}, distillation is {d}"))?;
        }
    }
    ensure(worst <= 1e-5, format!("gradient relative error {worst:.2e}"))?;
    Ok(format!("lambda 0/0.5/1 gradient rel err {worst:.1e}, endpoints exact"))
}

fn heuristics() -> Check {
    // strict inequality: s = tau is not anomalous
    let mask: LabelMask = Grid::from_vec(1, 3, vec![1, 2, 3]).unwrap();
    let segs = connected_components(&mask, Connectivity::Eight);
    let flagged = anomaly_mask(&segs, &[0.5, 0.4999, 0.9], 0.5).map_err(|e| e.to_string())?;
    ensure(flagged.as_slice() == [0, 1, 0], format!("anomaly mask {:?}", flagged.as_slice()))?;

    // single-segment filter with the 500 px rule: a 30x30 block plus a 30x10 strip
    let mut labels = vec![1; 30 * 40];
    for r in 0..30 {
        for c in 30..40 {
            labels[r * 40 + c] = 2;
        }
    }
    let mask: LabelMask = Grid::from_vec(30, 40, labels.clone()).unwrap();
    let segs = connected_components(&mask, Connectivity::Eight);
    let all: Grid<u8> = Grid::filled(30, 40, 1);
    let objects = suspicious_objects(&all, &segs, 50, "a");
    ensure(objects.len() == 1 && objects[0].member_segments.len() == 2, "one object of two segments")?;
    // 900 px + 300 px: one segment reaches 500, the other is disregarded
    ensure(single_segment_filter(objects.clone(), &segs, 500).is_empty(), "900+300 object should be dropped")?;
    // threshold 300: both count, object kept
    ensure(single_segment_filter(objects.clone(), &segs, 300).len() == 1, "900+300 object kept at 300")?;
    // threshold 1000: no large segment, object kept
    ensure(single_segment_filter(objects, &segs, 1000).len() == 1, "object without large segment kept")?;

    // neighbourhood rejection
    let rule = KnownRejection::default();
    let cloud = |n: usize, same: usize| -> Vec<([f64; 2], i32)> {
        (0..n).map(|i| ([0.1 * (i % 5) as f64, 0.1 * (i / 5) as f64], if i < same { 1 } else { 2 })).collect()
    };
    let keep = |known: &[([f64; 2], i32)]| reject_known(&[[0.0, 0.0]], known, &rule)[0];
    ensure(!keep(&cloud(12, 10)), "12 neighbours, 10 same class (83%) should be rejected")?;
    ensure(keep(&cloud(12, 7)), "12 neighbours, 7 same class (58%) should be kept")?;
    ensure(keep(&cloud(5, 5)), "5 neighbours should be kept")?;
    let far = vec![([2.76, 0.0], 1); 20];
    ensure(keep(&far), "points beyond 2.75 do not count")?;

    // image rejection
    let rej = ImageRejection::default();
    let q = |v: Vec<f64>| -> QualityMap { Grid::from_vec(1, v.len(), v).unwrap() };
    ensure(rej.rejects(&q(vec![0.65; 10])), "mean 0.65 should be rejected")?;
    let mut forty = vec![0.95; 10];
    forty[..4].iter_mut().for_each(|v| *v = 0.85);
    ensure(rej.rejects(&q(forty)), "40% below 0.9 should be rejected")?;
    let mut thirty = vec![0.95; 10];
    thirty[..3].iter_mut().for_each(|v| *v = 0.85);
    ensure(!rej.rejects(&q(thirty)), "30% below 0.9 with mean 0.92 should be kept")?;
    Ok("strictness, 500 px rule, 2.75 neighbourhood and image rejection tables exact".into())
}

struct RunResult {
    novel_iou: f64,
    drop: f64,
    miou_known: f64,
    pearson: f64,
}

fn synthetic_run(root: &Path, seed: u64) -> Result<RunResult, String> {
    let data = root.join(format!("data-{seed}"));
    gen_synthetic(&ScenarioSpec::default(), seed, &data).map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig::synthetic(&data);
    cfg.seed = seed;
    match run_pipeline(&cfg, &root.join(format!("run-{seed}")), &RunOptions::default()).map_err(|e| e.to_string())? {
        RunOutcome::Completed(report) => {
            let e = report.eval.ok_or("completed run without evaluation")?;
            Ok(RunResult {
                novel_iou: e.novel_iou,
                drop: e.known_miou_drop,
                miou_known: e.extended.miou_known,
                pearson: e.regressor_pearson.ok_or("no regressor correlation")?,
            })
        }
        other => Err(format!("seed {seed}: {other:?}")),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn end_to_end(results: &[Result<RunResult, String>]) -> Check {
    let ok: Vec<&RunResult> = results.iter().map(|r| r.as_ref()).collect::<Result<_, _>>().map_err(|e| e.clone())?;
    let (iou, _) = mean_std(&ok.iter().map(|r| r.novel_iou).collect::<Vec<_>>());
    let (drop, _) = mean_std(&ok.iter().map(|r| 100.0 * r.drop).collect::<Vec<_>>());
    let (_, sd) = mean_std(&ok.iter().map(|r| 100.0 * r.miou_known).collect::<Vec<_>>());
    let msg = format!("novel IoU {iou:.3}, known mIoU drop {drop:.2} pts, std mIoU_C {sd:.2} pts over {} seeds", ok.len());
    ensure(iou >= 0.5 && drop <= 5.0 && sd <= 2.0, msg.clone())?;
    Ok(msg)
}

fn regression_fidelity(results: &[Result<RunResult, String>]) -> Check {
    let r: Vec<f64> = results.iter().map(|r| r.as_ref().map(|r| r.pearson)).collect::<Result<_, _>>().map_err(|e| e.clone())?;
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min >= 0.7, format!("lowest held-out Pearson {min:.3}"))?;
    Ok(format!("held-out Pearson min {min:.3} over {} seeds", r.len()))
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(root: &Path) -> Check {
    let seed = SEEDS[0];
    let data = root.join(format!("data-{seed}"));
    let again = root.join("regen");
    gen_synthetic(&ScenarioSpec::default(), seed, &again).map_err(|e| e.to_string())?;
    ensure(tree_bytes(&data) == tree_bytes(&again), "regenerated dataset differs")?;

    let mut cfg = PipelineConfig::synthetic(&data);
    cfg.seed = seed;
    let cold = root.join(format!("run-{seed}"));
    let rerun = root.join("rerun");
    run_pipeline(&cfg, &rerun, &RunOptions::default()).map_err(|e| e.to_string())?;
    let reference = tree_bytes(&cold);
    ensure(reference == tree_bytes(&rerun), "rerun differs from the first run")?;

    let resumed = root.join("resumed");
    let until = RunOptions { resume: false, until: Some(novelseg_core::pipeline::Stage::Clusters) };
    run_pipeline(&cfg, &resumed, &until).map_err(|e| e.to_string())?;
    run_pipeline(&cfg, &resumed, &RunOptions { resume: true, until: None }).map_err(|e| e.to_string())?;
    ensure(reference == tree_bytes(&resumed), "resumed run differs from the cold run")?;
    Ok(format!("{} artifacts bit-identical across rerun and resume", reference.len()))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    let runs: Vec<Result<RunResult, String>> = SEEDS.iter().map(|&s| synthetic_run(root.path(), s)).collect();
    let e2e_time = started.elapsed();

    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("dispersion correctness", Box::new(dispersion_correctness)),
        ("segment and metric oracle equivalence", Box::new(metric_oracle)),
        ("GBT quality", Box::new(gbt_quality)),
        ("meta-regression fidelity", Box::new(|| regression_fidelity(&runs))),
        ("DBSCAN oracle equivalence", Box::new(dbscan_oracle)),
        ("t-SNE checks", Box::new(tsne_checks)),
        ("loss and gradient checks", Box::new(loss_checks)),
        ("end-to-end synthetic open-world run", Box::new(|| {
            end_to_end(&runs).map(|m| format!("{m}, {:.1} s", e2e_time.as_secs_f64()))
        })),
        ("heuristic unit suites", Box::new(heuristics)),
        ("determinism", Box::new(|| determinism(root.path()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.2} s]", t.elapsed().as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.2} s]", t.elapsed().as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
