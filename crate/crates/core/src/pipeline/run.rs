use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anomaly::{anomaly_mask, quality_map, single_segment_filter, suspicious_objects, ObjectRecord};
use crate::clustering::{dbscan, reject_known, select_novel_clusters};
use crate::data::{
    load_sample, read_ppm, read_tensor, write_ppm, write_tensor, DatasetLayout, DatasetManifest, LabelMask,
    RgbImage, Sample, IGNORE_LABEL,
};
use crate::embedding::{extract_patches, fallback_features, image_pixels, patch_image, pca, tsne, Patch};
use crate::error::{Error, Result};
use crate::evaluation::{class_scores, confusion, pearson, summarize, Summary};
use crate::gbt::{fit_gbt, predict_quality, GbtModel};
use crate::metrics::{feature_names, pixel_dispersions, segment_iou_targets, segment_metrics, MetricTable};
use crate::pseudo::{pseudo_label, related_class_histogram, select_rehearsal, NovelAssignment, RetrainManifest, TrainIndex};
use crate::segments::{argmax_mask, connected_components, BBox, Connectivity, PixelObject, SegmentSet};
use crate::trainer::{extend_model, read_checkpoint, train, write_checkpoint, Encoder, FeatureMap, ToySegmenter, TrainSample};

use super::config::PipelineConfig;
use super::report::{emit_report, write_cluster_csv, EmbeddingRow, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Segments,
    Metrics,
    Regressor,
    Anomaly,
    Embedding,
    Clusters,
    Pseudo,
    Train,
    Eval,
}

pub const STAGES: [Stage; 9] = [
    Stage::Segments,
    Stage::Metrics,
    Stage::Regressor,
    Stage::Anomaly,
    Stage::Embedding,
    Stage::Clusters,
    Stage::Pseudo,
    Stage::Train,
    Stage::Eval,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Segments => "segments",
            Stage::Metrics => "metrics",
            Stage::Regressor => "regressor",
            Stage::Anomaly => "anomaly",
            Stage::Embedding => "embedding",
            Stage::Clusters => "clusters",
            Stage::Pseudo => "pseudo",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    pub fn from_name(name: &str) -> Result<Stage> {
        STAGES
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage {name:?}")))
    }

    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Segments => &[],
            Stage::Metrics => &[Stage::Segments],
            Stage::Regressor => &[Stage::Metrics],
            Stage::Anomaly => &[Stage::Segments, Stage::Regressor],
            Stage::Embedding => &[Stage::Anomaly],
            Stage::Clusters => &[Stage::Embedding],
            Stage::Pseudo => &[Stage::Segments, Stage::Clusters],
            Stage::Train => &[Stage::Pseudo],
            Stage::Eval => &[Stage::Metrics, Stage::Regressor, Stage::Train],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip stages whose outputs were produced under the same config hash.
    pub resume: bool,
    /// Stop after this stage.
    pub until: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed(RunReport),
    NoNovelty(RunReport),
    Stopped(Stage),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    Done,
    NoNovelty(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyStatus {
    pub stage: String,
    pub reason: String,
}

/// What a suspicious object or a known reference looks like once cropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch: Patch,
    pub known: bool,
    /// Predicted class of a known reference; -1 for suspicious objects.
    pub class_id: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownReference {
    pub id: String,
    pub image: String,
    pub bbox: BBox,
    pub class_id: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySummary {
    pub rejected_images: Vec<String>,
    pub anomalous_pixels: usize,
    pub total_pixels: usize,
    pub n_objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedClusters {
    pub clusters: Vec<i32>,
    /// Core objects of each selected cluster, in cluster order.
    pub core_objects: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub initial: Summary,
    pub extended: Summary,
    /// Discovered class id -> evaluation class id.
    pub mapping: BTreeMap<i32, i32>,
    /// Mean IoU of the extended model over the ground-truth novel classes.
    pub novel_iou: f64,
    /// Known-class mIoU of the initial model minus that of the extended one.
    pub known_miou_drop: f64,
    /// Correlation of predicted segment quality with true segment IoU on the test images.
    pub regressor_pearson: Option<f64>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    hash: String,
    run: PathBuf,
    data: DatasetLayout,
    manifest: DatasetManifest,
}

const OWNED_ENTRIES: [&str; 15] = [
    "stages",
    "segments",
    "metrics",
    "regressor",
    "anomaly",
    "embedding",
    "clusters",
    "pseudo",
    "pseudo_gt",
    "train",
    "eval",
    "report",
    "status.json",
    "report.json",
    "config.json",
];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a stage artifact; a missing file means the stage has not run.
pub(crate) fn read_artifact(path: &Path, stage: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::StageMissing(format!("{stage} ({})", path.display())),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    Ok(serde_json::from_str(&read_artifact(path, stage)?)?)
}

/// Ground-truth ids the deployed model does not know become ignore.
fn known_gt(gt: &LabelMask, n_known: usize) -> LabelMask {
    gt.map(|&v| if v > n_known as i32 { IGNORE_LABEL } else { v })
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a PipelineConfig, run: &Path) -> Result<Self> {
        cfg.validate()?;
        let data = DatasetLayout::new(&cfg.dataset);
        let manifest = DatasetManifest::read(data.manifest_path())?;
        Ok(Ctx { cfg, hash: cfg.hash(), run: run.to_path_buf(), data, manifest })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.run.join(rel)
    }

    fn n_known(&self) -> usize {
        self.manifest.n_known()
    }

    fn all_ids(&self) -> Vec<String> {
        self.manifest.train.iter().chain(&self.manifest.test).cloned().collect()
    }

    fn sample(&self, id: &str) -> Result<Sample> {
        let s = load_sample(self.data.root(), id)?;
        if s.classes() != self.n_known() {
            return Err(Error::Shape(format!(
                "{id}: softmax has {} classes, the manifest lists {}",
                s.classes(),
                self.n_known()
            )));
        }
        Ok(s)
    }

    fn image(&self, id: &str) -> Result<RgbImage> {
        read_ppm(self.data.image_path(id))
    }

    fn segments(&self, id: &str) -> Result<(LabelMask, SegmentSet)> {
        let load = |suffix: &str| -> Result<LabelMask> {
            let path = self.path(format!("segments/{id}.{suffix}.owt"));
            match read_tensor(&path) {
                Err(Error::NotFound(_)) => Err(Error::StageMissing(format!("segments ({})", path.display()))),
                other => LabelMask::from_tensor(&other?),
            }
        };
        let mask = load("mask")?;
        let map = load("seg")?;
        let segs = SegmentSet::from_pixel_map(&mask, map)?;
        Ok((mask, segs))
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.path(format!("stages/{}.done", stage.name()))
    }

    fn is_done(&self, stage: Stage) -> bool {
        fs::read_to_string(self.marker(stage)).is_ok_and(|h| h.trim() == self.hash)
    }

    fn mark_done(&self, stage: Stage) -> Result<()> {
        write_text(&self.marker(stage), &format!("{}\n", self.hash))
    }

    fn require(&self, stage: Stage) -> Result<()> {
        for &dep in stage.requires() {
            if !self.is_done(dep) {
                return Err(Error::StageMissing(dep.name().to_string()));
            }
        }
        Ok(())
    }

    fn status(&self) -> Option<NoveltyStatus> {
        read_json(&self.path("status.json"), "status").ok()
    }

    fn clean(&self) -> Result<()> {
        for entry in OWNED_ENTRIES {
            let p = self.path(entry);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
        Ok(())
    }

    fn write_config(&self) -> Result<()> {
        write_text(&self.path("config.json"), &self.cfg.to_json())
    }

    fn run(&self, stage: Stage) -> Result<StageOutcome> {
        self.require(stage)?;
        info!("stage {stage}");
        let outcome = match stage {
            Stage::Segments => self.stage_segments(),
            Stage::Metrics => self.stage_metrics(),
            Stage::Regressor => self.stage_regressor(),
            Stage::Anomaly => self.stage_anomaly(),
            Stage::Embedding => self.stage_embedding(),
            Stage::Clusters => self.stage_clusters(),
            Stage::Pseudo => self.stage_pseudo(),
            Stage::Train => self.stage_train(),
            Stage::Eval => self.stage_eval(),
        }?;
        if let StageOutcome::NoNovelty(reason) = &outcome {
            info!("no novelty: {reason}");
            write_json(&self.path("status.json"), &NoveltyStatus { stage: stage.name().into(), reason: reason.clone() })?;
        }
        self.mark_done(stage)?;
        Ok(outcome)
    }

    fn stage_segments(&self) -> Result<StageOutcome> {
        self.all_ids().par_iter().try_for_each(|id| -> Result<()> {
            let s = self.sample(id)?;
            let mask = argmax_mask(&s.softmax)?;
            let segs = connected_components(&mask, Connectivity::Eight);
            write_tensor(&mask.to_tensor(), self.path(format!("segments/{id}.mask.owt")))?;
            write_tensor(&segs.pixel_to_segment.to_tensor(), self.path(format!("segments/{id}.seg.owt")))?;
            Ok(())
        })?;
        Ok(StageOutcome::Done)
    }

    fn stage_metrics(&self) -> Result<StageOutcome> {
        let c = self.n_known();
        for (split, ids) in [("train", &self.manifest.train), ("test", &self.manifest.test)] {
            let tables = ids
                .par_iter()
                .map(|id| -> Result<MetricTable> {
                    let s = self.sample(id)?;
                    let (_, segs) = self.segments(id)?;
                    let maps = pixel_dispersions(&s.softmax)?;
                    let table = segment_metrics(&segs, &maps, &s.softmax, id)?;
                    match &s.gt {
                        Some(gt) => table.with_targets(segment_iou_targets(&segs, &known_gt(gt, c))?),
                        None => Ok(table),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut all = MetricTable::empty(feature_names(c));
            for t in tables {
                all.extend(t)?;
            }
            write_text(&self.path(format!("metrics/{split}.csv")), &all.to_csv())?;
        }
        Ok(StageOutcome::Done)
    }

    fn metric_table(&self, split: &str) -> Result<MetricTable> {
        MetricTable::from_csv(&read_artifact(&self.path(format!("metrics/{split}.csv")), "metrics")?)
    }

    fn stage_regressor(&self) -> Result<StageOutcome> {
        let table = self.metric_table("train")?;
        if table.iou_targets.is_none() {
            return Err(Error::Data("the regressor needs ground truth for every training image".into()));
        }
        let k = self.cfg.regressor_folds;
        let fold_of: BTreeMap<&str, usize> =
            self.manifest.train.iter().enumerate().map(|(i, id)| (id.as_str(), i % k)).collect();
        let mut scores = vec![0.0; table.n_rows()];
        for fold in 0..k {
            let (held, fit): (Vec<usize>, Vec<usize>) =
                (0..table.n_rows()).partition(|&i| fold_of[table.image_ids[i].as_str()] == fold);
            if held.is_empty() {
                continue;
            }
            let model = fit_gbt(&table.select(&fit), &self.cfg.regressor)?;
            write_text(&self.path(format!("regressor/fold_{fold}.txt")), &model.to_text())?;
            for (&i, s) in held.iter().zip(predict_quality(&model, &table.select(&held))?) {
                scores[i] = s;
            }
        }
        write_text(&self.path("regressor/scores_train.csv"), &scores_csv(&table, &scores))?;

        let full = fit_gbt(&table, &self.cfg.regressor)?;
        write_text(&self.path("regressor/model.txt"), &full.to_text())?;
        let test = self.metric_table("test")?;
        let test_scores = if test.n_rows() > 0 { predict_quality(&full, &test)? } else { Vec::new() };
        write_text(&self.path("regressor/scores_test.csv"), &scores_csv(&test, &test_scores))?;
        Ok(StageOutcome::Done)
    }

    fn scores(&self, split: &str) -> Result<BTreeMap<String, Vec<f64>>> {
        parse_scores(&read_artifact(&self.path(format!("regressor/scores_{split}.csv")), "regressor")?)
    }

    fn stage_anomaly(&self) -> Result<StageOutcome> {
        let cfg = self.cfg;
        let scores = self.scores("train")?;
        struct PerImage {
            rejected: bool,
            objects: Vec<ObjectRecord>,
            known: Vec<KnownReference>,
            anomalous: usize,
            total: usize,
        }
        let per_image = self
            .manifest
            .train
            .par_iter()
            .map(|id| -> Result<PerImage> {
                let (_, segs) = self.segments(id)?;
                let s = scores.get(id).ok_or_else(|| Error::StageMissing(format!("regressor (scores of {id})")))?;
                let total = segs.height() * segs.width();
                if cfg.filters.image_rejection && cfg.filters.rejection.rejects(&quality_map(&segs, s)?) {
                    return Ok(PerImage { rejected: true, objects: vec![], known: vec![], anomalous: 0, total });
                }
                let mask = anomaly_mask(&segs, s, cfg.tau)?;
                let anomalous = mask.as_slice().iter().filter(|&&v| v == 1).count();
                let mut objects = suspicious_objects(&mask, &segs, cfg.min_object_pixels, id);
                if cfg.filters.single_segment {
                    objects = single_segment_filter(objects, &segs, cfg.filters.min_segment_pixels);
                }
                let known = if cfg.filters.known_rejection {
                    segs.segments
                        .iter()
                        .filter(|seg| s[seg.id] >= cfg.tau && seg.size() >= cfg.min_object_pixels)
                        .map(|seg| KnownReference {
                            id: format!("{id}_k{:03}", seg.id),
                            image: id.clone(),
                            bbox: seg.bbox,
                            class_id: seg.class_id,
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                Ok(PerImage {
                    rejected: false,
                    objects: objects.iter().map(ObjectRecord::from_object).collect(),
                    known,
                    anomalous,
                    total,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut summary = AnomalySummary { rejected_images: vec![], anomalous_pixels: 0, total_pixels: 0, n_objects: 0 };
        let mut objects = Vec::new();
        let mut known = Vec::new();
        for (id, r) in self.manifest.train.iter().zip(per_image) {
            if r.rejected {
                summary.rejected_images.push(id.clone());
            }
            summary.anomalous_pixels += r.anomalous;
            summary.total_pixels += r.total;
            objects.extend(r.objects);
            known.extend(r.known);
        }
        summary.n_objects = objects.len();
        write_json(&self.path("anomaly/objects.json"), &objects)?;
        write_json(&self.path("anomaly/known.json"), &known)?;
        write_json(&self.path("anomaly/summary.json"), &summary)?;
        if objects.is_empty() {
            return Ok(StageOutcome::NoNovelty("no suspicious objects".into()));
        }
        Ok(StageOutcome::Done)
    }

    fn stage_embedding(&self) -> Result<StageOutcome> {
        let cfg = self.cfg;
        let objects: Vec<ObjectRecord> = read_json(&self.path("anomaly/objects.json"), "anomaly")?;
        let known: Vec<KnownReference> = read_json(&self.path("anomaly/known.json"), "anomaly")?;
        let mut image_ids: BTreeSet<&str> = objects.iter().map(|o| o.image.as_str()).collect();
        image_ids.extend(known.iter().map(|k| k.image.as_str()));
        let images: BTreeMap<&str, RgbImage> = image_ids
            .into_par_iter()
            .map(|id| Ok((id, self.image(id)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();

        let min_patch = cfg.embedding.min_patch;
        let as_object = |index: usize, image: &str, bbox: BBox| PixelObject {
            id: index,
            pixels: Vec::new(),
            member_segments: Vec::new(),
            bbox,
            source_image: image.to_string(),
        };
        let mut entries = Vec::new();
        for o in &objects {
            let img = &images[o.image.as_str()];
            for patch in extract_patches(img, &[as_object(o.index, &o.image, o.bbox)], min_patch) {
                entries.push(PatchEntry { patch, known: false, class_id: -1 });
            }
        }
        let n_suspicious = entries.len();
        for k in &known {
            let img = &images[k.image.as_str()];
            for mut patch in extract_patches(img, &[as_object(0, &k.image, k.bbox)], min_patch) {
                patch.object_id = k.id.clone();
                entries.push(PatchEntry { patch, known: true, class_id: k.class_id });
            }
        }
        write_json(&self.path("embedding/patches.json"), &entries)?;
        for e in &entries {
            let crop = patch_image(&images[e.patch.image_id.as_str()], &e.patch);
            write_ppm(&crop, self.path(format!("embedding/patches/{}.ppm", e.patch.object_id)))?;
        }
        if n_suspicious == 0 {
            return Ok(StageOutcome::NoNovelty(format!("no suspicious object reaches {min_patch} pixels in both dimensions")));
        }
        if entries.len() < 5 {
            return Ok(StageOutcome::NoNovelty(format!("only {} patches, too few to embed", entries.len())));
        }

        let features = self.patch_features(&entries, &images)?;
        let n = features.len();
        let d = features[0].len();
        let k = cfg.embedding.pca_k.min(n - 1).min(d);
        if k < cfg.embedding.pca_k {
            warn!("PCA dimension reduced from {} to {k} ({n} patches, {d} features)", cfg.embedding.pca_k);
        }
        let projected = pca(&features, k)?.projection;
        let mut params = cfg.embedding.tsne.clone();
        let max_perplexity = (n - 1) as f64 / 3.0;
        if params.perplexity > max_perplexity {
            warn!("perplexity reduced from {} to {max_perplexity:.3} for {n} points", params.perplexity);
            params.perplexity = max_perplexity;
        }
        let refs = entries.iter().map(|e| e.patch.object_id.clone()).collect();
        let emb = tsne(&projected, refs, &params, cfg.derived_seed(3))?;
        let mut csv = String::from("object_id,known,class,x,y\n");
        for (e, p) in entries.iter().zip(&emb.points) {
            csv.push_str(&format!("{},{},{},{},{}\n", e.patch.object_id, u8::from(e.known), e.class_id, p[0], p[1]));
        }
        write_text(&self.path("embedding/embedding.csv"), &csv)?;
        Ok(StageOutcome::Done)
    }

    /// External descriptors when every patch has one, the colour histogram otherwise.
    fn patch_features(&self, entries: &[PatchEntry], images: &BTreeMap<&str, RgbImage>) -> Result<Vec<Vec<f64>>> {
        let external = entries.iter().all(|e| self.data.feature_path(&e.patch.object_id).exists());
        if external {
            info!("using external patch features");
            let rows = entries
                .par_iter()
                .map(|e| Ok(read_tensor(self.data.feature_path(&e.patch.object_id))?.to_f64_vec()))
                .collect::<Result<Vec<_>>>()?;
            if rows.iter().any(|r| r.len() != rows[0].len() || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::Shape("external patch features differ in length or are not finite".into()));
            }
            return Ok(rows);
        }
        if entries.iter().any(|e| self.data.feature_path(&e.patch.object_id).exists()) {
            warn!("external features exist for some patches only; using the built-in descriptor for all");
        }
        entries
            .par_iter()
            .map(|e| fallback_features(&image_pixels(&patch_image(&images[e.patch.image_id.as_str()], &e.patch))))
            .collect()
    }

    fn stage_clusters(&self) -> Result<StageOutcome> {
        let cfg = self.cfg;
        let rows = parse_embedding(&read_artifact(&self.path("embedding/embedding.csv"), "embedding")?)?;
        let suspicious: Vec<&EmbeddingPoint> = rows.iter().filter(|r| !r.known).collect();
        let known: Vec<([f64; 2], i32)> = rows.iter().filter(|r| r.known).map(|r| (r.point, r.class_id)).collect();
        let points: Vec<[f64; 2]> = suspicious.iter().map(|r| r.point).collect();
        let keep = if cfg.filters.known_rejection {
            reject_known(&points, &known, &cfg.filters.known)
        } else {
            vec![true; points.len()]
        };
        let candidates: Vec<usize> = (0..points.len()).filter(|&i| keep[i]).collect();
        let cand_points: Vec<[f64; 2]> = candidates.iter().map(|&i| points[i]).collect();
        let result = dbscan(&cand_points, cfg.dbscan.epsilon, cfg.dbscan.n_min);
        let mut selected = select_novel_clusters(&result, cfg.dbscan.min_core);
        if !cfg.modes.multi_cluster {
            selected.truncate(1);
        }

        let mut out = Vec::with_capacity(points.len());
        let mut slot = 0;
        for (i, r) in suspicious.iter().enumerate() {
            let (cluster, role) = if keep[i] {
                let v = (result.labels[slot], result.roles[slot].as_str().to_string());
                slot += 1;
                v
            } else {
                (-1, "rejected".to_string())
            };
            out.push(EmbeddingRow { object_id: r.object_id.clone(), x: r.point[0], y: r.point[1], cluster, role });
        }
        write_text(&self.path("clusters/clusters.csv"), &write_cluster_csv(&out))?;
        let core_objects = selected
            .iter()
            .map(|&c| {
                result
                    .core_members(c)
                    .into_iter()
                    .map(|j| suspicious[candidates[j]].object_id.clone())
                    .collect()
            })
            .collect();
        write_json(&self.path("clusters/selected.json"), &SelectedClusters { clusters: selected.clone(), core_objects })?;
        if selected.is_empty() {
            return Ok(StageOutcome::NoNovelty("no cluster of suspicious objects".into()));
        }
        Ok(StageOutcome::Done)
    }

    fn stage_pseudo(&self) -> Result<StageOutcome> {
        let cfg = self.cfg;
        let c = self.n_known() as i32;
        let selected: SelectedClusters = read_json(&self.path("clusters/selected.json"), "clusters")?;
        let objects: Vec<ObjectRecord> = read_json(&self.path("anomaly/objects.json"), "anomaly")?;
        let by_id: BTreeMap<&str, &ObjectRecord> = objects.iter().map(|o| (o.id.as_str(), o)).collect();

        let mut per_image: BTreeMap<&str, Vec<NovelAssignment>> = BTreeMap::new();
        let mut novel_ids = Vec::new();
        for (rank, members) in selected.core_objects.iter().enumerate() {
            let class_id = c + 1 + rank as i32;
            novel_ids.push(class_id);
            for m in members {
                let rec = by_id
                    .get(m.as_str())
                    .ok_or_else(|| Error::Data(format!("clustered object {m} missing from the anomaly stage")))?;
                per_image
                    .entry(rec.image.as_str())
                    .or_default()
                    .push(NovelAssignment { class_id, member_segments: rec.member_segments.clone() });
            }
        }

        let mut samples = Vec::new();
        let mut masks = Vec::new();
        for id in &self.manifest.train {
            let Some(assignments) = per_image.get(id.as_str()) else { continue };
            let (mask, segs) = self.segments(id)?;
            if let Some(ps) = pseudo_label(id, &mask, &segs, assignments, cfg.modes.ignore_known)? {
                write_tensor(&ps.pseudo_label.to_tensor(), self.path(format!("pseudo_gt/{id}.owt")))?;
                samples.push(ps);
                masks.push(mask);
            }
        }
        let mask_refs: Vec<&LabelMask> = masks.iter().collect();
        let histogram = related_class_histogram(&samples, &mask_refs)?;
        write_json(&self.path("pseudo/histogram.json"), &histogram)?;

        let index: TrainIndex = self
            .manifest
            .train
            .par_iter()
            .map(|id| -> Result<(String, BTreeSet<i32>)> {
                let gt = self.sample(id)?.gt.ok_or_else(|| Error::Data(format!("{id} has no ground truth")))?;
                Ok((id.clone(), gt.as_slice().iter().copied().filter(|&v| v >= 1 && v <= c).collect()))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let known_ids: Vec<i32> = (1..=c).collect();
        let quotas = cfg.rehearsal.quotas(&histogram, &samples, &known_ids);
        let seed = cfg.derived_seed(4);
        let rehearsal_images = if cfg.modes.rehearsal && !samples.is_empty() {
            select_rehearsal(&index, &quotas, samples.len(), seed)?.ids
        } else {
            Vec::new()
        };
        let manifest = RetrainManifest {
            novel_ids,
            pseudo_images: samples.iter().map(|s| s.image_id.clone()).collect(),
            rehearsal_images,
            quotas,
            seed,
        };
        write_json(&self.path("pseudo/retrain.json"), &manifest)?;
        if samples.is_empty() {
            return Ok(StageOutcome::NoNovelty("clusters produced no pseudo labels".into()));
        }
        Ok(StageOutcome::Done)
    }

    fn stage_train(&self) -> Result<StageOutcome> {
        let cfg = self.cfg;
        let c = self.n_known();
        let retrain: RetrainManifest = read_json(&self.path("pseudo/retrain.json"), "pseudo")?;
        let encoder = Encoder::new(cfg.model.encoder_seed, cfg.model.n_filters);

        let loaded: Vec<(Sample, FeatureMap)> = self
            .manifest
            .train
            .par_iter()
            .map(|id| {
                let s = self.sample(id)?;
                let f = encoder.encode(&s.image);
                Ok((s, f))
            })
            .collect::<Result<Vec<_>>>()?;

        // the initial model mimics the stored network outputs
        let initial_samples: Vec<TrainSample> = loaded
            .iter()
            .map(|(s, f)| TrainSample {
                id: s.id.clone(),
                features: f.clone(),
                labels: LabelMask::filled(s.height(), s.width(), IGNORE_LABEL),
                teacher: s.softmax.clone(),
            })
            .collect();
        let f0 = ToySegmenter::new(encoder, c, cfg.derived_seed(5));
        let icfg = crate::trainer::TrainConfig { seed: cfg.derived_seed(6), ..cfg.initial.clone() };
        let initial = train(&f0, &initial_samples, c, &icfg)?;
        drop(initial_samples);
        write_checkpoint(&self.path("train/initial.owck"), &initial.model, Some(&icfg))?;
        write_text(&self.path("train/initial_loss.csv"), &initial.trace_csv())?;
        let f = initial.model;

        let by_id: BTreeMap<&str, &(Sample, FeatureMap)> = loaded.iter().map(|x| (x.0.id.as_str(), x)).collect();
        let mut samples = Vec::new();
        for id in &retrain.pseudo_images {
            let (s, feat) = by_id.get(id.as_str()).ok_or_else(|| Error::Data(format!("unknown pseudo image {id}")))?;
            let path = self.path(format!("pseudo_gt/{id}.owt"));
            let labels = match read_tensor(&path) {
                Err(Error::NotFound(_)) => return Err(Error::StageMissing(format!("pseudo ({})", path.display()))),
                t => LabelMask::from_tensor(&t?)?,
            };
            samples.push(TrainSample { id: s.id.clone(), features: feat.clone(), labels, teacher: f.decoder.predict(feat) });
        }
        for id in &retrain.rehearsal_images {
            let (s, feat) = by_id.get(id.as_str()).ok_or_else(|| Error::Data(format!("unknown rehearsal image {id}")))?;
            let gt = s.gt.as_ref().ok_or_else(|| Error::Data(format!("{id} has no ground truth")))?;
            samples.push(TrainSample {
                id: s.id.clone(),
                features: feat.clone(),
                labels: known_gt(gt, c),
                teacher: f.decoder.predict(feat),
            });
        }
        drop(by_id);
        drop(loaded);
        let g0 = extend_model(&f, retrain.novel_ids.len(), cfg.derived_seed(7))?;
        let tcfg = crate::trainer::TrainConfig { seed: cfg.derived_seed(8), ..cfg.trainer.clone() };
        let extended = train(&g0, &samples, c, &tcfg)?;
        write_checkpoint(&self.path("train/extended.owck"), &extended.model, Some(&tcfg))?;
        write_text(&self.path("train/extended_loss.csv"), &extended.trace_csv())?;
        Ok(StageOutcome::Done)
    }

    fn checkpoint(&self, name: &str) -> Result<ToySegmenter> {
        let path = self.path(format!("train/{name}.owck"));
        match read_checkpoint(&path) {
            Err(Error::NotFound(_)) => Err(Error::StageMissing(format!("train ({})", path.display()))),
            other => Ok(other?.0),
        }
    }

    fn stage_eval(&self) -> Result<StageOutcome> {
        let c = self.n_known();
        let f = self.checkpoint("initial")?;
        let g = self.checkpoint("extended")?;
        let retrain: RetrainManifest = read_json(&self.path("pseudo/retrain.json"), "pseudo")?;
        let gt_novel = self.manifest.novel_ids();

        let preds = self
            .manifest
            .test
            .par_iter()
            .map(|id| -> Result<Option<(LabelMask, LabelMask, LabelMask)>> {
                let s = self.sample(id)?;
                let Some(gt) = s.gt else { return Ok(None) };
                let feats = f.encoder.encode(&s.image);
                let pf = argmax_mask(&f.decoder.predict(&feats))?;
                let pg = argmax_mask(&g.decoder.predict(&feats))?;
                Ok(Some((pf, pg, gt)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();
        if preds.is_empty() {
            warn!("no test images with ground truth; skipping evaluation");
            return Ok(StageOutcome::Done);
        }

        // match discovered classes to ground-truth novel classes by pixel overlap
        let mut overlap: BTreeMap<(i32, i32), u64> = BTreeMap::new();
        for (_, pg, gt) in &preds {
            for (&p, &t) in pg.as_slice().iter().zip(gt.as_slice()) {
                if retrain.novel_ids.contains(&p) && gt_novel.contains(&t) {
                    *overlap.entry((p, t)).or_default() += 1;
                }
            }
        }
        let mut pairs: Vec<((i32, i32), u64)> = overlap.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut mapping = BTreeMap::new();
        let mut used = BTreeSet::new();
        for ((d, t), _) in pairs {
            if !mapping.contains_key(&d) && !used.contains(&t) {
                mapping.insert(d, t);
                used.insert(t);
            }
        }
        let mut next = c as i32 + gt_novel.len() as i32;
        for &d in &retrain.novel_ids {
            mapping.entry(d).or_insert_with(|| {
                next += 1;
                next
            });
        }
        let n_eval = next as usize;

        let (pfs, pgs, gts): (Vec<&LabelMask>, Vec<LabelMask>, Vec<&LabelMask>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut t = Vec::new();
            for (pf, pg, gt) in &preds {
                a.push(pf);
                b.push(pg.map(|v| *mapping.get(v).unwrap_or(v)));
                t.push(gt);
            }
            (a, b, t)
        };
        let pg_refs: Vec<&LabelMask> = pgs.iter().collect();
        let known: Vec<i32> = (1..=c as i32).collect();
        let mut novel: Vec<i32> = mapping.values().copied().collect();
        novel.extend(gt_novel.iter().filter(|t| !novel.contains(t)).copied().collect::<Vec<_>>());
        novel.sort_unstable();
        let initial = summarize(&class_scores(&confusion(&pfs, &gts, n_eval)?), &known, &novel);
        let extended = summarize(&class_scores(&confusion(&pg_refs, &gts, n_eval)?), &known, &novel);
        let novel_iou = if gt_novel.is_empty() {
            0.0
        } else {
            gt_novel
                .iter()
                .map(|t| extended.classes.iter().find(|s| s.class_id == *t).map_or(0.0, |s| s.iou))
                .sum::<f64>()
                / gt_novel.len() as f64
        };

        let test_table = self.metric_table("test")?;
        let regressor_pearson = match &test_table.iou_targets {
            Some(t) if !t.is_empty() => {
                let scores = self.scores("test")?;
                let flat: Vec<f64> = self
                    .manifest
                    .test
                    .iter()
                    .filter_map(|id| scores.get(id))
                    .flat_map(|v| v.iter().copied())
                    .collect();
                (flat.len() == t.len()).then(|| pearson(&flat, t))
            }
            _ => None,
        };
        let summary = EvalSummary {
            known_miou_drop: initial.miou_known - extended.miou_known,
            initial,
            extended,
            mapping,
            novel_iou,
            regressor_pearson,
        };
        write_text(&self.path("eval/initial.csv"), &summary.initial.to_csv())?;
        write_text(&self.path("eval/extended.csv"), &summary.extended.to_csv())?;
        write_json(&self.path("eval/summary.json"), &summary)?;
        Ok(StageOutcome::Done)
    }
}

fn scores_csv(table: &MetricTable, scores: &[f64]) -> String {
    let mut out = String::from("image,segment,score\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", table.image_ids[i], table.segment_ids[i], s));
    }
    out
}

fn parse_scores(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("bad score row {line:?}"));
        if f.len() != 3 {
            return Err(bad());
        }
        let seg: usize = f[1].parse().map_err(|_| bad())?;
        let score: f64 = f[2].parse().map_err(|_| bad())?;
        let v = out.entry(f[0].to_string()).or_default();
        if v.len() != seg {
            return Err(Error::Format(format!("scores of {} are not in segment order", f[0])));
        }
        v.push(score);
    }
    Ok(out)
}

struct EmbeddingPoint {
    object_id: String,
    known: bool,
    class_id: i32,
    point: [f64; 2],
}

fn parse_embedding(text: &str) -> Result<Vec<EmbeddingPoint>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad embedding row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(EmbeddingPoint {
                object_id: f[0].to_string(),
                known: f[1] == "1",
                class_id: f[2].parse().map_err(|_| bad())?,
                point: [f[3].parse().map_err(|_| bad())?, f[4].parse().map_err(|_| bad())?],
            })
        })
        .collect()
}

/// Runs the stages in order, writing checkpoints after each one.
pub fn run_pipeline(cfg: &PipelineConfig, run_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let ctx = Ctx::new(cfg, run_dir)?;
    if !opts.resume {
        ctx.clean()?;
    }
    fs::create_dir_all(run_dir)?;
    ctx.write_config()?;
    for stage in STAGES {
        if ctx.status().is_some() {
            break;
        }
        if opts.resume && ctx.is_done(stage) {
            info!("stage {stage}: up to date");
        } else if let StageOutcome::NoNovelty(_) = ctx.run(stage)? {
            break;
        }
        if opts.until == Some(stage) && ctx.status().is_none() {
            return Ok(RunOutcome::Stopped(stage));
        }
    }
    let report = emit_report(run_dir)?;
    Ok(if ctx.status().is_some() { RunOutcome::NoNovelty(report) } else { RunOutcome::Completed(report) })
}

/// Runs a single stage; its inputs must already exist for the same config.
pub fn run_stage(cfg: &PipelineConfig, run_dir: &Path, stage: Stage) -> Result<StageOutcome> {
    let ctx = Ctx::new(cfg, run_dir)?;
    fs::create_dir_all(run_dir)?;
    if let Some(status) = ctx.status() {
        if stage > Stage::from_name(&status.stage)? {
            return Ok(StageOutcome::NoNovelty(status.reason));
        }
    }
    ctx.require(stage)?;
    ctx.write_config()?;
    ctx.run(stage)
}

/// Loads a regressor checkpoint written by the pipeline.
pub fn read_regressor(run_dir: &Path) -> Result<GbtModel> {
    GbtModel::from_text(&read_artifact(&run_dir.join("regressor/model.txt"), "regressor")?)
}
