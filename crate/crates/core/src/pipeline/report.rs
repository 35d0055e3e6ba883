use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::run::{read_artifact, read_json, AnomalySummary, EvalSummary, NoveltyStatus, SelectedClusters};

/// One suspicious object in the 2-D embedding with its cluster assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub object_id: String,
    pub x: f64,
    pub y: f64,
    /// Cluster id, -1 for noise and rejected objects.
    pub cluster: i32,
    /// `core`, `border`, `noise` or `rejected`.
    pub role: String,
}

pub(crate) fn write_cluster_csv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::from("object_id,x,y,cluster,role\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.object_id, r.x, r.y, r.cluster, r.role);
    }
    out
}

pub fn read_cluster_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad cluster row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(EmbeddingRow {
                object_id: f[0].to_string(),
                x: f[1].parse().map_err(|_| bad())?,
                y: f[2].parse().map_err(|_| bad())?,
                cluster: f[3].parse().map_err(|_| bad())?,
                role: f[4].to_string(),
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
const SIZE: f64 = 480.0;
const MARGIN: f64 = 20.0;

/// Scatter plot of the embedding, one group per cluster; noise and rejected points in gray.
pub fn scatter_svg(rows: &[EmbeddingRow]) -> String {
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if rows.is_empty() {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\">no points</text>",
            SIZE / 2.0,
            SIZE / 2.0
        );
        out.push_str("</svg>\n");
        return out;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        x0 = x0.min(r.x);
        x1 = x1.max(r.x);
        y0 = y0.min(r.y);
        y1 = y1.max(r.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |v: f64, lo: f64| MARGIN + (v - lo) * scale;

    let mut groups: BTreeMap<i32, Vec<&EmbeddingRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.cluster).or_default().push(r);
    }
    for (cluster, members) in groups {
        let (class, color) = if cluster < 0 {
            ("noise".to_string(), "#9a9a9a")
        } else {
            (format!("cluster-{cluster}"), PALETTE[cluster as usize % PALETTE.len()])
        };
        let _ = writeln!(out, "<g class=\"{class}\" fill=\"{color}\">");
        for r in members {
            let radius = if r.role == "core" { 3.5 } else { 2.5 };
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{radius}\"><title>{}</title></circle>",
                px(r.x, x0),
                SIZE - px(r.y, y0),
                r.object_id
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Summary of a finished or stopped run, written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub stages_done: Vec<String>,
    pub no_novelty: Option<NoveltyStatus>,
    pub anomaly: AnomalySummary,
    /// Set when the anomaly stage flagged almost everything, which makes discovery meaningless.
    pub degenerate: bool,
    pub n_embedded: usize,
    pub n_clusters: usize,
    pub selected_clusters: Vec<i32>,
    pub selected_sizes: Vec<usize>,
    pub eval: Option<EvalSummary>,
}

/// Fraction of anomalous training pixels from which a run counts as degenerate.
pub const DEGENERATE_FRACTION: f64 = 0.95;

/// Collects the artifacts of a run directory into `report.json` and `report/embedding.svg`.
pub fn emit_report(run_dir: &Path) -> Result<RunReport> {
    let config = read_artifact(&run_dir.join("config.json"), "config")?;
    let cfg = super::config::PipelineConfig::from_json(&config)?;
    let hash = cfg.hash();
    let stages_done = super::run::STAGES
        .iter()
        .filter(|s| {
            fs::read_to_string(run_dir.join(format!("stages/{}.done", s.name()))).is_ok_and(|h| h.trim() == hash)
        })
        .map(|s| s.name().to_string())
        .collect::<Vec<_>>();
    let no_novelty: Option<NoveltyStatus> = read_json(&run_dir.join("status.json"), "status").ok();
    let anomaly: AnomalySummary = read_json(&run_dir.join("anomaly/summary.json"), "anomaly")?;
    let fraction = anomaly.anomalous_pixels as f64 / anomaly.total_pixels.max(1) as f64;
    let degenerate = cfg.tau >= 1.0 || fraction >= DEGENERATE_FRACTION;

    let clusters_path = run_dir.join("clusters/clusters.csv");
    let rows = if clusters_path.exists() { read_cluster_csv(&fs::read_to_string(&clusters_path)?)? } else { Vec::new() };
    let selected: Option<SelectedClusters> = read_json(&run_dir.join("clusters/selected.json"), "clusters").ok();
    let n_clusters = rows.iter().filter(|r| r.cluster >= 0).map(|r| r.cluster + 1).max().unwrap_or(0) as usize;
    let eval: Option<EvalSummary> = if no_novelty.is_none() && stages_done.iter().any(|s| s == "eval") {
        Some(read_json(&run_dir.join("eval/summary.json"), "eval")?)
    } else {
        None
    };

    let report = RunReport {
        config_hash: hash,
        stages_done,
        no_novelty,
        anomaly,
        degenerate,
        n_embedded: rows.len(),
        n_clusters,
        selected_clusters: selected.as_ref().map(|s| s.clusters.clone()).unwrap_or_default(),
        selected_sizes: selected.map(|s| s.core_objects.iter().map(Vec::len).collect()).unwrap_or_default(),
        eval,
    };
    fs::create_dir_all(run_dir.join("report"))?;
    fs::write(run_dir.join("report/embedding.svg"), scatter_svg(&rows))?;
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
