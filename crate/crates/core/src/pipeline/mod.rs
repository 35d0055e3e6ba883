//! End-to-end orchestration: configuration, the synthetic scenario, the
//! staged run with checkpoints, and report emission.

mod config;
mod report;
mod run;
mod synthetic;

pub use config::{DbscanConfig, EmbeddingConfig, FilterConfig, ModeFlags, ModelConfig, PipelineConfig};
pub use report::{emit_report, read_cluster_csv, scatter_svg, EmbeddingRow, RunReport, DEGENERATE_FRACTION};
pub use run::{
    read_regressor, run_pipeline, run_stage, AnomalySummary, EvalSummary, KnownReference, NoveltyStatus, PatchEntry, RunOptions,
    RunOutcome, SelectedClusters, Stage, StageOutcome, STAGES,
};
pub use synthetic::{gen_synthetic, generate_sample, sample_ids, NovelShape, ScenarioSpec, SyntheticSample, KNOWN_CLASSES};
