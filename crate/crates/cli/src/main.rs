use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;
use serde_json::json;

use novelseg_core::pipeline::{
    emit_report, gen_synthetic, run_pipeline, run_stage, EvalSummary, PipelineConfig, RunOptions, RunOutcome, RunReport,
    ScenarioSpec, Stage, StageOutcome,
};

const EXIT_OK: u8 = 0;
const EXIT_NO_NOVELTY: u8 = 2;
const EXIT_ERROR: u8 = 3;

/// Discover unseen classes in segmentation outputs and extend a toy segmentation head by them.
#[derive(Debug, Parser)]
#[command(name = "novelseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenario spec as JSON; fields left out keep their defaults.
        #[arg(long, conflicts_with = "scenario")]
        spec: Option<PathBuf>,
        /// Built-in scenario: `default` or `negative-control`.
        #[arg(long, default_value = "default")]
        scenario: String,
    },
    /// Run the whole pipeline.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma separated seeds; several seeds give one run directory per seed.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Reuse stages already completed with the same config.
        #[arg(long)]
        resume: bool,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<String>,
    },
    /// Run one stage on top of existing outputs.
    Stage {
        name: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild report.json and the embedding plot of a run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate runs and aggregate them over seeds.
    Eval {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the aggregate as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Pipeline config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the one in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Config preset used when no config file is given: `synthetic`, `default` or `exp1` to `exp5`.
    #[arg(long, default_value = "synthetic")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::read(path).with_context(|| format!("reading {}", path.display()))?,
            None => {
                let Some(dataset) = &self.dataset else { bail!("either --config or --dataset is required") };
                PipelineConfig::preset(&self.preset, dataset)?
            }
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(run: &Path, report: &RunReport) {
    println!("run: {}", run.display());
    if let Some(status) = &report.no_novelty {
        println!("no novelty ({}): {}", status.stage, status.reason);
    }
    if report.degenerate {
        println!("warning: degenerate anomaly stage, almost every pixel was flagged");
    }
    println!(
        "suspicious objects: {}  embedded: {}  clusters: {}  selected: {:?}",
        report.anomaly.n_objects, report.n_embedded, report.n_clusters, report.selected_clusters
    );
    if let Some(e) = &report.eval {
        print_eval(e);
    }
}

fn print_eval(e: &EvalSummary) {
    println!(
        "novel IoU: {:.4}  mIoU_C initial: {:.4}  extended: {:.4}  drop: {:.4}  mIoU_C+: {:.4}",
        e.novel_iou, e.initial.miou_known, e.extended.miou_known, e.known_miou_drop, e.extended.miou_all
    );
    if let Some(r) = e.regressor_pearson {
        println!("regressor pearson: {r:.4}");
    }
}

fn run_one(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<u8> {
    Ok(match run_pipeline(cfg, out, opts)? {
        RunOutcome::Completed(report) => {
            print_report(out, &report);
            EXIT_OK
        }
        RunOutcome::NoNovelty(report) => {
            print_report(out, &report);
            EXIT_NO_NOVELTY
        }
        RunOutcome::Stopped(stage) => {
            println!("stopped after stage {stage}");
            EXIT_OK
        }
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn evaluate(runs: &[PathBuf], out: Option<&Path>) -> Result<u8> {
    let mut summaries = Vec::new();
    for run in runs {
        let cfg = PipelineConfig::read(run.join("config.json"))
            .with_context(|| format!("{} is not a run directory", run.display()))?;
        match run_stage(&cfg, run, Stage::Eval)? {
            StageOutcome::Done => {
                let report = emit_report(run)?;
                print_report(run, &report);
                summaries.push(report.eval.context("evaluation produced no summary")?);
            }
            StageOutcome::NoNovelty(reason) => println!("{}: no novelty ({reason})", run.display()),
        }
    }
    if summaries.is_empty() {
        return Ok(EXIT_NO_NOVELTY);
    }
    let column = |f: fn(&EvalSummary) -> f64| mean_std(&summaries.iter().map(f).collect::<Vec<_>>());
    let rows = [
        ("novel_iou", column(|e| e.novel_iou)),
        ("miou_known_initial", column(|e| e.initial.miou_known)),
        ("miou_known_extended", column(|e| e.extended.miou_known)),
        ("miou_all_extended", column(|e| e.extended.miou_all)),
        ("known_miou_drop", column(|e| e.known_miou_drop)),
    ];
    println!("aggregate over {} runs (mean, std):", summaries.len());
    for (name, (m, s)) in &rows {
        println!("  {name:<22} {m:.4} {s:.4}");
    }
    if let Some(path) = out {
        let doc = json!({
            "runs": runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
            "evaluated": summaries.len(),
            "metrics": rows.iter().map(|(n, (m, s))| (n.to_string(), json!({"mean": m, "std": s}))).collect::<serde_json::Map<_, _>>(),
        });
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(EXIT_OK)
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen { out, seed, spec, scenario } => {
            let spec = match spec {
                Some(path) => serde_json::from_str(&fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => match scenario.as_str() {
                    "default" => ScenarioSpec::default(),
                    "negative-control" => ScenarioSpec::negative_control(),
                    other => bail!("unknown scenario {other:?}"),
                },
            };
            let manifest = gen_synthetic(&spec, seed, &out)?;
            println!("wrote {} train and {} test images to {}", manifest.train.len(), manifest.test.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Run { cfg, seed, out, resume, until } => {
            let until = until.as_deref().map(Stage::from_name).transpose()?;
            let opts = RunOptions { resume, until };
            if seed.len() <= 1 {
                return run_one(&cfg.load(seed.first().copied())?, &out, &opts);
            }
            let mut code = EXIT_OK;
            for s in seed {
                let dir = out.join(format!("seed-{s}"));
                code = code.max(run_one(&cfg.load(Some(s))?, &dir, &opts)?);
            }
            Ok(code)
        }
        Command::Stage { name, cfg, seed, out } => {
            let stage = Stage::from_name(&name)?;
            match run_stage(&cfg.load(seed)?, &out, stage)? {
                StageOutcome::Done => {
                    println!("stage {stage} done");
                    Ok(EXIT_OK)
                }
                StageOutcome::NoNovelty(reason) => {
                    println!("no novelty: {reason}");
                    Ok(EXIT_NO_NOVELTY)
                }
            }
        }
        Command::Report { out } => {
            let report = emit_report(&out)?;
            print_report(&out, &report);
            Ok(if report.no_novelty.is_some() { EXIT_NO_NOVELTY } else { EXIT_OK })
        }
        Command::Eval { runs, out } => evaluate(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_OK });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
