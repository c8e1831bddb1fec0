//! `pspdet`: training, evaluation and the multi-seed experiments of the
//! per-sample prototype detector on the synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use pspdet_core::config::RunConfig;
use pspdet_core::detector::Detector;
use pspdet_core::eval::{export_embeddings, Stage};
use pspdet_core::experiment::{
    ablate, cluster_report, compare, evaluate, sweep_base_k, train_base, world_for, ArmResult,
};
use pspdet_core::trainer::{finetune, Phase, StepRecord};
use pspdet_core::verify::gradient_suite;
use pspdet_core::{Error, ParamStore};

#[derive(Parser)]
#[command(name = "pspdet", version, about = "Few-shot detection with per-sample prototypes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-key override, applied after the file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (`out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// First seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds for multi-run commands (`runs`).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Evaluation shot count (`train.k_eval`).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Base and finetune iteration count.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Worker threads for multi-seed commands, 0 for all cores (`threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every operation and the end-to-end loss.
    Gradcheck,
    /// Base training and finetuning; writes snapshot.params and losses.jsonl.
    Train,
    /// Scores a snapshot on the test pool; writes metrics.json.
    Eval {
        /// Snapshot to score [default: OUT/snapshot.params].
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// ISAM/QSAM on/off grid over all seeds; writes ablate.json.
    Ablate,
    /// Per-sample against averaged prototypes over all seeds; writes compare.json.
    Compare,
    /// Support clustering after base training; writes cluster.json and
    /// embeddings_<stage>.csv.
    ClusterReport,
    /// Base training at several shot counts; writes sweep_basek.json.
    SweepBasek {
        /// Comma-separated base-training shot counts.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        base_ks: Vec<usize>,
    },
}

impl Common {
    fn resolve(&self) -> pspdet_core::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                overrides.push(format!("{key}={v}"));
            }
        };
        push("out", self.out.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("runs", self.seeds.map(|v| v.to_string()));
        push("train.k_eval", self.k.map(|v| v.to_string()));
        push("train.base_iterations", self.iterations.map(|v| v.to_string()));
        push("train.finetune_iterations", self.iterations.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match cli.common.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.common.print_config {
        print!("{}", cfg.to_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("{}", Cli::command().render_usage());
        return ExitCode::from(2);
    };
    match run(command, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::Config { .. }));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

/// Runs one subcommand; `Ok(false)` is a failed property.
fn run(command: &Command, cfg: &RunConfig) -> Result<bool> {
    let out = Path::new(&cfg.out);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match command {
        Command::Gradcheck => {
            let report = gradient_suite(cfg.seed)?;
            for e in &report.entries {
                let mark = if e.max_rel_error <= report.tolerance { "ok  " } else { "FAIL" };
                println!("{mark} {:<64} {:.3e}", e.name, e.max_rel_error);
            }
            println!(
                "gradcheck: {} checks, max rel error {:.3e}, tolerance {:.0e}: {}",
                report.entries.len(),
                report.max_rel_error,
                report.tolerance,
                if report.pass { "pass" } else { "FAIL" }
            );
            write_json(out, "gradcheck.json", cfg, "report", &report)?;
            Ok(report.pass)
        }
        Command::Train => {
            let (base, base_trace) = train_base(cfg, cfg.seed)?;
            let split = world_for(cfg, cfg.train.k_eval, cfg.seed)?;
            let (model, ft_trace) = finetune(&base, &split, &cfg.train_config(Phase::Finetune, cfg.seed))?;
            model.params.save(&out.join("snapshot.params"))?;
            write_losses(&out.join("losses.jsonl"), base_trace.iter().chain(&ft_trace))?;
            println!(
                "trained seed {}: {} base + {} finetune steps -> {}",
                cfg.seed,
                base_trace.len(),
                ft_trace.len(),
                out.join("snapshot.params").display()
            );
            Ok(true)
        }
        Command::Eval { snapshot } => {
            let path = snapshot.clone().unwrap_or_else(|| out.join("snapshot.params"));
            let params = ParamStore::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let model = Detector::from_params(cfg.model.clone(), params)?;
            let split = world_for(cfg, cfg.train.k_eval, cfg.seed)?;
            let report = evaluate(&model, &split, cfg.eval.scenes)?;
            println!(
                "seed {} K={}: novel AP50 {:.4}, base AP50 {:.4}",
                report.seed, report.k, report.mean_novel_ap50, report.mean_base_ap50
            );
            let metrics = report.metrics();
            write_json_value(
                out,
                "metrics.json",
                json!({ "config": cfg.to_json_value(), "metrics": metrics, "report": report }),
            )?;
            Ok(true)
        }
        Command::Ablate => {
            let arms = ablate(cfg)?;
            print_arms(&arms);
            write_json(out, "ablate.json", cfg, "arms", &arms)?;
            Ok(true)
        }
        Command::Compare => {
            let arms = compare(cfg)?;
            print_arms(&arms);
            write_json(out, "compare.json", cfg, "arms", &arms)?;
            Ok(true)
        }
        Command::ClusterReport => {
            let (base, _) = train_base(cfg, cfg.seed)?;
            let split = world_for(cfg, cfg.train.k_eval, cfg.seed)?;
            let (report, emb) = cluster_report(&base, &split)?;
            for stage in Stage::ALL {
                let path = out.join(format!("embeddings_{}.csv", stage.as_str()));
                export_embeddings(&emb.stages[&stage], &emb.labels, stage, &path)?;
            }
            println!(
                "seed {} K={} ({} vectors): raw {:.3}, pre_isam {:.3}, post_isam {:.3}",
                report.seed,
                report.k,
                report.n_vectors,
                report.accuracy_raw,
                report.accuracy_pre_isam,
                report.accuracy_post_isam
            );
            write_json(out, "cluster.json", cfg, "report", &report)?;
            Ok(true)
        }
        Command::SweepBasek { base_ks } => {
            let arms = sweep_base_k(cfg, base_ks)?;
            print_arms(&arms);
            write_json(out, "sweep_basek.json", cfg, "arms", &arms)?;
            Ok(true)
        }
    }
}

fn print_arms(arms: &[ArmResult]) {
    for arm in arms {
        let spread = arm
            .stats
            .as_ref()
            .and_then(|s| s.get("mean_novel_ap50"))
            .map(|s| format!("mean {:.4} ± {:.4}", s.mean, s.std))
            .unwrap_or_default();
        println!(
            "{:<12} K={} runs={}: median novel AP50 {:.4} {spread}",
            arm.name,
            arm.k,
            arm.runs.len(),
            arm.median_novel_ap50
        );
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, cfg: &RunConfig, key: &str, payload: &T) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("config".into(), cfg.to_json_value());
    doc.insert(key.into(), serde_json::to_value(payload)?);
    write_json_value(dir, name, Value::Object(doc))
}

fn write_json_value(dir: &Path, name: &str, doc: Value) -> Result<()> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_losses<'a>(path: &Path, records: impl Iterator<Item = &'a StepRecord>) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
