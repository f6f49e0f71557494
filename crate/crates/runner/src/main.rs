//! `icl`: train, evaluate, probe, ablate, sweep, and analyze small
//! in-context-learning transformers from the command line.
//!
//! Exit codes are a stable contract: 0 success, 2 configuration error,
//! 3 numeric failure (divergence, failed gradient check), 1 anything else.

mod analyze;
mod config;
mod export;
mod ledger;
mod runs;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde_json::json;

use icl_core::analysis::ForestConfig;
use icl_core::circuits::{
    identify_heads, knockout_forward, modality_zero, probe_metrics, HeadId, Modality,
};
use icl_core::datagen::{Episode, EpisodeSource, EvalMode};
use icl_core::error::{Error, Result};
use icl_core::evalsuite::{batch_accuracy, eval_episodes, evaluate_all};
use icl_core::net::{checkpoint, forward_batch, init_params, ModelConfig, ParamSet};
use icl_core::rng::{self, tags};
use icl_core::trainer::{grad_check, grad_check_encoder, Stage};

use crate::ledger::Ledger;

#[derive(Parser)]
#[command(name = "icl", version, about = "In-context learning laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every command that reads a config or touches the store.
#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Experiment config (JSON). Absent file = full default experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. --set data.k1=512. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed (overrides the config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and the results ledger.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Results CSV path. Defaults to <out>/ledger.csv.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

impl CommonOpts {
    fn load(&self) -> Result<config::ExperimentConfig> {
        config::load(self.config.as_deref(), &self.sets, self.seed)
    }

    fn ledger_path(&self) -> PathBuf {
        self.ledger.clone().unwrap_or_else(|| self.out.join("ledger.csv"))
    }

    fn open_ledger(&self) -> Result<Ledger> {
        Ledger::open(&self.ledger_path())
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run (plus any pretraining stages) and record it.
    Train {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a trained model on the held-out episode modes.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Explicit checkpoint path (default: the config's stored run).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Episodes per mode (default: the config's eval.n_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Probe attention circuits and report per-head trace metrics.
    Probe {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Probe episodes (default: the config's eval.n_probe).
        #[arg(long)]
        n_probe: Option<usize>,
        /// Also dump raw attention traces (binary tensor file) here.
        #[arg(long)]
        dump_traces: Option<PathBuf>,
        /// Episodes in the trace dump.
        #[arg(long, default_value_t = 4)]
        dump_episodes: usize,
    },
    /// Causal interventions on a trained model.
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Run the config's sweep grid (axes x seeds), reusing finished cells.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Concurrent worker processes (overrides sweep.workers).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Cross-run statistics over the results ledger.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Verify analytic gradients against finite differences (f64).
    GradCheck {
        #[command(flatten)]
        common: CommonOpts,
        /// Batch of episodes (or encoder samples) to differentiate.
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        /// Coordinates sampled per tensor.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        /// Maximum relative error accepted.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Export grouped mean/std of one metric as CSV on stdout.
    Export {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated grouping columns, e.g. k1,b.
        #[arg(long, value_delimiter = ',', required = true)]
        group_by: Vec<String>,
        /// Metric column to aggregate.
        #[arg(long)]
        metric: String,
        /// Include diverged runs (excluded by default).
        #[arg(long)]
        include_diverged: bool,
    },
}

#[derive(Subcommand)]
enum AblateCmd {
    /// Zero selected heads' attention and re-evaluate ICL accuracy.
    Knockout {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Which head to knock out: prev-token, induction, or both arms.
        #[arg(long, default_value = "both")]
        target: KnockoutTarget,
        /// Episodes per mode.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Replace one modality's inputs with zeros and re-evaluate.
    ZeroModality {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Which modality to blank: m1, m2, or both arms.
        #[arg(long, default_value = "both")]
        modality: ModalityArg,
        /// Episodes per mode.
        #[arg(long)]
        episodes: Option<usize>,
    },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum KnockoutTarget {
    PrevToken,
    Induction,
    Both,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModalityArg {
    M1,
    M2,
    Both,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PairingArg {
    Sample,
    Prototype,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Pearson correlation between two ledger columns.
    Pearson {
        #[command(flatten)]
        common: CommonOpts,
        /// First metric column.
        #[arg(long)]
        x: String,
        /// Second metric column.
        #[arg(long)]
        y: String,
    },
    /// Random-forest R2 of a target metric from feature columns.
    Forest {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated feature columns.
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<String>,
        #[arg(long, default_value = "icl")]
        target: String,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long, default_value_t = 2)]
        min_samples_leaf: usize,
        /// Fraction of features considered per split.
        #[arg(long, default_value_t = 1.0 / 3.0)]
        feature_subsample: f64,
        /// Disable bootstrap resampling.
        #[arg(long)]
        no_bootstrap: bool,
        #[arg(long, default_value_t = 0)]
        forest_seed: u64,
        /// Random train/validation splits (grouped by run id).
        #[arg(long, default_value_t = 5)]
        cv_splits: usize,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
    },
    /// CKA and paired distance between projected secondary features and
    /// their paired primary vectors.
    Alignment {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// sample = episode-paired items; prototype = class prototypes.
        #[arg(long, default_value = "sample")]
        pairing: PairingArg,
        /// Row cap (samples or classes).
        #[arg(long, default_value_t = 512)]
        rows: usize,
    },
    /// Minimal K*sqrt(B) whose seed-mean ICL clears a threshold.
    Threshold {
        #[command(flatten)]
        common: CommonOpts,
        /// Which class-count column spans the grid: k1 or k2.
        #[arg(long, default_value = "k1")]
        k_col: String,
        #[arg(long, default_value_t = 0.95)]
        min: f64,
        #[arg(long, default_value_t = 3)]
        min_seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2u8,
                Error::Numeric(_) => 3u8,
                _ => 1u8,
            })
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { common } => cmd_train(&common),
        Cmd::Eval { common, ckpt, episodes } => cmd_eval(&common, ckpt.as_deref(), episodes),
        Cmd::Probe { common, ckpt, n_probe, dump_traces, dump_episodes } => {
            cmd_probe(&common, ckpt.as_deref(), n_probe, dump_traces.as_deref(), dump_episodes)
        }
        Cmd::Ablate(sub) => match sub {
            AblateCmd::Knockout { common, ckpt, target, episodes } => {
                cmd_knockout(&common, ckpt.as_deref(), target, episodes)
            }
            AblateCmd::ZeroModality { common, ckpt, modality, episodes } => {
                cmd_zero_modality(&common, ckpt.as_deref(), modality, episodes)
            }
        },
        Cmd::Sweep { common, workers } => cmd_sweep(&common, workers),
        Cmd::Analyze(sub) => cmd_analyze(sub),
        Cmd::GradCheck { common, episodes, coords, tol } => {
            cmd_grad_check(&common, episodes, coords, tol)
        }
        Cmd::Export { common, group_by, metric, include_diverged } => {
            let ledger = common.open_ledger()?;
            print!("{}", export::export_grouped(&ledger, &group_by, &metric, include_diverged)?);
            Ok(())
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn cmd_train(common: &CommonOpts) -> Result<()> {
    let cfg = common.load()?;
    let plan = runs::plan(&cfg)?;
    let mut ledger = common.open_ledger()?;
    let report = runs::execute(&plan, &common.out, &mut ledger)?;
    let stages: Vec<serde_json::Value> = report
        .records
        .iter()
        .map(|(r, new)| {
            json!({
                "run_id": r.run_id,
                "stage": r.train.stage.name(),
                "status": r.status.name(),
                "steps": r.steps,
                "reused": !new,
            })
        })
        .collect();
    let main = report.main_record();
    print_json(&json!({
        "run_id": main.run_id,
        "seed": main.seed,
        "status": main.status.name(),
        "steps": main.steps,
        "wall_clock_secs": main.wall_clock_secs,
        "final_train_loss": main.final_train_loss,
        "metrics": main.metrics,
        "encoder_acc": main.encoder_acc,
        "stages": stages,
        "checkpoint": report.final_ckpt,
        "ledger": ledger.path(),
        "ledger_rows": ledger.len(),
    }));
    if report.failed() {
        return Err(Error::numeric("training diverged"));
    }
    Ok(())
}

fn cmd_eval(common: &CommonOpts, ckpt: Option<&Path>, episodes: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    let (params, plan) = runs::load_trained(&cfg, &common.out, ckpt)?;
    let source = runs::main_source(&plan)?;
    let n = episodes.unwrap_or(plan.eval.n_episodes);
    let summary = evaluate_all(&params, &plan.main.model, &source, n, plan.seed)?;
    print_json(&json!({
        "run_id": plan.main_run_id(),
        "n_episodes": n,
        "metrics": summary,
    }));
    Ok(())
}

fn cmd_probe(
    common: &CommonOpts,
    ckpt: Option<&Path>,
    n_probe: Option<usize>,
    dump_traces: Option<&Path>,
    dump_episodes: usize,
) -> Result<()> {
    let cfg = common.load()?;
    let (params, plan) = runs::load_trained(&cfg, &common.out, ckpt)?;
    let source = runs::main_source(&plan)?;
    let n = n_probe.unwrap_or(plan.eval.n_probe);
    let metrics = probe_metrics(&params, &plan.main.model, &source, n, plan.seed)?;
    let (prev, ind) = identify_heads(&metrics)?;

    if let Some(path) = dump_traces {
        dump_trace_file(path, &params, &plan.main.model, &source, dump_episodes, plan.seed)?;
    }

    let per_layer: Vec<serde_json::Value> = metrics
        .per_head
        .iter()
        .map(|heads| json!({ "per_head": heads }))
        .collect();
    print_json(&json!({
        "run_id": plan.main_run_id(),
        "n_probe": n,
        "per_layer": per_layer,
        "aggregates": metrics.layers,
        "head_ids": { "prev_token": prev, "induction": ind },
        "trace_dump": dump_traces,
    }));
    Ok(())
}

/// Writes per-episode, per-head attention matrices as named f32 tensors in
/// the checkpoint binary layout.
fn dump_trace_file(
    path: &Path,
    params: &ParamSet<f32>,
    model: &ModelConfig,
    source: &EpisodeSource,
    n_episodes: usize,
    seed: u64,
) -> Result<()> {
    let episodes = eval_episodes(source, EvalMode::IclNovel, n_episodes.max(1), seed)?;
    let refs: Vec<&Episode> = episodes.iter().collect();
    let (_, traces) = forward_batch(params, model, &refs, true)?;
    let traces = traces.expect("capture requested");
    let mut tensors = Vec::new();
    for (e, trace) in traces.iter().enumerate() {
        for (l, layer) in trace.attn.iter().enumerate() {
            for (h, attn) in layer.iter().enumerate() {
                tensors.push((
                    format!("ep{e}.layer{l}.head{h}"),
                    attn.mapv(|v| v as f32).into_dyn(),
                ));
            }
        }
    }
    checkpoint::save_tensors(path, &tensors)
}

/// Accuracy of plain and head-knockout forwards over both ICL modes.
fn icl_under<F>(plan: &runs::RunPlan, source: &EpisodeSource, n: usize, fwd: F) -> Result<serde_json::Value>
where
    F: Fn(&[&Episode]) -> Result<Array2<f32>>,
{
    let mut accs = Vec::with_capacity(2);
    for mode in [EvalMode::IclNovel, EvalMode::IclSwap] {
        let episodes = eval_episodes(source, mode, n, plan.seed)?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        let logits = fwd(&refs)?;
        let (acc, _) = batch_accuracy(&logits, &refs)?;
        accs.push(acc);
    }
    Ok(json!({
        "icl_novel": accs[0],
        "icl_swap": accs[1],
        "icl": 0.5 * (accs[0] + accs[1]),
    }))
}

fn cmd_knockout(
    common: &CommonOpts,
    ckpt: Option<&Path>,
    target: KnockoutTarget,
    episodes: Option<usize>,
) -> Result<()> {
    let cfg = common.load()?;
    let (params, plan) = runs::load_trained(&cfg, &common.out, ckpt)?;
    let source = runs::main_source(&plan)?;
    let model = &plan.main.model;
    let n = episodes.unwrap_or(plan.eval.n_episodes);

    let metrics = probe_metrics(&params, model, &source, plan.eval.n_probe, plan.seed)?;
    let (prev, ind) = identify_heads(&metrics)?;

    let baseline = icl_under(&plan, &source, n, |refs| {
        forward_batch(&params, model, refs, false).map(|(l, _)| l)
    })?;
    let arm = |head: HeadId| -> Result<serde_json::Value> {
        icl_under(&plan, &source, n, |refs| knockout_forward(&params, model, refs, &[head]))
    };
    let mut out = json!({
        "run_id": plan.main_run_id(),
        "n_episodes": n,
        "head_ids": { "prev_token": prev, "induction": ind },
        "baseline": baseline,
    });
    if matches!(target, KnockoutTarget::Induction | KnockoutTarget::Both) {
        out["knockout_induction"] = arm(ind)?;
    }
    if matches!(target, KnockoutTarget::PrevToken | KnockoutTarget::Both) {
        out["knockout_prev_token"] = arm(prev)?;
    }
    print_json(&out);
    Ok(())
}

fn cmd_zero_modality(
    common: &CommonOpts,
    ckpt: Option<&Path>,
    modality: ModalityArg,
    episodes: Option<usize>,
) -> Result<()> {
    let cfg = common.load()?;
    let (params, plan) = runs::load_trained(&cfg, &common.out, ckpt)?;
    let source = runs::main_source(&plan)?;
    let model = &plan.main.model;
    let n = episodes.unwrap_or(plan.eval.n_episodes);

    let full = icl_under(&plan, &source, n, |refs| {
        forward_batch(&params, model, refs, false).map(|(l, _)| l)
    })?;
    let arm = |which: Modality| -> Result<serde_json::Value> {
        icl_under(&plan, &source, n, |refs| {
            let zeroed: Vec<Episode> =
                refs.iter().map(|ep| modality_zero(ep, which)).collect::<Result<_>>()?;
            let zrefs: Vec<&Episode> = zeroed.iter().collect();
            forward_batch(&params, model, &zrefs, false).map(|(l, _)| l)
        })
    };
    let mut out = json!({
        "run_id": plan.main_run_id(),
        "n_episodes": n,
        "chance": 1.0 / plan.main.data.l1 as f64,
        "full": full,
    });
    if matches!(modality, ModalityArg::M2 | ModalityArg::Both) {
        out["zero_m2"] = arm(Modality::M2)?;
    }
    if matches!(modality, ModalityArg::M1 | ModalityArg::Both) {
        out["zero_m1"] = arm(Modality::M1)?;
    }
    print_json(&out);
    Ok(())
}

fn cmd_sweep(common: &CommonOpts, workers: Option<usize>) -> Result<()> {
    let tree = config::load_tree(common.config.as_deref(), &common.sets)?;
    let mut cfg = config::from_tree(tree.clone(), common.seed)?;
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        cfg.sweep.workers = w;
    }
    let mut ledger = common.open_ledger()?;
    let summary = sweep::run_sweep(&tree, &cfg, &common.out, &mut ledger)?;
    print_json(&json!({
        "cells": summary.cells,
        "trained": summary.trained,
        "skipped": summary.skipped,
        "failed": summary.failed,
        "new_rows": summary.new_rows,
        "ledger": ledger.path(),
    }));
    if summary.failed > 0 {
        return Err(Error::numeric(format!("{} sweep cells failed", summary.failed)));
    }
    Ok(())
}

fn cmd_analyze(sub: AnalyzeCmd) -> Result<()> {
    match sub {
        AnalyzeCmd::Pearson { common, x, y } => {
            let ledger = common.open_ledger()?;
            print_json(&analyze::pearson_report(&ledger, &x, &y)?);
        }
        AnalyzeCmd::Forest {
            common,
            features,
            target,
            trees,
            max_depth,
            min_samples_leaf,
            feature_subsample,
            no_bootstrap,
            forest_seed,
            cv_splits,
            train_frac,
        } => {
            let ledger = common.open_ledger()?;
            let cfg = ForestConfig {
                n_trees: trees,
                max_depth,
                min_samples_leaf,
                feature_subsample,
                bootstrap: !no_bootstrap,
                seed: forest_seed,
            };
            print_json(&analyze::forest_report(
                &ledger, &features, &target, &cfg, cv_splits, train_frac,
            )?);
        }
        AnalyzeCmd::Alignment { common, ckpt, pairing, rows } => {
            let cfg = common.load()?;
            let (params, plan) = runs::load_trained(&cfg, &common.out, ckpt.as_deref())?;
            let source = runs::main_source(&plan)?;
            let pair = match pairing {
                PairingArg::Sample => analyze::AlignPair::Sample,
                PairingArg::Prototype => analyze::AlignPair::Prototype,
            };
            let mut report = analyze::alignment_report(&params, &source, pair, rows, plan.seed)?;
            report["run_id"] = json!(plan.main_run_id());
            print_json(&report);
        }
        AnalyzeCmd::Threshold { common, k_col, min, min_seeds } => {
            let ledger = common.open_ledger()?;
            print_json(&analyze::threshold_report(&ledger, &k_col, min, min_seeds)?);
        }
    }
    Ok(())
}

fn cmd_grad_check(common: &CommonOpts, episodes: usize, coords: usize, tol: f64) -> Result<()> {
    let cfg = common.load()?;
    let plan = runs::plan(&cfg)?;
    let stage = plan.main.train.stage;
    let source = runs::main_source(&plan)?;
    let params = init_params::<f64>(&plan.main.model, plan.seed)?;
    let mut rng = rng::rng_for(plan.seed, tags::GRAD_CHECK);

    let report = if stage == Stage::EncoderPretrain {
        let d2 = plan.main.data.d2;
        let mut items = Array2::<f64>::zeros((episodes.max(1), d2));
        let mut targets = Vec::with_capacity(episodes.max(1));
        for i in 0..episodes.max(1) {
            let (k, x) = source.m2_classification_sample(&mut rng)?;
            for (j, v) in x.iter().enumerate() {
                items[(i, j)] = *v as f64;
            }
            targets.push(k);
        }
        grad_check_encoder(&params, &items, &targets, tol, coords, plan.seed)?
    } else {
        let eps: Vec<Episode> = (0..episodes.max(1))
            .map(|_| source.episode(EvalMode::Train, &mut rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Episode> = eps.iter().collect();
        grad_check(&params, &plan.main.model, &refs, stage, tol, coords, plan.seed)?
    };

    let per_tensor: Vec<serde_json::Value> = report
        .per_tensor
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "max_rel_err": t.max_rel_err,
                "coords_checked": t.coords_checked,
                "frozen": t.frozen,
            })
        })
        .collect();
    print_json(&json!({
        "stage": stage.name(),
        "pe_type": plan.main.model.pe_type.name(),
        "episodes": episodes,
        "tolerance": report.tolerance,
        "max_rel_err": report.max_rel_err,
        "passed": report.passed(),
        "failures": report.failures,
        "per_tensor": per_tensor,
    }));
    if !report.passed() {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {:.3e} over tolerance {:.1e}",
            report.max_rel_err, report.tolerance
        )));
    }
    Ok(())
}
