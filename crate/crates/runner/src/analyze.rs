//! Cross-run analysis commands over the results ledger, plus the
//! representation-alignment computation on a trained model.
//!
//! All ledger statistics run over completed rows (converged or step-capped);
//! diverged rows are excluded and counted in the output.

use ndarray::Array2;
use serde_json::json;

use icl_core::analysis::{
    cka_linear, complexity_threshold, forest_cv_r2, forest_fit, forest_r2, mean_std, paired_l2,
    pearson, ForestConfig, GridCell,
};
use icl_core::datagen::EpisodeSource;
use icl_core::error::{Error, Result};
use icl_core::net::forward::{encode_m2, project_m2};
use icl_core::net::ParamSet;
use icl_core::scalar::Scalar;

use crate::export::{completed, metric_index};
use crate::ledger::Ledger;

/// Completed-row values of the named metric columns, skipping rows with any
/// empty requested column. Returns (matrix rows, run ids, diverged count).
fn metric_matrix(
    ledger: &Ledger,
    names: &[String],
) -> Result<(Vec<Vec<f64>>, Vec<String>, usize)> {
    let (header, rows) = ledger.raw_rows()?;
    let status_col = header
        .iter()
        .position(|h| h == "status")
        .expect("schema has status");
    let id_col = header.iter().position(|h| h == "run_id").expect("schema has run_id");
    let cols: Vec<usize> =
        names.iter().map(|n| metric_index(&header, n)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut ids = Vec::new();
    let mut diverged = 0usize;
    for row in &rows {
        if !completed(&row[status_col]) {
            diverged += 1;
            continue;
        }
        if cols.iter().any(|&c| row[c].is_empty()) {
            continue;
        }
        let vals: Vec<f64> = cols
            .iter()
            .map(|&c| {
                row[c].parse().map_err(|_| {
                    Error::config(format!("non-numeric ledger value {:?}", row[c]))
                })
            })
            .collect::<Result<_>>()?;
        out.push(vals);
        ids.push(row[id_col].clone());
    }
    Ok((out, ids, diverged))
}

/// `analyze pearson`: correlation of two ledger columns.
pub fn pearson_report(ledger: &Ledger, x: &str, y: &str) -> Result<serde_json::Value> {
    let (rows, _, diverged) = metric_matrix(ledger, &[x.to_string(), y.to_string()])?;
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let r = pearson(&xs, &ys)?;
    Ok(json!({ "x": x, "y": y, "n": xs.len(), "excluded_diverged": diverged, "r": r }))
}

/// `analyze forest`: random-forest R2 of `target` from `features`.
pub fn forest_report(
    ledger: &Ledger,
    features: &[String],
    target: &str,
    cfg: &ForestConfig,
    cv_splits: usize,
    train_frac: f64,
) -> Result<serde_json::Value> {
    if features.is_empty() {
        return Err(Error::config("forest needs at least one feature"));
    }
    let mut names = features.to_vec();
    names.push(target.to_string());
    let (rows, ids, diverged) = metric_matrix(ledger, &names)?;
    if rows.len() < 10 {
        return Err(Error::config(format!(
            "forest needs >= 10 completed rows, have {}",
            rows.len()
        )));
    }
    let p = features.len();
    let mut x = Array2::zeros((rows.len(), p));
    let mut y = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for j in 0..p {
            x[(i, j)] = row[j];
        }
        y.push(row[p]);
    }
    let model = forest_fit(&x, &y, cfg)?;
    let train_r2 = forest_r2(&model, &x, &y)?;
    let ids_u64: Vec<u64> = ids
        .iter()
        .map(|id| {
            u64::from_str_radix(id, 16)
                .map_err(|_| Error::config(format!("malformed run id {id:?}")))
        })
        .collect::<Result<_>>()?;
    let splits = forest_cv_r2(&x, &y, &ids_u64, cfg, cv_splits, train_frac, cfg.seed)?;
    let (mean, std) = mean_std(&splits);
    Ok(json!({
        "features": features,
        "target": target,
        "n": y.len(),
        "excluded_diverged": diverged,
        "train_r2": train_r2,
        "cv_r2_mean": mean,
        "cv_r2_std": std,
        "cv_r2_splits": splits,
    }))
}

/// `analyze threshold`: minimal K*sqrt(B) over qualifying grid cells.
pub fn threshold_report(
    ledger: &Ledger,
    k_col: &str,
    icl_threshold: f64,
    min_seeds: usize,
) -> Result<serde_json::Value> {
    let (header, rows) = ledger.raw_rows()?;
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("unknown column {name:?}")))
    };
    if k_col != "k1" && k_col != "k2" {
        return Err(Error::config("k column must be k1 or k2"));
    }
    let kc = find(k_col)?;
    let bc = find("b")?;
    let ic = find("icl")?;
    let sc = find("status")?;
    let mut cells: std::collections::BTreeMap<(u64, u64), Vec<f64>> =
        std::collections::BTreeMap::new();
    for row in &rows {
        if !completed(&row[sc]) || row[ic].is_empty() {
            continue;
        }
        let k: u64 = row[kc].parse().map_err(|_| Error::config("bad k value"))?;
        let b: u64 = row[bc].parse().map_err(|_| Error::config("bad b value"))?;
        let icl: f64 = row[ic].parse().map_err(|_| Error::config("bad icl value"))?;
        cells.entry((k, b)).or_default().push(icl);
    }
    let grid: Vec<GridCell> = cells
        .iter()
        .map(|(&(k, b), vals)| GridCell {
            k: k as f64,
            b: b as f64,
            icl_mean: vals.iter().sum::<f64>() / vals.len() as f64,
            n_seeds: vals.len(),
        })
        .collect();
    let threshold = complexity_threshold(&grid, icl_threshold, min_seeds)?;
    Ok(json!({
        "k_column": k_col,
        "icl_threshold": icl_threshold,
        "min_seeds": min_seeds,
        "cells": grid,
        "threshold": threshold,
    }))
}

/// Pairing rule for the alignment analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignPair {
    /// Pair each projected secondary item with the primary item from the
    /// same episode bundle.
    Sample,
    /// Pair each secondary class prototype with the lowest-index primary
    /// class prototype sharing its label.
    Prototype,
}

impl AlignPair {
    pub fn name(self) -> &'static str {
        match self {
            AlignPair::Sample => "sample",
            AlignPair::Prototype => "prototype",
        }
    }
}

/// Pushes one (projected secondary, paired primary) row pair.
fn push_pair<T: Scalar>(
    params: &ParamSet<T>,
    x2: ndarray::ArrayView1<f32>,
    y1: ndarray::ArrayView1<f32>,
    xs: &mut Vec<Vec<f64>>,
    ys: &mut Vec<Vec<f64>>,
) -> Result<()> {
    let raw: ndarray::Array1<T> = x2.mapv(|v| T::from_f64c(v as f64));
    let feats = if params.encoder.is_some() { encode_m2(params, &raw)? } else { raw };
    let projected = project_m2(params, &feats)?;
    xs.push(projected.iter().map(|v| v.to_f64c()).collect());
    ys.push(y1.iter().map(|&v| v as f64).collect());
    Ok(())
}

/// Compares projected secondary representations against paired primary
/// vectors: linear CKA plus mean paired distance.
pub fn alignment_report<T: Scalar>(
    params: &ParamSet<T>,
    source: &EpisodeSource,
    pair: AlignPair,
    max_rows: usize,
    seed: u64,
) -> Result<serde_json::Value> {
    let bank2 = source
        .bank2
        .as_ref()
        .ok_or_else(|| Error::config("alignment needs a multimodal data spec"))?;
    if max_rows < 2 {
        return Err(Error::config("alignment needs at least 2 rows"));
    }
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    match pair {
        AlignPair::Sample => {
            let mut rng = icl_core::rng::rng_for(seed, icl_core::rng::tags::PROBE);
            while xs.len() < max_rows {
                let ep = source.episode(icl_core::datagen::EvalMode::Train, &mut rng)?;
                let m2 = ep.m2_raw.as_ref().expect("multimodal episode");
                let mut slot = 0usize;
                for (pos, role) in ep.roles.iter().enumerate() {
                    use icl_core::datagen::Role;
                    if matches!(role, Role::Item1 | Role::QueryItem1) {
                        if xs.len() < max_rows {
                            push_pair(params, m2.row(slot), ep.tokens.row(pos), &mut xs, &mut ys)?;
                        }
                        slot += 1;
                    }
                }
            }
        }
        AlignPair::Prototype => {
            // Class ids map to labels as k mod L, so the lowest-index
            // primary class sharing label l is class l itself.
            let n = bank2.k().min(max_rows);
            for c in 0..n {
                let label = bank2.class_to_label[c];
                push_pair(params, bank2.mu.row(c), source.bank1.mu.row(label), &mut xs, &mut ys)?;
            }
        }
    }
    let n = xs.len();
    let d = xs[0].len();
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = xs[i][j];
            y[(i, j)] = ys[i][j];
        }
    }
    let cka = cka_linear(&x, &y)?;
    let l2 = paired_l2(&x, &y)?;
    Ok(json!({
        "pairing": pair.name(),
        "n_rows": n,
        "cka": cka,
        "paired_l2": l2,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use icl_core::datagen::{DataSpec, Mode};
    use icl_core::evalsuite::{EvalConfig, EvalSummary};
    use icl_core::net::ModelConfig;
    use icl_core::records::{run_id, RunRecord};
    use icl_core::trainer::{RunStatus, TrainConfig};

    fn record(k1: usize, seed: u64, icl: f64, ind: f64) -> RunRecord {
        let data = DataSpec { mode: Mode::Unimodal, k1, ..DataSpec::default() };
        let model = ModelConfig { max_t: data.t(), ..ModelConfig::default() };
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        let agg = icl_core::circuits::LayerAggregate {
            ph1_max: 0.2 + 0.5 * icl,
            ph1_mean: 0.1,
            ph2_max: 0.1,
            ph2_mean: 0.05,
            ind_max: ind,
            ind_mean: ind * 0.8,
            tla_max: ind,
            tla_mean: ind * 0.5,
        };
        RunRecord {
            run_id: run_id(&data, &model, &train, &eval, seed),
            seed,
            status: RunStatus::Converged,
            steps: 100,
            wall_clock_secs: 1.0,
            final_train_loss: 0.5,
            data,
            model,
            train,
            metrics: Some(EvalSummary {
                iwl: 1.0 - icl,
                icl_novel: icl,
                icl_swap: icl,
                icl,
                cla: icl,
            }),
            encoder_acc: None,
            layers: Some((agg.clone(), agg)),
        }
    }

    fn filled_ledger(dir: &std::path::Path) -> Ledger {
        let mut ledger = Ledger::open(&dir.join("l.csv")).unwrap();
        for seed in 0..12u64 {
            let icl = 0.05 + 0.08 * seed as f64;
            let k1 = 32 * (seed as usize + 1);
            ledger.append(&record(k1, seed, icl.min(0.99), 0.9 * icl)).unwrap();
        }
        ledger
    }

    #[test]
    fn pearson_report_counts_rows() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = filled_ledger(dir.path());
        let rep = pearson_report(&ledger, "layer2_ind_max", "icl").unwrap();
        assert_eq!(rep["n"], 12);
        assert!(rep["r"].as_f64().unwrap() > 0.99);
    }

    #[test]
    fn forest_report_runs_cv() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = filled_ledger(dir.path());
        let cfg = ForestConfig { n_trees: 20, feature_subsample: 1.0, ..ForestConfig::default() };
        let rep = forest_report(
            &ledger,
            &["layer1_ph1_max".into(), "layer2_ind_max".into()],
            "icl",
            &cfg,
            3,
            0.8,
        )
        .unwrap();
        assert_eq!(rep["n"], 12);
        assert!(rep["train_r2"].as_f64().unwrap() > 0.5);
        assert_eq!(rep["cv_r2_splits"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn threshold_report_reads_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::open(&dir.path().join("l.csv")).unwrap();
        for seed in 0..3u64 {
            ledger.append(&record(2048, seed, 0.97, 0.8)).unwrap();
            ledger.append(&record(128, seed + 16, 0.2, 0.1)).unwrap();
        }
        let rep = threshold_report(&ledger, "k1", 0.95, 3).unwrap();
        // Default B = 4: 2048 * 2 = 4096.
        assert_eq!(rep["threshold"], 4096.0);
        assert_eq!(rep["cells"].as_array().unwrap().len(), 2);
    }
}
