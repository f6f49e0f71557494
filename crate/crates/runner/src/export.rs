//! Plot-ready aggregation: group ledger rows and emit a long-format CSV
//! (group columns, metric, mean, std, n).

use std::collections::BTreeMap;

use icl_core::analysis::mean_std;
use icl_core::error::{Error, Result};

use crate::ledger::Ledger;

/// Columns that hold per-run numbers and may be aggregated.
pub const METRIC_COLUMNS: &[&str] = &[
    "steps",
    "wall_clock_secs",
    "final_train_loss",
    "iwl",
    "icl_novel",
    "icl_swap",
    "icl",
    "cla",
    "encoder_acc",
    "layer1_ph1_max",
    "layer1_ph1_mean",
    "layer1_ph2_max",
    "layer1_ph2_mean",
    "layer1_ind_max",
    "layer1_ind_mean",
    "layer1_tla_max",
    "layer1_tla_mean",
    "layer2_ph1_max",
    "layer2_ph1_mean",
    "layer2_ph2_max",
    "layer2_ph2_mean",
    "layer2_ind_max",
    "layer2_ind_mean",
    "layer2_tla_max",
    "layer2_tla_mean",
];

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::config(format!("unknown column {name:?}")))
}

/// Validates a metric name against the aggregatable set.
pub fn metric_index(header: &[String], name: &str) -> Result<usize> {
    if !METRIC_COLUMNS.contains(&name) {
        return Err(Error::config(format!(
            "unknown metric {name:?}; choose one of {METRIC_COLUMNS:?}"
        )));
    }
    column_index(header, name)
}

/// Rows whose status admits metric aggregation.
pub fn completed(status: &str) -> bool {
    status == "converged" || status == "max_steps"
}

/// Groups completed rows by `group_by` columns and aggregates `metric`.
/// Returns CSV text with header `group_cols...,metric,mean,std,n`.
pub fn export_grouped(
    ledger: &Ledger,
    group_by: &[String],
    metric: &str,
    include_diverged: bool,
) -> Result<String> {
    if ledger.is_empty() {
        return Err(Error::config("ledger has no rows to export"));
    }
    let (header, rows) = ledger.raw_rows()?;
    let status_col = column_index(&header, "status")?;
    let metric_col = metric_index(&header, metric)?;
    let group_cols: Vec<usize> = group_by
        .iter()
        .map(|g| column_index(&header, g))
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        if !include_diverged && !completed(&row[status_col]) {
            continue;
        }
        let raw = &row[metric_col];
        if raw.is_empty() {
            continue; // stage kinds that lack this metric
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::config(format!("row has non-numeric {metric}: {raw:?}")))?;
        let key: Vec<String> = group_cols.iter().map(|&c| row[c].clone()).collect();
        groups.entry(key).or_default().push(v);
    }

    let mut out = String::new();
    for g in group_by {
        out.push_str(g);
        out.push(',');
    }
    out.push_str("metric,mean,std,n\n");
    for (key, vals) in &groups {
        let (mean, std) = mean_std(vals);
        for k in key {
            out.push_str(k);
            out.push(',');
        }
        out.push_str(&format!("{metric},{mean},{std},{}\n", vals.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use icl_core::datagen::{DataSpec, Mode};
    use icl_core::evalsuite::{EvalConfig, EvalSummary};
    use icl_core::net::ModelConfig;
    use icl_core::records::{run_id, RunRecord};
    use icl_core::trainer::{RunStatus, TrainConfig};

    fn record(k1: usize, seed: u64, icl: f64, status: RunStatus) -> RunRecord {
        let data =
            DataSpec { mode: Mode::Unimodal, k1, ..DataSpec::default() };
        let model = ModelConfig { max_t: data.t(), ..ModelConfig::default() };
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        let metrics = (status != RunStatus::Diverged).then_some(EvalSummary {
            iwl: 0.1,
            icl_novel: icl,
            icl_swap: icl,
            icl,
            cla: icl,
        });
        RunRecord {
            run_id: run_id(&data, &model, &train, &eval, seed),
            seed,
            status,
            steps: 5,
            wall_clock_secs: 1.0,
            final_train_loss: 1.0,
            data,
            model,
            train,
            metrics,
            encoder_acc: None,
            layers: None,
        }
    }

    #[test]
    fn grouped_export_reports_mean_std_n() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::open(&dir.path().join("l.csv")).unwrap();
        ledger.append(&record(128, 0, 0.2, RunStatus::Converged)).unwrap();
        ledger.append(&record(128, 1, 0.4, RunStatus::Converged)).unwrap();
        ledger.append(&record(512, 0, 0.9, RunStatus::Converged)).unwrap();
        ledger.append(&record(512, 1, 0.7, RunStatus::Diverged)).unwrap();

        let csv = export_grouped(&ledger, &["k1".into()], "icl", false).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines[0], "k1,metric,mean,std,n");
        assert_eq!(lines.len(), 3);
        // 0.2/0.4 -> mean 0.3, sample std sqrt(0.02); diverged row excluded.
        let g128: Vec<&str> = lines[1].split(',').collect();
        assert_eq!((g128[0], g128[1], g128[4]), ("128", "icl", "2"));
        assert!((g128[2].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
        assert!((g128[3].parse::<f64>().unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        let g512: Vec<&str> = lines[2].split(',').collect();
        assert_eq!((g512[0], g512[2], g512[4]), ("512", "0.9", "1"));
    }

    #[test]
    fn single_run_group_has_zero_std() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::open(&dir.path().join("l.csv")).unwrap();
        ledger.append(&record(128, 0, 0.5, RunStatus::Converged)).unwrap();
        let csv = export_grouped(&ledger, &["k1".into()], "icl", false).unwrap();
        assert!(csv.contains("128,icl,0.5,0,1"));
    }

    #[test]
    fn unknown_metric_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::open(&dir.path().join("l.csv")).unwrap();
        ledger.append(&record(128, 0, 0.5, RunStatus::Converged)).unwrap();
        assert!(export_grouped(&ledger, &["k1".into()], "run_id", false).is_err());
        assert!(export_grouped(&ledger, &["nope".into()], "icl", false).is_err());
    }
}
