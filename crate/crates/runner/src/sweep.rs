//! Sweep orchestration: the Cartesian product of axis values and seeds.
//!
//! Each cell resolves to a run id before any work happens; ids already in
//! the ledger are skipped, so re-entering a finished sweep writes nothing.
//! Cells run in-process when `workers == 1`, otherwise as child processes
//! of this binary, each writing to a private ledger that the parent merges
//! (the results file keeps a single appender). The checkpoint store is
//! shared either way: writes are atomic renames of deterministic content,
//! so concurrent writers of the same stage are benign.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use icl_core::error::{Error, Result};
use icl_core::trainer::RunStatus;

use crate::config::{self, ExperimentConfig};
use crate::ledger::Ledger;
use crate::runs;

#[derive(Debug, Default, Serialize)]
pub struct SweepSummary {
    pub cells: usize,
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
    pub new_rows: usize,
}

/// One grid cell: the dotted overrides that produce it, plus its seed.
#[derive(Debug, Clone)]
pub struct Cell {
    pub sets: Vec<String>,
    pub seed: u64,
}

/// Expands `sweep.axes` x `sweep.seeds` in sorted-axis, listed-value order.
pub fn expand(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let axes: Vec<(&String, &Vec<Value>)> = cfg.sweep.axes.iter().collect();
    for (key, values) in &axes {
        if values.is_empty() {
            return Err(Error::config(format!("sweep axis {key} has no values")));
        }
    }
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for combo in &combos {
            for v in *values {
                let mut c = combo.clone();
                c.push(format!("{key}={v}"));
                next.push(c);
            }
        }
        combos = next;
    }
    let mut cells = Vec::with_capacity(combos.len() * cfg.sweep.seeds.len());
    for combo in combos {
        for &seed in &cfg.sweep.seeds {
            cells.push(Cell { sets: combo.clone(), seed });
        }
    }
    Ok(cells)
}

/// Resolves one cell's config from the sweep's base JSON tree.
pub fn cell_config(base_tree: &Value, cell: &Cell) -> Result<ExperimentConfig> {
    let mut tree = base_tree.clone();
    for s in &cell.sets {
        config::apply_set(&mut tree, s)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| Error::config(format!("sweep cell {:?}: {e}", cell.sets)))?;
    cfg.seed = cell.seed;
    config::resolve(&mut cfg)?;
    Ok(cfg)
}

/// Runs every cell. `base_tree` is the config file content after `--set`
/// flags, before deserialization, so axis overrides compose with it.
pub fn run_sweep(
    base_tree: &Value,
    cfg: &ExperimentConfig,
    out: &Path,
    ledger: &mut Ledger,
) -> Result<SweepSummary> {
    let cells = expand(cfg)?;
    let mut summary = SweepSummary { cells: cells.len(), ..SweepSummary::default() };

    if cfg.sweep.workers <= 1 {
        for cell in &cells {
            run_cell_in_process(base_tree, cell, out, ledger, &mut summary)?;
        }
        return Ok(summary);
    }

    run_cells_in_children(base_tree, &cells, cfg.sweep.workers, out, ledger, &mut summary)?;
    Ok(summary)
}

fn run_cell_in_process(
    base_tree: &Value,
    cell: &Cell,
    out: &Path,
    ledger: &mut Ledger,
    summary: &mut SweepSummary,
) -> Result<()> {
    let cell_cfg = cell_config(base_tree, cell)?;
    let plan = runs::plan(&cell_cfg)?;
    let id = plan.main_run_id();
    if ledger.contains(&id) {
        summary.skipped += 1;
        return Ok(());
    }
    match runs::execute(&plan, out, ledger) {
        Ok(report) => {
            summary.trained += 1;
            summary.new_rows += report.records.iter().filter(|(_, new)| *new).count();
            if report.failed() {
                summary.failed += 1;
            }
            eprintln!(
                "cell {:?} seed {} -> {} ({})",
                cell.sets,
                cell.seed,
                report.main_record().status.name(),
                id
            );
            Ok(())
        }
        Err(Error::Numeric(msg)) => {
            // Mark the cell failed so re-entry does not retry it forever.
            let rec = failed_record(&plan, &msg);
            if ledger.append(&rec)? {
                summary.new_rows += 1;
            }
            summary.failed += 1;
            eprintln!("cell {:?} seed {} -> numeric failure: {msg}", cell.sets, cell.seed);
            Ok(())
        }
        Err(other) => Err(other),
    }
}

/// Ledger row for a cell that aborted with a numeric failure before its
/// outcome existed.
fn failed_record(plan: &runs::RunPlan, _msg: &str) -> icl_core::records::RunRecord {
    icl_core::records::RunRecord {
        run_id: plan.main_run_id(),
        seed: plan.seed,
        status: RunStatus::Diverged,
        steps: 0,
        wall_clock_secs: 0.0,
        final_train_loss: f64::NAN,
        data: plan.main.data.clone(),
        model: plan.main.model.clone(),
        train: plan.main.train.clone(),
        metrics: None,
        encoder_acc: None,
        layers: None,
    }
}

fn run_cells_in_children(
    base_tree: &Value,
    cells: &[Cell],
    workers: usize,
    out: &Path,
    ledger: &mut Ledger,
    summary: &mut SweepSummary,
) -> Result<()> {
    let exe = std::env::current_exe()?;
    let cell_dir = out.join("cells");
    std::fs::create_dir_all(&cell_dir)?;

    // Pre-resolve ids; skip known cells without spawning.
    let mut pending: Vec<(usize, String)> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let cfg = cell_config(base_tree, cell)?;
        let id = runs::plan(&cfg)?.main_run_id();
        if ledger.contains(&id) {
            summary.skipped += 1;
        } else {
            let cfg_path = cell_dir.join(format!("{id}.json"));
            std::fs::write(&cfg_path, config::echo_json(&cfg))?;
            pending.push((i, id));
        }
    }

    let mut running: Vec<(std::process::Child, String)> = Vec::new();
    let mut queue = pending.into_iter();
    loop {
        while running.len() < workers {
            let Some((_, id)) = queue.next() else { break };
            let child = std::process::Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(cell_dir.join(format!("{id}.json")))
                .arg("--out")
                .arg(out)
                .arg("--ledger")
                .arg(cell_dir.join(format!("{id}.ledger.csv")))
                .stdout(std::process::Stdio::null())
                .spawn()?;
            running.push((child, id));
        }
        let Some((mut child, id)) = running.pop() else { break };
        let status = child.wait()?;
        match status.code() {
            Some(0) | Some(3) => {
                if status.code() == Some(3) {
                    summary.failed += 1;
                }
                summary.trained += 1;
                let child_ledger = Ledger::open(&cell_dir.join(format!("{id}.ledger.csv")))?;
                for rec in child_ledger.records()? {
                    if ledger.append(&rec)? {
                        summary.new_rows += 1;
                    }
                }
            }
            code => {
                return Err(Error::config(format!(
                    "worker for cell {id} exited with {code:?}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_is_the_cartesian_product() {
        // Axis keys contain dots themselves, so build the spec directly.
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.axes.insert("data.k2".into(), vec![64.into(), 256.into()]);
        cfg.sweep.axes.insert("data.b".into(), vec![1.into(), 4.into()]);
        cfg.sweep.seeds = vec![0, 1, 2, 3, 4];
        let cells = expand(&cfg).unwrap();
        assert_eq!(cells.len(), 20);
        // Sorted axis order: data.b varies slowest.
        assert_eq!(cells[0].sets, vec!["data.b=1", "data.k2=64"]);
        assert_eq!(cells[0].seed, 0);
        assert_eq!(cells[19].sets, vec!["data.b=4", "data.k2=256"]);
        assert_eq!(cells[19].seed, 4);
    }

    #[test]
    fn cell_config_applies_axis_values() {
        let tree = serde_json::json!({"data": {"mode": "unimodal"}});
        let cell = Cell { sets: vec!["data.k1=128".into()], seed: 7 };
        let cfg = cell_config(&tree, &cell).unwrap();
        assert_eq!(cfg.data.k1, 128);
        assert_eq!(cfg.seed, 7);
    }
}
