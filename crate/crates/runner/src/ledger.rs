//! Append-only results CSV keyed by run id.
//!
//! The header is written once and validated on every open; a mismatch means
//! the file belongs to a different schema version and is refused rather
//! than migrated. Appends are idempotent: a run id already present is
//! skipped, which is what makes sweep re-entry add zero rows.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use icl_core::error::{Error, Result};
use icl_core::records::RunRecord;

pub struct Ledger {
    path: PathBuf,
    ids: BTreeSet<String>,
}

impl Ledger {
    /// Opens (or creates) the ledger and indexes existing run ids.
    pub fn open(path: &Path) -> Result<Ledger> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let header: Vec<String> =
            RunRecord::header().iter().map(|s| s.to_string()).collect();
        if !path.exists() {
            let mut w = csv::Writer::from_path(path).map_err(csvio)?;
            w.write_record(&header).map_err(csvio)?;
            w.flush()?;
            return Ok(Ledger { path: path.to_path_buf(), ids: BTreeSet::new() });
        }
        let mut r = csv::Reader::from_path(path).map_err(csvio)?;
        let got: Vec<String> =
            r.headers().map_err(csvio)?.iter().map(|s| s.to_string()).collect();
        if got != header {
            return Err(Error::config(format!(
                "{}: header does not match schema (found {} columns, want {})",
                path.display(),
                got.len(),
                header.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for row in r.records() {
            let row = row.map_err(csvio)?;
            if let Some(id) = row.get(1) {
                ids.insert(id.to_string());
            }
        }
        Ok(Ledger { path: path.to_path_buf(), ids })
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.ids.contains(run_id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends a record unless its run id is already present. Returns
    /// whether a row was written.
    pub fn append(&mut self, rec: &RunRecord) -> Result<bool> {
        if self.ids.contains(&rec.run_id) {
            return Ok(false);
        }
        rec.validate()?;
        let file = OpenOptions::new().append(true).open(&self.path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.write_record(rec.to_fields()).map_err(csvio)?;
        w.flush()?;
        self.ids.insert(rec.run_id.clone());
        Ok(true)
    }

    /// Reads every row back as a typed record.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let mut r = csv::Reader::from_path(&self.path).map_err(csvio)?;
        let mut out = Vec::new();
        for row in r.records() {
            let row = row.map_err(csvio)?;
            let fields: Vec<String> = row.iter().map(|s| s.to_string()).collect();
            out.push(RunRecord::from_fields(&fields)?);
        }
        Ok(out)
    }

    /// Reads raw rows plus the header, for column-oriented consumers.
    pub fn raw_rows(&self) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut r = csv::Reader::from_path(&self.path).map_err(csvio)?;
        let header: Vec<String> =
            r.headers().map_err(csvio)?.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for row in r.records() {
            let row = row.map_err(csvio)?;
            rows.push(row.iter().map(|s| s.to_string()).collect());
        }
        Ok((header, rows))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// CSV-layer failures surface as IO errors, not config or numeric ones.
pub(crate) fn csvio(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use icl_core::datagen::DataSpec;
    use icl_core::evalsuite::EvalConfig;
    use icl_core::net::ModelConfig;
    use icl_core::records::run_id;
    use icl_core::trainer::{RunStatus, TrainConfig};

    fn record(seed: u64) -> RunRecord {
        let data = DataSpec { mode: icl_core::datagen::Mode::Unimodal, ..DataSpec::default() };
        let model = ModelConfig { max_t: data.t(), ..ModelConfig::default() };
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        RunRecord {
            run_id: run_id(&data, &model, &train, &eval, seed),
            seed,
            status: RunStatus::MaxSteps,
            steps: 10,
            wall_clock_secs: 1.0,
            final_train_loss: 3.2,
            data,
            model,
            train,
            metrics: None,
            encoder_acc: None,
            layers: None,
        }
    }

    #[test]
    fn append_is_idempotent_across_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let mut ledger = Ledger::open(&path).unwrap();
        assert!(ledger.append(&record(0)).unwrap());
        assert!(ledger.append(&record(1)).unwrap());
        assert!(!ledger.append(&record(0)).unwrap());
        assert_eq!(ledger.len(), 2);

        let mut reopened = Ledger::open(&path).unwrap();
        assert!(!reopened.append(&record(1)).unwrap());
        assert_eq!(reopened.records().unwrap().len(), 2);
    }

    #[test]
    fn foreign_header_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(Ledger::open(&path).is_err());
    }

    #[test]
    fn round_trip_preserves_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        let mut ledger = Ledger::open(&path).unwrap();
        let rec = record(3);
        ledger.append(&rec).unwrap();
        let rows = ledger.records().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].run_id, rec.run_id);
        assert_eq!(rows[0].to_fields(), rec.to_fields());
    }
}
