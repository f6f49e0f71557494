//! Executing one experiment cell: derive the stage chain, reuse pretrained
//! checkpoints, train what is missing, evaluate, probe, and record.
//!
//! Stage derivation canonicalizes fields a stage does not read (a unimodal
//! decoder pretrain ignores the secondary modality; encoder pretraining
//! ignores the primary one) by resetting them to their defaults. Run ids
//! therefore depend only on what actually affects the weights, which is
//! what lets different multimodal cells share one pretrained decoder.

use std::path::{Path, PathBuf};

use icl_core::datagen::{DataSpec, EpisodeSource, Mode};
use icl_core::error::{Error, Result};
use icl_core::evalsuite::EvalConfig;
use icl_core::net::{checkpoint, init_params, ModelConfig, ParamSet};
use icl_core::records::{run_id, RunRecord};
use icl_core::trainer::{train, RunStatus, Stage, TrainConfig, TrainOutcome, TrainSetup};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::ledger::Ledger;

/// Data, model, and optimizer settings for one training stage.
#[derive(Debug, Clone, Serialize)]
pub struct StagePlan {
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The full stage chain for one cell.
#[derive(Debug, Clone)]
pub struct RunPlan {
    /// Encoder classification pretraining, when the model has an encoder.
    pub encoder_pre: Option<StagePlan>,
    /// Unimodal decoder pretraining.
    pub decoder_pre: Option<StagePlan>,
    pub main: StagePlan,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunPlan {
    pub fn main_run_id(&self) -> String {
        run_id(&self.main.data, &self.main.model, &self.main.train, &self.eval, self.seed)
    }
}

/// Derives the unimodal decoder-pretraining stage of `cfg`. Secondary-
/// modality data fields reset to defaults since the stage never reads them.
fn derive_stage1(cfg: &ExperimentConfig) -> StagePlan {
    let defaults = DataSpec::default();
    let data = DataSpec {
        mode: Mode::Unimodal,
        l2: defaults.l2,
        k2: defaults.k2,
        d2: defaults.d2,
        eps2: defaults.eps2,
        alpha2: defaults.alpha2,
        ..cfg.data.clone()
    };
    let model = ModelConfig { m2: None, max_t: data.t(), ..cfg.model.clone() };
    let train = TrainConfig {
        stage: Stage::UnimodalPretrain,
        ..cfg.pretrain.decoder.clone().unwrap_or_else(|| cfg.train.clone())
    };
    StagePlan { data, model, train }
}

/// Derives the encoder-pretraining stage. Primary-modality data fields
/// reset to defaults; the stage reads only the secondary bank.
fn derive_encoder(cfg: &ExperimentConfig) -> StagePlan {
    let defaults = DataSpec::default();
    let data = DataSpec {
        n: defaults.n,
        b: defaults.b,
        l1: defaults.l1,
        k1: defaults.k1,
        d1: defaults.d1,
        eps1: defaults.eps1,
        alpha1: defaults.alpha1,
        ..cfg.data.clone()
    };
    let md = ModelConfig::default();
    let mut m2 = cfg.model.m2.clone().expect("encoder stage needs m2");
    if let Some(enc) = &mut m2.encoder {
        if enc.n_classes == 0 {
            enc.n_classes = data.k2;
        }
    }
    let model = ModelConfig {
        n_layers: md.n_layers,
        n_heads: md.n_heads,
        d_model: data.d1,
        d_mlp: md.d_mlp,
        pe_type: md.pe_type,
        n_labels: data.l1,
        max_t: data.t(),
        rope_base: md.rope_base,
        m2: Some(m2),
    };
    let train = TrainConfig {
        stage: Stage::EncoderPretrain,
        ..cfg.pretrain.encoder.clone().unwrap_or_else(|| cfg.train.clone())
    };
    StagePlan { data, model, train }
}

/// Builds the stage chain for a resolved config.
pub fn plan(cfg: &ExperimentConfig) -> Result<RunPlan> {
    let has_encoder = cfg
        .model
        .m2
        .as_ref()
        .is_some_and(|m2| m2.encoder.is_some());
    let (encoder_pre, decoder_pre, main) = match cfg.train.stage {
        Stage::UnimodalPretrain => (None, None, derive_stage1(cfg)),
        Stage::EncoderPretrain => (None, None, derive_encoder(cfg)),
        Stage::EarlyFusion => (
            None,
            None,
            StagePlan {
                data: cfg.data.clone(),
                model: cfg.model.clone(),
                train: cfg.train.clone(),
            },
        ),
        Stage::MultimodalProjectorOnly
        | Stage::MultimodalProjectorDecoder
        | Stage::MultimodalAll => (
            has_encoder.then(|| derive_encoder(cfg)),
            Some(derive_stage1(cfg)),
            StagePlan {
                data: cfg.data.clone(),
                model: cfg.model.clone(),
                train: cfg.train.clone(),
            },
        ),
    };
    Ok(RunPlan { encoder_pre, decoder_pre, main, eval: cfg.eval.clone(), seed: cfg.seed })
}

/// Result of executing a cell.
pub struct ExecReport {
    /// Records in stage order; the flag says whether the row is new (false
    /// means the stage was reused from the ledger and checkpoint store).
    pub records: Vec<(RunRecord, bool)>,
    /// Path of the final-stage checkpoint, absent when the run diverged.
    pub final_ckpt: Option<PathBuf>,
}

impl ExecReport {
    pub fn main_record(&self) -> &RunRecord {
        &self.records.last().expect("at least one stage").0
    }

    pub fn failed(&self) -> bool {
        self.records.iter().any(|(r, _)| r.status == RunStatus::Diverged)
    }
}

pub fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("ckpt")
}

pub fn ckpt_path(out: &Path, id: &str) -> PathBuf {
    ckpt_dir(out).join(format!("{id}.ckpt"))
}

/// Per-evaluation training history, stored as JSON beside the checkpoint.
pub fn history_path(out: &Path, id: &str) -> PathBuf {
    ckpt_dir(out).join(format!("{id}.history.json"))
}

/// Runs the full stage chain, reusing any stage whose run id already has
/// both a ledger row and a stored checkpoint. Diverged stages append their
/// record and abort the chain.
pub fn execute(plan: &RunPlan, out: &Path, ledger: &mut Ledger) -> Result<ExecReport> {
    std::fs::create_dir_all(ckpt_dir(out))?;
    let mut records = Vec::new();
    let mut preload: Vec<PathBuf> = Vec::new();

    for pre in [&plan.encoder_pre, &plan.decoder_pre].into_iter().flatten() {
        let (rec, path, new) = run_stage(pre, plan, &[], out, ledger)?;
        let diverged = rec.status == RunStatus::Diverged;
        records.push((rec, new));
        if diverged {
            return Ok(ExecReport { records, final_ckpt: None });
        }
        preload.push(path);
    }

    let (rec, path, new) = run_stage(&plan.main, plan, &preload, out, ledger)?;
    let diverged = rec.status == RunStatus::Diverged;
    records.push((rec, new));
    Ok(ExecReport {
        records,
        final_ckpt: (!diverged).then_some(path),
    })
}

/// Trains one stage (or reuses it) and returns its record and checkpoint.
fn run_stage(
    stage: &StagePlan,
    plan: &RunPlan,
    preload: &[PathBuf],
    out: &Path,
    ledger: &mut Ledger,
) -> Result<(RunRecord, PathBuf, bool)> {
    let id = run_id(&stage.data, &stage.model, &stage.train, &plan.eval, plan.seed);
    let path = ckpt_path(out, &id);
    if ledger.contains(&id) && path.exists() {
        let rec = ledger
            .records()?
            .into_iter()
            .find(|r| r.run_id == id)
            .ok_or_else(|| Error::config(format!("ledger lost run {id}")))?;
        return Ok((rec, path, false));
    }

    let mut init = init_params::<f32>(&stage.model, plan.seed)?;
    for ckpt in preload {
        let tensors = checkpoint::load(ckpt)?;
        checkpoint::load_into(&mut init, &tensors)?;
    }
    let setup = TrainSetup {
        model: &stage.model,
        data: &stage.data,
        train: &stage.train,
        eval: &plan.eval,
        seed: plan.seed,
    };
    let outcome = if stage.train.f64_mode {
        let out64 = train(init.cast::<f64>(), &setup)?;
        TrainOutcome {
            params: out64.params.cast::<f32>(),
            status: out64.status,
            steps: out64.steps,
            history: out64.history,
            evals: out64.evals,
            circuits: out64.circuits,
            encoder_acc: out64.encoder_acc,
            final_train_loss: out64.final_train_loss,
            wall_secs: out64.wall_secs,
        }
    } else {
        train(init, &setup)?
    };

    let rec = RunRecord::from_outcome(
        &stage.data,
        &stage.model,
        &stage.train,
        &plan.eval,
        plan.seed,
        &outcome,
    );
    if outcome.status != RunStatus::Diverged {
        let echo = serde_json::json!({
            "run_id": id,
            "seed": plan.seed,
            "stage": stage,
            "eval": plan.eval,
        });
        checkpoint::save(&path, &outcome.params, &echo.to_string())?;
    }
    let hist = serde_json::to_string(&outcome.history).expect("history serializes");
    std::fs::write(history_path(out, &id), hist)?;
    ledger.append(&rec)?;
    Ok((rec, path, true))
}

/// Loads the final-stage model for a config, either from an explicit
/// checkpoint path or from the content-addressed store.
pub fn load_trained(
    cfg: &ExperimentConfig,
    out: &Path,
    explicit: Option<&Path>,
) -> Result<(ParamSet<f32>, RunPlan)> {
    let plan = plan(cfg)?;
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = ckpt_path(out, &plan.main_run_id());
            if !p.exists() {
                return Err(Error::config(format!(
                    "no checkpoint at {}; train this config first or pass an \
                     explicit checkpoint path",
                    p.display()
                )));
            }
            p
        }
    };
    let mut params = ParamSet::<f32>::zeros(&plan.main.model)?;
    let tensors = checkpoint::load(&path)?;
    let report = checkpoint::load_into(&mut params, &tensors)?;
    if !report.missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} lacks tensors: {}",
            path.display(),
            report.missing.join(", ")
        )));
    }
    Ok((params, plan))
}

/// Episode source for the main stage of a plan.
pub fn main_source(plan: &RunPlan) -> Result<EpisodeSource> {
    EpisodeSource::new(&plan.main.data, plan.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;

    fn tiny_unimodal_sets() -> Vec<String> {
        [
            "data.mode=unimodal",
            "data.n=4",
            "data.b=2",
            "data.l1=8",
            "data.k1=32",
            "data.d1=16",
            "model.n_labels=0",
            "model.d_model=16",
            "model.d_mlp=32",
            "train.max_steps=30",
            "train.eval_every=10",
            "train.batch_size=8",
            "train.lr=0.02",
            "eval.n_episodes=32",
            "eval.mid_episodes=16",
            "eval.n_probe=16",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn stage1_derivation_is_secondary_blind() {
        let stage = "train.stage=multimodal_projector_decoder".to_string();
        let base = config::load(None, &[stage.clone()], None).unwrap();
        let other = config::load(None, &[stage, "data.k2=64".into()], None).unwrap();
        let a = derive_stage1(&base);
        let b = derive_stage1(&other);
        assert_eq!(
            run_id(&a.data, &a.model, &a.train, &base.eval, 0),
            run_id(&b.data, &b.model, &b.train, &base.eval, 0),
        );

        // And it matches a directly-written unimodal config.
        let uni = config::load(None, &["data.mode=unimodal".into()], None).unwrap();
        let u = plan(&uni).unwrap();
        assert_eq!(
            u.main_run_id(),
            run_id(&a.data, &a.model, &TrainConfig::default(), &base.eval, 0),
        );
    }

    #[test]
    fn unimodal_cell_trains_reuses_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("runs");
        let cfg = config::load(None, &tiny_unimodal_sets(), Some(3)).unwrap();
        let p = plan(&cfg).unwrap();
        let mut ledger = Ledger::open(&out.join("ledger.csv")).unwrap();

        let first = execute(&p, &out, &mut ledger).unwrap();
        assert_eq!(first.records.len(), 1);
        assert!(first.records[0].1, "first execution trains");
        assert!(first.final_ckpt.as_ref().unwrap().exists());

        let second = execute(&p, &out, &mut ledger).unwrap();
        assert!(!second.records[0].1, "second execution reuses");
        assert_eq!(
            second.main_record().to_fields(),
            first.main_record().to_fields()
        );

        let (params, plan2) = load_trained(&cfg, &out, None).unwrap();
        assert_eq!(plan2.main_run_id(), p.main_run_id());
        assert!(params.check_finite().is_ok());
    }
}
