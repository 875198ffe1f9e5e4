//! Training-strategy comparison and rollout-window sweep.

use crate::checkpoint::{decode_checkpoint, encode_checkpoint, sha256_hex, Checkpoint};
use crate::eval::{mean_std, mse_band, rollout, CurveBand, EvalError, MeanStd, RolloutReport};
use crate::model::{ModelError, Stepper, Supernodes, Surrogate};
use crate::train::{train, EpochLog, Strategy, TrainConfig, TrainData, TrainError};
use nd_core::dataset::{splitmix64, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Summary of one finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub train_config: TrainConfig,
    pub best_hash: String,
    pub best_epoch: usize,
    pub best_eval_mse: f64,
    pub max_grad_norm: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// Produces trained models; implementations may reuse earlier results.
pub trait Runner {
    fn run(&mut self, label: &str, init: &Surrogate, cfg: &TrainConfig, data: &TrainData) -> Result<RunResult, ExperimentError>;
}

fn run_training(
    label: &str,
    init: &Surrogate,
    cfg: &TrainConfig,
    data: &TrainData,
    log_path: Option<PathBuf>,
) -> Result<RunResult, ExperimentError> {
    let mut file = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let out = train(
        init.clone(),
        data,
        cfg,
        file.as_mut().map(|w| w as &mut dyn std::io::Write),
    )?;
    Ok(RunResult {
        record: RunRecord {
            label: label.into(),
            train_config: cfg.clone(),
            max_grad_norm: out.max_grad_norm(),
            best_hash: out.best_hash,
            best_epoch: out.best_epoch,
            best_eval_mse: out.best_eval_mse,
            history: out.history,
        },
        checkpoint: out.best,
    })
}

/// Trains every request from scratch.
#[derive(Debug, Default)]
pub struct DirectRunner {
    /// Directory for per-run JSONL training logs.
    pub log_dir: Option<PathBuf>,
}

impl Runner for DirectRunner {
    fn run(&mut self, label: &str, init: &Surrogate, cfg: &TrainConfig, data: &TrainData) -> Result<RunResult, ExperimentError> {
        let log = match &self.log_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(d.join(format!("{label}.jsonl")))
            }
            None => None,
        };
        run_training(label, init, cfg, data, log)
    }
}

/// Stores each run under `dir/<key>/`, the key hashing the data identity,
/// the initial model and the training config. Labels are not part of the
/// key, so identical runs requested under different names are shared.
#[derive(Debug)]
pub struct CachedRunner {
    pub dir: PathBuf,
    /// Identifies the training data, e.g. a manifest digest.
    pub data_key: String,
}

impl CachedRunner {
    pub fn key(&self, init: &Surrogate, cfg: &TrainConfig) -> Result<String, ExperimentError> {
        let init_bytes = encode_checkpoint(&Checkpoint {
            model: init.clone(),
            coord_transform: None,
            meta: serde_json::Value::Null,
        });
        let text = format!(
            "{}\n{}\n{}",
            self.data_key,
            sha256_hex(&init_bytes),
            serde_json::to_string(cfg)?
        );
        Ok(sha256_hex(text.as_bytes())[..16].to_string())
    }
}

impl Runner for CachedRunner {
    fn run(&mut self, label: &str, init: &Surrogate, cfg: &TrainConfig, data: &TrainData) -> Result<RunResult, ExperimentError> {
        let dir = self.dir.join(self.key(init, cfg)?);
        let record_path = dir.join("run.json");
        let ck_path = dir.join("best.ndckpt");
        if record_path.exists() && ck_path.exists() {
            let mut record: RunRecord = serde_json::from_slice(&std::fs::read(&record_path)?)?;
            let bytes = std::fs::read(&ck_path)?;
            if sha256_hex(&bytes) == record.best_hash {
                log::info!("reusing cached run {label} from {}", dir.display());
                record.label = label.into();
                return Ok(RunResult {
                    record,
                    checkpoint: decode_checkpoint(&bytes)?,
                });
            }
            log::warn!("cached run in {} is inconsistent; retraining", dir.display());
        }
        std::fs::create_dir_all(&dir)?;
        let res = run_training(label, init, cfg, data, Some(dir.join("train_log.jsonl")))?;
        std::fs::write(&ck_path, encode_checkpoint(&res.checkpoint))?;
        std::fs::write(&record_path, serde_json::to_vec_pretty(&res.record)?)?;
        Ok(res)
    }
}

/// Held-out trajectories with display names.
pub struct TestSet<'a> {
    pub trajectories: &'a [Trajectory],
    pub names: Vec<String>,
}

/// Full rollouts of a checkpoint with supernodes frozen from `seed`.
pub fn evaluate(
    ck: &Checkpoint,
    data: &TrainData,
    test: &TestSet,
    seed: u64,
) -> Result<Vec<RolloutReport>, ExperimentError> {
    let model = Arc::new(ck.model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xE7A1_7E57));
    let sn = Supernodes::sample(&data.geometry, &model.config, &mut rng)?;
    let stepper = Stepper::new(model, data.geometry.clone(), Arc::new(sn));
    test.trajectories
        .iter()
        .zip(&test.names)
        .map(|(t, name)| Ok(rollout(&mut &stepper, t, data.eval_geometry, name)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub window: usize,
    pub strategy: Strategy,
    pub best_hash: String,
    pub best_epoch: usize,
    pub max_grad_norm: f64,
    pub mse: MeanStd,
    pub hausdorff: MeanStd,
    pub max_error: MeanStd,
    pub band: CurveBand,
    pub reports: Vec<RolloutReport>,
}

fn summarize(run: &RunResult, reports: Vec<RolloutReport>) -> ArmSummary {
    let cfg = &run.record.train_config;
    ArmSummary {
        label: run.record.label.clone(),
        window: cfg.window,
        strategy: cfg.strategy,
        best_hash: run.record.best_hash.clone(),
        best_epoch: run.record.best_epoch,
        max_grad_norm: run.record.max_grad_norm,
        mse: mean_std(reports.iter().map(|r| r.l_auto_mse)),
        hausdorff: mean_std(reports.iter().map(|r| r.l_auto_hausdorff)),
        max_error: mean_std(reports.iter().map(|r| r.l_auto_max)),
        band: mse_band(&reports),
        reports,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub trajectory: String,
    pub tf_mse: f64,
    pub stf_mse: f64,
    pub tf_max: f64,
    pub stf_max: f64,
}

/// Published full-scale values, kept in reports for context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub tf_mse: f64,
    pub stf_mse: f64,
    pub tf_max_mm: f64,
    pub stf_max_mm: f64,
}

pub const REFERENCE_TF_VS_STF: ReferenceValues = ReferenceValues {
    tf_mse: 1.90,
    stf_mse: 0.35,
    tf_max_mm: 6.68,
    stf_max_mm: 3.50,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfVsStfReport {
    pub teacher_forced: ArmSummary,
    pub stochastic: ArmSummary,
    pub rows: Vec<PairRow>,
    /// Trajectories where the stochastic arm has lower rollout MSE.
    pub stf_better_mse: usize,
    /// Trajectories where it has both lower MSE and lower max error.
    pub stf_better_both: usize,
    pub reference: ReferenceValues,
}

impl TfVsStfReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory,tf_mse,stf_mse,tf_max_mm,stf_max_mm\n");
        for r in &self.rows {
            s += &format!("{},{},{},{},{}\n", r.trajectory, r.tf_mse, r.stf_mse, r.tf_max, r.stf_max);
        }
        s
    }

    /// Per-step mean and band of both arms.
    pub fn curves_csv(&self) -> String {
        let (a, b) = (&self.teacher_forced.band, &self.stochastic.band);
        let mut s = String::from("step,tf_mean,tf_min,tf_max,stf_mean,stf_min,stf_max\n");
        for i in 0..a.mean.len().min(b.mean.len()) {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                i + 1,
                a.mean[i],
                a.min[i],
                a.max[i],
                b.mean[i],
                b.min[i],
                b.max[i]
            );
        }
        s
    }
}

/// Trains the configured window once with `p ≡ 1` and once with the linear
/// schedule, everything else identical, and compares full rollouts.
pub fn experiment_tf_vs_stf(
    runner: &mut dyn Runner,
    init: &Surrogate,
    base: &TrainConfig,
    data: &TrainData,
    test: &TestSet,
) -> Result<TfVsStfReport, ExperimentError> {
    let tf_cfg = TrainConfig {
        strategy: Strategy::TeacherForced,
        ..base.clone()
    };
    let stf_cfg = TrainConfig {
        strategy: Strategy::Stochastic,
        ..base.clone()
    };
    let tf = runner.run(&format!("tf_s{}", base.window), init, &tf_cfg, data)?;
    let stf = runner.run(&format!("stf_s{}", base.window), init, &stf_cfg, data)?;
    let tf_reports = evaluate(&tf.checkpoint, data, test, base.master_seed)?;
    let stf_reports = evaluate(&stf.checkpoint, data, test, base.master_seed)?;
    let rows: Vec<PairRow> = tf_reports
        .iter()
        .zip(&stf_reports)
        .map(|(a, b)| PairRow {
            trajectory: a.trajectory.clone(),
            tf_mse: a.l_auto_mse,
            stf_mse: b.l_auto_mse,
            tf_max: a.l_auto_max,
            stf_max: b.l_auto_max,
        })
        .collect();
    Ok(TfVsStfReport {
        stf_better_mse: rows.iter().filter(|r| r.stf_mse < r.tf_mse).count(),
        stf_better_both: rows
            .iter()
            .filter(|r| r.stf_mse < r.tf_mse && r.stf_max < r.tf_max)
            .count(),
        rows,
        teacher_forced: summarize(&tf, tf_reports),
        stochastic: summarize(&stf, stf_reports),
        reference: REFERENCE_TF_VS_STF,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub strategy: Strategy,
    pub mse: MeanStd,
    pub hausdorff: MeanStd,
    pub max_error: MeanStd,
    pub max_grad_norm: f64,
    pub best_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub best_window: usize,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window,strategy,mse_mean,mse_std,hausdorff_mean,max_error_mean,max_grad_norm\n");
        for r in &self.rows {
            s += &format!(
                "{},{:?},{},{},{},{},{}\n",
                r.window, r.strategy, r.mse.mean, r.mse.std, r.hausdorff.mean, r.max_error.mean, r.max_grad_norm
            );
        }
        s
    }

    pub fn row(&self, window: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.window == window)
    }
}

/// One run per window. Window 2 trains fully teacher-forced, larger windows
/// with the stochastic schedule.
pub fn experiment_window_sweep(
    runner: &mut dyn Runner,
    init: &Surrogate,
    base: &TrainConfig,
    windows: &[usize],
    data: &TrainData,
    test: &TestSet,
) -> Result<SweepReport, ExperimentError> {
    if windows.len() < 2 {
        return Err(ExperimentError::Invalid("sweep needs at least two windows".into()));
    }
    let mut rows = Vec::new();
    for &w in windows {
        let strategy = if w == 2 {
            Strategy::TeacherForced
        } else {
            Strategy::Stochastic
        };
        let cfg = TrainConfig {
            window: w,
            strategy,
            ..base.clone()
        };
        let label = match strategy {
            Strategy::TeacherForced => format!("tf_s{w}"),
            Strategy::Stochastic => format!("stf_s{w}"),
        };
        let run = runner.run(&label, init, &cfg, data)?;
        let arm = summarize(&run, evaluate(&run.checkpoint, data, test, base.master_seed)?);
        rows.push(SweepRow {
            window: w,
            strategy,
            mse: arm.mse,
            hausdorff: arm.hausdorff,
            max_error: arm.max_error,
            max_grad_norm: arm.max_grad_norm,
            best_hash: arm.best_hash,
        });
    }
    let best_window = rows
        .iter()
        .min_by(|a, b| a.mse.mean.total_cmp(&b.mse.mean))
        .map(|r| r.window)
        .unwrap_or(0);
    Ok(SweepReport { rows, best_window })
}
