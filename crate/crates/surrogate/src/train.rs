//! Stochastic teacher forcing over rollout windows, autoregressive
//! fine-tuning, optimizers and early stopping.

use crate::checkpoint::{encode_checkpoint, round_to_f32, sha256_hex, Checkpoint};
use crate::eval::{rollout, to_f64, EvalError, EvalGeometry};
use crate::model::{DropPath, Geometry, ModelError, Stepper, Supernodes, Surrogate};
use crate::tape::{Mat, Var};
use nd_core::dataset::{splitmix64, CoordTransform, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training trajectories")]
    EmptyTrainSet,
    #[error("trajectory {index} has {len} snapshots, window needs {window}")]
    ShortTrajectory { index: usize, len: usize, window: usize },
    #[error("non-finite loss at epoch {epoch}, window {window}: {detail}")]
    NonFinite { epoch: usize, window: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `p = tf_schedule(epoch)`.
    Stochastic,
    /// `p ≡ 1`.
    TeacherForced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Lion { beta1: f64, beta2: f64, weight_decay: f64 },
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rollout window length `S ≥ 2`.
    pub window: usize,
    pub epochs_stf: usize,
    pub epochs_auto: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Windows per optimizer step.
    pub effective_batch: usize,
    pub windows_per_epoch: usize,
    pub drop_path_prob: f64,
    /// Validation trajectories used for early stopping.
    pub early_stop_eval_count: usize,
    pub master_seed: u64,
    pub strategy: Strategy,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.effective_batch == 0 || self.windows_per_epoch == 0 {
            return bad("effective_batch and windows_per_epoch must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_path_prob) {
            return bad("drop_path_prob must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Teacher-forcing probability for an epoch of the STF phase.
    pub fn forcing_probability(&self, epoch: usize) -> f64 {
        match self.strategy {
            Strategy::Stochastic => tf_schedule(epoch, self.epochs_stf),
            Strategy::TeacherForced => 1.0,
        }
    }
}

/// `max(0, 1 − n/N)`.
pub fn tf_schedule(epoch: usize, n_stf: usize) -> f64 {
    if n_stf == 0 {
        return 0.0;
    }
    (1.0 - epoch as f64 / n_stf as f64).max(0.0)
}

/// Constant for `warmup` epochs, then cosine decay reaching 0 at `total`.
pub fn learning_rate(base: f64, epoch: usize, warmup: usize, total: usize) -> f64 {
    if epoch < warmup {
        return base;
    }
    if total <= warmup {
        return 0.0;
    }
    let x = ((epoch - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Uniform draw in `[0, 1)` keyed by `(seed, epoch, window, step)`.
pub fn keyed_uniform(seed: u64, epoch: usize, window: usize, step: usize) -> f64 {
    let key = splitmix64((epoch as u64) << 40 ^ (window as u64) << 8 ^ step as u64);
    let h = splitmix64(seed ^ 0xF0CE_D00D ^ key);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Consecutive snapshots `start..start + len` of one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct RolloutWindow<'a> {
    pub trajectory: &'a Trajectory,
    pub start: usize,
    pub len: usize,
}

impl<'a> RolloutWindow<'a> {
    pub fn new(trajectory: &'a Trajectory, start: usize, len: usize) -> Result<Self, TrainError> {
        if len < 2 {
            return Err(TrainError::InvalidConfig("window must be at least 2".into()));
        }
        if start + len > trajectory.steps.len() {
            return Err(TrainError::ShortTrajectory {
                index: start,
                len: trajectory.steps.len(),
                window: len,
            });
        }
        Ok(Self { trajectory, start, len })
    }

    fn u(&self, i: usize) -> Vec<[f64; 3]> {
        to_f64(&self.trajectory.steps[self.start + i].u)
    }

    fn c(&self, i: usize) -> Vec<[f64; 3]> {
        let t = self.trajectory;
        to_f64(&t.steps[self.start + i].c.to_dense(t.n_nodes))
    }
}

/// Per-element teacher-forcing decisions for one window.
pub trait ForcingSource {
    /// Whether input `x̂_i` (1-based window index, `i ≥ 2`) is ground truth.
    fn teacher_forced(&mut self, i: usize) -> bool;
}

/// Bernoulli(p) draws from the keyed counter stream.
pub struct KeyedForcing {
    pub p: f64,
    pub seed: u64,
    pub epoch: usize,
    pub window: usize,
}

impl ForcingSource for KeyedForcing {
    fn teacher_forced(&mut self, i: usize) -> bool {
        keyed_uniform(self.seed, self.epoch, self.window, i) < self.p
    }
}

/// A fixed forcing pattern; entry `i − 2` decides input `x̂_i`.
pub struct FixedForcing(pub Vec<bool>);

impl ForcingSource for FixedForcing {
    fn teacher_forced(&mut self, i: usize) -> bool {
        self.0[i - 2]
    }
}

/// Loss of one window: prediction `i = 1..S−1` maps input `x̂_i` and
/// `c_{i+1}` to `û_{i+1}`; `x̂_1` is ground truth, later inputs are ground
/// truth or the previous prediction per `forcing`. The sum of per-step MSEs
/// in normalised units is divided by `S − 1`. Ground-truth inputs are
/// constants, so gradients flow through predicted inputs only.
pub fn stf_rollout_loss(
    ctx: &mut crate::model::Ctx<'_>,
    geo: &Geometry,
    sn: &Supernodes,
    window: &RolloutWindow,
    forcing: &mut dyn ForcingSource,
    drop: &mut DropPath,
) -> Var {
    let model = ctx.model();
    let mut prev: Option<Var> = None;
    let mut total: Option<Var> = None;
    for i in 1..window.len {
        let input = match prev {
            Some(p) if !forcing.teacher_forced(i) => p,
            _ => ctx.tape.constant(model.normalize_u(&window.u(i - 1))),
        };
        let c = ctx.tape.constant(model.normalize_c(&window.c(i)));
        let pred = ctx.step(geo, sn, input, c, drop);
        let target = ctx.tape.constant(model.normalize_u(&window.u(i)));
        let l = ctx.tape.mse(pred, target);
        total = Some(match total {
            None => l,
            Some(t) => ctx.tape.add(t, l),
        });
        prev = Some(pred);
    }
    let total = total.expect("window has at least one prediction");
    ctx.tape.scale(total, 1.0 / (window.len - 1) as f64)
}

/// Optimizer state, one buffer per parameter block.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    momentum: Vec<Mat>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Surrogate) -> Self {
        Self {
            kind,
            momentum: model
                .params
                .values
                .iter()
                .map(|m| Mat::zeros(m.rows, m.cols))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut Surrogate, grads: &[Mat], lr: f64) {
        for ((p, g), m) in model.params.values.iter_mut().zip(grads).zip(&mut self.momentum) {
            match self.kind {
                OptimizerKind::Lion {
                    beta1,
                    beta2,
                    weight_decay,
                } => {
                    for ((w, &gi), mi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        let c = beta1 * *mi + (1.0 - beta1) * gi;
                        let update = if c > 0.0 {
                            1.0
                        } else if c < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *w -= lr * (update + weight_decay * *w);
                        *mi = beta2 * *mi + (1.0 - beta2) * gi;
                    }
                }
                OptimizerKind::Momentum { beta } => {
                    for ((w, &gi), mi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *mi = beta * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub p: f64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub eval_mse: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by validation rollout MSE, weights rounded to f32.
    pub best: Checkpoint,
    pub best_hash: String,
    pub best_epoch: usize,
    pub best_eval_mse: f64,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn max_grad_norm(&self) -> f64 {
        self.history.iter().map(|e| e.grad_norm_max).fold(0.0, f64::max)
    }
}

/// Shared inputs of a training run.
pub struct TrainData<'a> {
    pub geometry: Arc<Geometry>,
    pub eval_geometry: &'a EvalGeometry,
    pub coord: CoordTransform,
    pub train: &'a [Trajectory],
    pub validation: &'a [Trajectory],
}

#[derive(Clone, Copy)]
enum Phase {
    Stf,
    Auto,
}

struct Trainer<'a, 'd, 'l> {
    cfg: &'a TrainConfig,
    data: &'a TrainData<'d>,
    model: Surrogate,
    opt: Optimizer,
    eval_stepper_sn: Arc<Supernodes>,
    history: Vec<EpochLog>,
    best: Option<(f64, usize, Checkpoint)>,
    log: Option<&'l mut dyn Write>,
}

impl Trainer<'_, '_, '_> {
    fn eval_mse(&self) -> Result<f64, TrainError> {
        let mut model = self.model.clone();
        round_to_f32(&mut model.params);
        let stepper = Stepper::new(Arc::new(model), self.data.geometry.clone(), self.eval_stepper_sn.clone());
        let n = self.cfg.early_stop_eval_count.min(self.data.validation.len());
        if n == 0 {
            return Ok(f64::NAN);
        }
        let mut sum = 0.0;
        for (i, traj) in self.data.validation[..n].iter().enumerate() {
            let r = rollout(&mut &stepper, traj, self.data.eval_geometry, &format!("val{i}"))?;
            sum += if r.diverged { f64::INFINITY } else { r.l_auto_mse };
        }
        Ok(sum / n as f64)
    }

    fn epoch(&mut self, phase: Phase, epoch: usize, global_epoch: usize) -> Result<(), TrainError> {
        let cfg = self.cfg;
        let (p, lr, name) = match phase {
            Phase::Stf => (
                cfg.forcing_probability(epoch),
                learning_rate(cfg.base_lr, epoch, cfg.warmup_epochs, cfg.epochs_stf),
                "stf",
            ),
            Phase::Auto => (0.0, learning_rate(cfg.base_lr, epoch, 0, cfg.epochs_auto), "auto"),
        };
        let seed = cfg.master_seed;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7A11 ^ (global_epoch as u64) << 20));
        let train = self.data.train;
        let geo = self.data.geometry.clone();

        let mut loss_sum = 0.0;
        let mut norms = Vec::new();
        let mut acc: Option<Vec<Mat>> = None;
        let mut in_batch = 0;
        for w in 0..cfg.windows_per_epoch {
            let ti = rng.gen_range(0..train.len());
            let traj = &train[ti];
            let start = rng.gen_range(0..=traj.steps.len() - cfg.window);
            let window = RolloutWindow::new(traj, start, cfg.window)?;
            let sn = Supernodes::sample(&geo, &self.model.config, &mut rng)?;
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut drop = DropPath {
                prob: cfg.drop_path_prob,
                rng: Some(&mut drop_rng),
            };
            let mut forcing = KeyedForcing {
                p,
                seed,
                epoch: global_epoch,
                window: w,
            };
            let mut ctx = self.model.ctx(true);
            let loss = stf_rollout_loss(&mut ctx, &geo, &sn, &window, &mut forcing, &mut drop);
            let value = ctx.tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: global_epoch,
                    window: w,
                    detail: format!("trajectory {ti} start {start} p {p}"),
                });
            }
            loss_sum += value;
            let mut grads = ctx.tape.backward(loss);
            let bound = ctx.bound_params().to_vec();
            let acc = acc.get_or_insert_with(|| {
                self.model
                    .params
                    .values
                    .iter()
                    .map(|m| Mat::zeros(m.rows, m.cols))
                    .collect()
            });
            for (a, v) in acc.iter_mut().zip(bound) {
                if let Some(g) = v.and_then(|v| grads.take(v)) {
                    a.add_assign(&g);
                }
            }
            in_batch += 1;
            if in_batch == cfg.effective_batch || w + 1 == cfg.windows_per_epoch {
                let mut g = std::mem::take(acc);
                let inv = 1.0 / in_batch as f64;
                g.iter_mut().for_each(|m| m.data.iter_mut().for_each(|x| *x *= inv));
                let norm = g.iter().map(Mat::norm_squared).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch: global_epoch,
                        window: w,
                        detail: "gradient norm".into(),
                    });
                }
                if let Some(clip) = cfg.grad_clip {
                    if norm > clip {
                        let s = clip / norm;
                        g.iter_mut().for_each(|m| m.data.iter_mut().for_each(|x| *x *= s));
                    }
                }
                norms.push(norm);
                self.opt.step(&mut self.model, &g, lr);
                in_batch = 0;
            }
        }

        let eval_mse = self.eval_mse()?;
        let improved = match &self.best {
            None => true,
            Some((b, _, _)) => eval_mse < *b,
        };
        if improved {
            let mut best = self.model.clone();
            round_to_f32(&mut best.params);
            let ck = Checkpoint {
                model: best,
                coord_transform: Some(self.data.coord),
                meta: serde_json::json!({"epoch": global_epoch, "phase": name, "eval_mse": eval_mse}),
            };
            self.best = Some((eval_mse, global_epoch, ck));
        }
        let entry = EpochLog {
            epoch: global_epoch,
            phase: name.into(),
            p,
            lr,
            loss: loss_sum / cfg.windows_per_epoch as f64,
            grad_norm_mean: norms.iter().sum::<f64>() / norms.len().max(1) as f64,
            grad_norm_max: norms.iter().copied().fold(0.0, f64::max),
            eval_mse,
            best: improved,
        };
        log::info!(
            "epoch {} [{}] p={:.3} lr={:.2e} loss={:.5} |g|max={:.3} eval={:.5}",
            entry.epoch,
            entry.phase,
            entry.p,
            entry.lr,
            entry.loss,
            entry.grad_norm_max,
            entry.eval_mse
        );
        if let Some(w) = self.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        self.history.push(entry);
        Ok(())
    }

    fn finish(self) -> TrainOutcome {
        let (best_eval_mse, best_epoch, best) = self.best.expect("at least one epoch ran");
        let best_hash = sha256_hex(&encode_checkpoint(&best));
        TrainOutcome {
            best,
            best_hash,
            best_epoch,
            best_eval_mse,
            history: self.history,
        }
    }
}

fn check_inputs(cfg: &TrainConfig, data: &TrainData) -> Result<(), TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if let Some((index, t)) = data.train.iter().enumerate().find(|(_, t)| t.steps.len() < cfg.window) {
        return Err(TrainError::ShortTrajectory {
            index,
            len: t.steps.len(),
            window: cfg.window,
        });
    }
    Ok(())
}

fn trainer<'a, 'd, 'l>(
    model: Surrogate,
    cfg: &'a TrainConfig,
    data: &'a TrainData<'d>,
    log: Option<&'l mut dyn Write>,
) -> Result<Trainer<'a, 'd, 'l>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.master_seed ^ 0xE7A1));
    let sn = Supernodes::sample(&data.geometry, &model.config, &mut rng)?;
    Ok(Trainer {
        cfg,
        data,
        opt: Optimizer::new(cfg.optimizer, &model),
        model,
        eval_stepper_sn: Arc::new(sn),
        history: Vec::new(),
        best: None,
        log,
    })
}

/// `epochs_stf` epochs with the configured strategy followed by
/// `epochs_auto` fully autoregressive epochs, keeping the checkpoint with
/// the lowest validation rollout MSE.
pub fn train(
    model: Surrogate,
    data: &TrainData,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    check_inputs(cfg, data)?;
    if cfg.epochs_stf + cfg.epochs_auto == 0 {
        return Err(TrainError::InvalidConfig("no epochs to run".into()));
    }
    let mut t = trainer(model, cfg, data, log)?;
    for e in 0..cfg.epochs_stf {
        t.epoch(Phase::Stf, e, e)?;
    }
    for e in 0..cfg.epochs_auto {
        t.epoch(Phase::Auto, e, cfg.epochs_stf + e)?;
    }
    Ok(t.finish())
}

/// The training loop with `p ≡ 0` for `epochs` epochs, starting from a
/// trained model. The starting model's validation score seeds best
/// tracking, so the result never scores worse than the input.
pub fn autoregressive_finetune(
    model: Surrogate,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    check_inputs(cfg, data)?;
    let cfg = TrainConfig {
        epochs_auto: epochs,
        epochs_stf: 0,
        ..cfg.clone()
    };
    let mut t = trainer(model, &cfg, data, log)?;
    let start = t.eval_mse()?;
    let mut m = t.model.clone();
    round_to_f32(&mut m.params);
    t.best = Some((
        start,
        0,
        Checkpoint {
            model: m,
            coord_transform: Some(data.coord),
            meta: serde_json::json!({"epoch": 0, "phase": "start", "eval_mse": start}),
        },
    ));
    for e in 0..epochs {
        t.epoch(Phase::Auto, e, e + 1)?;
    }
    Ok(t.finish())
}
