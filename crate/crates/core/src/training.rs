//! Physics-informed policy gradient and the adversarial training loop.
//!
//! Each generator update draws a batch of sequences, scores every frame `t`
//! with `r_t = R · Q_t − b`, where `R` is the structural reward of the whole
//! sequence, `Q_t` the discriminator's mean verdict over Monte Carlo
//! completions of the prefix `0..=t`, and `b` a moving-average baseline, and
//! ascends `(1/T) Σ_t r_t ∇ log p(y_t)`.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::discriminator::{
    discriminate, embed, embed_raw, standardize, train_discriminator_with, DiscriminatorConfig,
    DiscriminatorParams,
};
use crate::dynsim::{Dataset, Split};
use crate::error::{Error, Result};
use crate::generator::{
    backward, forward, generate, mle_pretrain, rollout_with_mean, sample_output, GenOutput,
    GeneratorConfig, GeneratorParams, MleConfig, TrainingExample,
};
use crate::metrics::{
    embed_features, fid, inception_score, quality, quality_report, spearman, AuxClassifier,
    QualityReport,
};
use crate::nn::params::{clip_grad_norm, Adam, ParamSet};
use crate::nn::{Checkpoint, Tensor};
use crate::physics::{lagrangian_residual, reward_from_residual, PhysicsParams, RewardSign};
use crate::rng::{self, derive_seed};
use crate::scalar::Real;

/// What multiplies the discriminator's action value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `exp(−PL/κ)`.
    #[default]
    Physics,
    /// Constant 1: a plain policy-gradient GAN.
    None,
    /// `exp(+(PL/κ)²)`.
    PaperLiteral,
}

impl FromStr for RewardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "physics" => Ok(Self::Physics),
            "none" => Ok(Self::None),
            "paper_literal" => Ok(Self::PaperLiteral),
            other => Err(Error::Config(format!("unknown reward mode `{other}`"))),
        }
    }
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Physics => "physics",
            Self::None => "none",
            Self::PaperLiteral => "paper_literal",
        })
    }
}

/// Structural reward with a residual temperature `κ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardModel<T> {
    pub mode: RewardMode,
    pub temperature: T,
}

impl<T: Real> RewardModel<T> {
    pub fn new(mode: RewardMode, temperature: T) -> Self {
        Self { mode, temperature }
    }

    pub fn reward(
        &self,
        theta: &[T],
        forces: &Tensor<T>,
        physics: &PhysicsParams<T>,
        dt: T,
    ) -> Result<T> {
        let sign = match self.mode {
            RewardMode::None => return Ok(T::one()),
            RewardMode::Physics => RewardSign::Physics,
            RewardMode::PaperLiteral => RewardSign::PaperLiteral,
        };
        let pl = lagrangian_residual(theta, forces, physics, dt)?;
        Ok(reward_from_residual(pl / self.temperature, sign))
    }
}

/// Moving average of the last `window` batch-mean values of `R · Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTracker {
    window: usize,
    history: VecDeque<f64>,
}

impl BaselineTracker {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    /// Zero until the first value arrives.
    pub fn value(&self) -> f64 {
        if self.history.is_empty() {
            0.0
        } else {
            self.history.iter().sum::<f64>() / self.history.len() as f64
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(v);
    }

    pub fn history(&self) -> Vec<f64> {
        self.history.iter().copied().collect()
    }

    fn restore(window: usize, values: &[f64]) -> Self {
        let mut b = Self::new(window);
        values.iter().for_each(|&v| b.push(v));
        b
    }
}

/// Discriminator input for a generated sequence; overflowing samples abort training.
fn embed_generated<T: Real>(out: &GenOutput<T>, phi: &DiscriminatorParams<T>) -> Result<Tensor<T>> {
    if !out.forces.is_finite() || out.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingAbort(
            "generator produced non-finite forces or angles".into(),
        ));
    }
    embed(&out.forces, &out.theta, phi)
}

fn score<T: Real>(out: &GenOutput<T>, phi: &DiscriminatorParams<T>) -> Result<T> {
    discriminate(&embed_generated(out, phi)?, phi)
}

/// Action values `Q_t` for every frame of `out`. `rollout_mean` are the
/// rollout policy's head means for the same sEMG.
fn action_values<T: Real>(
    out: &GenOutput<T>,
    rollout_mean: &Tensor<T>,
    rollout: &GeneratorParams<T>,
    phi: &DiscriminatorParams<T>,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<T>> {
    let l = out.frames();
    let mut q = Vec::with_capacity(l);
    for t in 0..l - 1 {
        let mut s = T::zero();
        for c in rollout_with_mean(rollout_mean, out, t, rollout, n_mc, seed)? {
            s += score(&c, phi)?;
        }
        q.push(s / T::of_usize(n_mc));
    }
    q.push(score(out, phi)?);
    Ok(q)
}

/// `Q_t`: the discriminator's mean real-probability over `n_mc` completions
/// of frames `0..=t` drawn from `rollout`; the full-sequence score at the
/// last frame.
pub fn action_value<T: Real>(
    emg: &Tensor<T>,
    prefix: &GenOutput<T>,
    t: usize,
    rollout: &GeneratorParams<T>,
    phi: &DiscriminatorParams<T>,
    n_mc: usize,
    seed: u64,
) -> Result<T> {
    let l = prefix.frames();
    if t >= l {
        return Err(Error::input(format!("frame {t} out of range for L = {l}")));
    }
    if t == l - 1 {
        return score(prefix, phi);
    }
    if n_mc == 0 {
        return Err(Error::input("need at least one rollout"));
    }
    let (mean, _) = forward(emg, rollout)?;
    let mut s = T::zero();
    for c in rollout_with_mean(&mean, prefix, t, rollout, n_mc, seed)? {
        s += score(&c, phi)?;
    }
    Ok(s / T::of_usize(n_mc))
}

/// Batch mean of `R · D(full sequence)`.
pub fn expected_reward<T: Real>(
    batch: &[GenOutput<T>],
    phi: &DiscriminatorParams<T>,
    physics: &PhysicsParams<T>,
    reward: &RewardModel<T>,
    dt: T,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::input("expected reward of an empty batch"));
    }
    let mut s = T::zero();
    for out in batch {
        s += reward.reward(&out.theta, &out.forces, physics, dt)? * score(out, phi)?;
    }
    Ok(s / T::of_usize(batch.len()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgSettings {
    pub lr: f64,
    pub n_mc: usize,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PgDiagnostics {
    /// Batch mean of `R · Q_{L−1}`.
    pub expected_reward: f64,
    pub mean_structural_reward: f64,
    /// Batch mean of `Q_{L−1}`.
    pub mean_action_value: f64,
    pub baseline: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One REINFORCE ascent step on `sigma`. Rollouts use the `rollout` policy.
/// Plain ascent `σ += α·g` unless an Adam state is supplied.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_step<T: Real>(
    sigma: &mut GeneratorParams<T>,
    rollout: &GeneratorParams<T>,
    batch: &[&Tensor<T>],
    phi: &DiscriminatorParams<T>,
    physics: &PhysicsParams<T>,
    reward: &RewardModel<T>,
    dt: T,
    settings: &PgSettings,
    baseline: &mut BaselineTracker,
    adam: Option<&mut Adam<T, GeneratorParams<T>>>,
    seed: u64,
) -> Result<PgDiagnostics> {
    if batch.is_empty() {
        return Err(Error::input("policy gradient step needs a nonempty batch"));
    }
    if settings.n_mc == 0 {
        return Err(Error::input("need at least one rollout"));
    }
    let b = T::lit(baseline.value());
    let mut grads = sigma.zeros_like();
    let (mut sum_rq_all, mut n_rq) = (0.0, 0usize);
    let mut diag = PgDiagnostics {
        baseline: b.as_f64(),
        ..Default::default()
    };
    let inv_var: Vec<T> = sigma
        .log_scale
        .data()
        .iter()
        .map(|&ls| (T::lit(-2.0) * ls).exp())
        .collect();
    for (i, emg) in batch.iter().enumerate() {
        let (mean, cache) = forward(emg, sigma)?;
        let out = sample_output(
            sigma,
            mean.clone(),
            Some(derive_seed(seed, "pg-noise", i as u64)),
        );
        let r = reward.reward(&out.theta, &out.forces, physics, dt)?;
        let (rmean, _) = forward(emg, rollout)?;
        let q = action_values(
            &out,
            &rmean,
            rollout,
            phi,
            settings.n_mc,
            derive_seed(seed, "pg-rollout", i as u64),
        )?;
        let l = out.frames();
        let norm = T::one() / T::of_usize(l * batch.len());
        let outs = mean.rows();
        let mut d_mean = Tensor::zeros(&[outs, l]);
        let mut d_log = vec![T::zero(); outs];
        for (t, &qt) in q.iter().enumerate() {
            let rq = r * qt;
            sum_rq_all += rq.as_f64();
            n_rq += 1;
            let w = (rq - b) * norm;
            for o in 0..outs {
                let dev = out.action.at2(o, t) - mean.at2(o, t);
                d_mean.row_mut(o)[t] = w * dev * inv_var[o];
                d_log[o] += w * (dev * dev * inv_var[o] - T::one());
            }
        }
        backward(sigma, &cache, &d_mean, &d_log, &mut grads);
        let q_last = q[l - 1].as_f64();
        diag.expected_reward += r.as_f64() * q_last;
        diag.mean_structural_reward += r.as_f64();
        diag.mean_action_value += q_last;
    }
    let n = batch.len() as f64;
    diag.expected_reward /= n;
    diag.mean_structural_reward /= n;
    diag.mean_action_value /= n;
    if !grads.is_finite() {
        return Err(Error::TrainingAbort(format!(
            "non-finite policy gradient; per-parameter norms [{}]",
            grads.norm_report()
        )));
    }
    diag.grad_norm = clip_grad_norm(&mut grads, T::lit(settings.clip_norm)).as_f64();
    match adam {
        Some(opt) => {
            grads.scale(-T::one());
            opt.lr = T::lit(settings.lr);
            opt.step(sigma, &grads);
        }
        None => sigma.axpy(T::lit(settings.lr), &grads),
    }
    baseline.push(sum_rq_all / n_rq as f64);
    Ok(diag)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgOptimizer {
    #[default]
    Plain,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Policy-gradient step size.
    pub lr: f64,
    pub pg_optimizer: PgOptimizer,
    pub epochs: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    /// Sequences per policy-gradient step.
    pub batch_size: usize,
    pub n_mc: usize,
    /// Discriminator epochs per d-step.
    pub d_epochs: usize,
    pub d_lr: f64,
    /// Positives (and as many negatives) per d-step.
    pub d_batch: usize,
    pub d_pretrain_epochs: usize,
    pub reward_mode: RewardMode,
    /// Residual temperature; taken from the first generated batch when unset.
    pub reward_temperature: Option<f64>,
    pub baseline_window: usize,
    pub clip_norm: f64,
    /// Epochs between refreshes of the rollout policy.
    pub rollout_sync: usize,
    /// Epochs without a 0.1% change of validation RMSE before stopping; 0 disables.
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    /// Epochs between FID/IS snapshots.
    pub metric_every: usize,
    pub checkpoint_every: usize,
    pub aux_epochs: usize,
    pub seed: u64,
    pub mle: MleConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            pg_optimizer: PgOptimizer::Plain,
            epochs: 200,
            g_steps: 1,
            d_steps: 1,
            batch_size: 8,
            n_mc: 4,
            d_epochs: 3,
            d_lr: 1e-3,
            d_batch: 32,
            d_pretrain_epochs: 50,
            reward_mode: RewardMode::Physics,
            reward_temperature: None,
            baseline_window: 32,
            clip_norm: 5.0,
            rollout_sync: 1,
            plateau_patience: 50,
            plateau_tol: 1e-3,
            metric_every: 10,
            checkpoint_every: 50,
            aux_epochs: 300,
            seed: 0,
            mle: MleConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be finite and >= 0");
        }
        if self.g_steps == 0
            || self.d_steps == 0
            || self.batch_size == 0
            || self.n_mc == 0
            || self.d_batch == 0
        {
            return bad("train.g_steps, d_steps, batch_size, n_mc and d_batch must be >= 1");
        }
        if self.rollout_sync == 0 || self.metric_every == 0 || self.checkpoint_every == 0 {
            return bad("train.rollout_sync, metric_every and checkpoint_every must be >= 1");
        }
        if let Some(k) = self.reward_temperature {
            if !(k > 0.0 && k.is_finite()) {
                return bad("train.reward_temperature must be > 0");
            }
        }
        if !(self.clip_norm > 0.0) || !(self.d_lr > 0.0) || !(self.mle.lr > 0.0) {
            return bad("train.clip_norm, d_lr and mle.lr must be > 0");
        }
        if !(0.0..=1.0).contains(&self.mle.lr_floor) || !(self.mle.clip_norm >= 0.0) {
            return bad("train.mle.lr_floor must be in [0, 1] and train.mle.clip_norm >= 0");
        }
        if self.generator.conv_width == 0
            || self.generator.pool_window == 0
            || self.generator.hidden == 0
        {
            return bad("train.generator sizes must be >= 1");
        }
        if self.discriminator.widths.is_empty() || self.discriminator.widths.contains(&0) {
            return bad("train.discriminator.widths must be nonempty and positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub expected_reward: f64,
    pub mean_structural_reward: f64,
    pub mean_action_value: f64,
    pub baseline: f64,
    pub grad_norm: f64,
    pub d_loss: f64,
    pub val_theta_rmse: f64,
    pub val_theta_r2: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub epoch: usize,
    pub fid: f64,
    pub inception_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Plateau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub ablation: Option<String>,
    pub reward_temperature: f64,
    /// What FID and IS are computed on.
    pub embedding: String,
    pub mle_curve: Vec<f64>,
    pub d_pretrain_curve: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<MetricSnapshot>,
    pub stop_reason: StopReason,
    pub checkpoints: Vec<String>,
    pub resumed_from: Option<usize>,
    /// Epoch of the returned generator, the one with the lowest eval θ RMSE.
    #[serde(default)]
    pub best_epoch: usize,
}

impl TrainReport {
    /// Every logged number except wall-clock times, in a fixed order.
    pub fn metric_values(&self) -> Vec<f64> {
        let mut v = vec![self.reward_temperature, self.best_epoch as f64];
        v.extend(&self.mle_curve);
        v.extend(&self.d_pretrain_curve);
        for e in &self.epochs {
            v.extend([
                e.epoch as f64,
                e.expected_reward,
                e.mean_structural_reward,
                e.mean_action_value,
                e.baseline,
                e.grad_norm,
                e.d_loss,
                e.val_theta_rmse,
                e.val_theta_r2.unwrap_or(f64::NAN),
            ]);
        }
        for s in &self.snapshots {
            v.extend([s.epoch as f64, s.fid, s.inception_score]);
        }
        v
    }

    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }
}

/// Everything a run produces in memory.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub generator: GeneratorParams<T>,
    pub discriminator: DiscriminatorParams<T>,
    /// Discriminator frozen after pretraining; defines the FID/IS features.
    pub metric_discriminator: DiscriminatorParams<T>,
    pub aux: AuxClassifier<T>,
    pub report: TrainReport,
}

impl<T: Real> TrainOutcome<T> {
    /// Final model checkpoint: generator, discriminator, metric embedding.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.generator.save_to(&mut ck);
        self.discriminator.export("discriminator.", &mut ck);
        self.metric_discriminator.export("metric.", &mut ck);
        self.aux.export("aux.", &mut ck);
        ck
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Receives one JSON object per line: a header, then one per epoch.
    pub log: Option<&'a mut dyn Write>,
}

pub const EMBEDDING_NOTE: &str =
    "highway features of the discriminator frozen after pretraining; IS posteriors from a 4-class excitation-pattern head";

/// Training-split examples with inverse-dynamics reference forces.
pub fn examples_for<T: Real>(
    dataset: &Dataset<T>,
    split: Split,
) -> Result<Vec<TrainingExample<T>>> {
    let physics = PhysicsParams::from_config(&dataset.config);
    dataset
        .split(split)
        .into_iter()
        .map(|s| TrainingExample::from_sample(s, &physics))
        .collect()
}

fn log_line<S: Serialize>(log: &mut Option<&mut dyn Write>, value: &S) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        let line = serde_json::to_string(value).map_err(|e| Error::input(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("train log", e))?;
    }
    Ok(())
}

struct State<T: Real> {
    sigma: GeneratorParams<T>,
    beta: GeneratorParams<T>,
    phi: DiscriminatorParams<T>,
    adam_d: Adam<T, DiscriminatorParams<T>>,
    adam_g: Adam<T, GeneratorParams<T>>,
    phi0: DiscriminatorParams<T>,
    aux: AuxClassifier<T>,
    baseline: BaselineTracker,
    val_history: Vec<f64>,
    best: GeneratorParams<T>,
    best_val: f64,
    kappa: T,
    report: TrainReport,
}

const CKPT_PREFIX: &str = "ckpt_";

fn ckpt_paths(dir: &Path, epoch: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{CKPT_PREFIX}{epoch:06}.bin")),
        dir.join(format!("{CKPT_PREFIX}{epoch:06}.json")),
    )
}

/// Most recent checkpoint epoch in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<usize> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix(CKPT_PREFIX)?
                .strip_suffix(".bin")?
                .parse()
                .ok()
        })
        .max()
}

impl<T: Real> State<T> {
    fn save(&mut self, dir: &Path, epoch: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (bin, json) = ckpt_paths(dir, epoch);
        let name = bin.file_name().unwrap().to_string_lossy().into_owned();
        if !self.report.checkpoints.contains(&name) {
            self.report.checkpoints.push(name);
        }
        let mut ck = Checkpoint::new();
        self.sigma.save_to(&mut ck);
        self.beta.export("rollout.", &mut ck);
        self.best.export("best.", &mut ck);
        ck.insert_scalar("state.best_val", self.best_val);
        self.phi.export("discriminator.", &mut ck);
        self.adam_d.export("adam_d.", &mut ck);
        self.adam_g.export("adam_g.", &mut ck);
        self.phi0.export("metric.", &mut ck);
        self.aux.export("aux.", &mut ck);
        ck.insert_scalar("state.epoch", epoch as f64);
        ck.insert_scalar("state.kappa", self.kappa.as_f64());
        let hist = |v: Vec<f64>| Tensor::from_vec(&[v.len()], v).expect("1-d");
        ck.insert("state.baseline", hist(self.baseline.history()));
        ck.insert("state.val_history", hist(self.val_history.clone()));
        let text =
            serde_json::to_vec_pretty(&self.report).map_err(|e| Error::input(e.to_string()))?;
        let tmp = json.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &json).map_err(|e| Error::io(&json, e))?;
        ck.save(&bin)
    }

    fn load(dir: &Path, epoch: usize, cfg: &TrainConfig) -> Result<Self> {
        let (bin, json) = ckpt_paths(dir, epoch);
        let ck = Checkpoint::load(&bin)?;
        let bad = |reason: String| Error::Checkpoint {
            path: bin.clone(),
            reason,
        };
        let sigma = GeneratorParams::from_checkpoint(&ck)?;
        let mut beta = sigma.clone();
        beta.import("rollout.", &ck)?;
        let mut best = sigma.clone();
        best.import("best.", &ck)?;
        let best_val = ck
            .scalar("state.best_val")
            .ok_or_else(|| bad("missing state.best_val".into()))?;
        let phi = DiscriminatorParams::from_checkpoint(&ck, "discriminator.")?;
        let mut adam_d = Adam::new(&phi, T::lit(cfg.d_lr));
        adam_d.import("adam_d.", &ck)?;
        let mut adam_g = Adam::new(&sigma, T::lit(cfg.lr));
        adam_g.import("adam_g.", &ck)?;
        let phi0 = DiscriminatorParams::from_checkpoint(&ck, "metric.")?;
        let aux = AuxClassifier::from_checkpoint(&ck, "aux.")?;
        let kappa = ck
            .scalar("state.kappa")
            .ok_or_else(|| bad("missing state.kappa".into()))?;
        let baseline = ck
            .get("state.baseline")
            .ok_or_else(|| bad("missing state.baseline".into()))?;
        let val = ck
            .get("state.val_history")
            .ok_or_else(|| bad("missing state.val_history".into()))?;
        let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let mut report: TrainReport =
            serde_json::from_slice(&text).map_err(|e| Error::Checkpoint {
                path: json.clone(),
                reason: e.to_string(),
            })?;
        report.config = cfg.clone();
        report.resumed_from = Some(epoch);
        Ok(Self {
            sigma,
            beta,
            phi,
            adam_d,
            adam_g,
            phi0,
            aux,
            baseline: BaselineTracker::restore(cfg.baseline_window, baseline.data()),
            val_history: val.data().to_vec(),
            best,
            best_val,
            kappa: T::lit(kappa),
            report,
        })
    }
}

fn predict_all<T: Real>(
    sigma: &GeneratorParams<T>,
    examples: &[TrainingExample<T>],
) -> Result<Vec<GenOutput<T>>> {
    examples
        .iter()
        .map(|e| generate(&e.emg, sigma, None))
        .collect()
}

fn theta_quality<T: Real>(
    sigma: &GeneratorParams<T>,
    examples: &[TrainingExample<T>],
) -> Result<(f64, Option<f64>)> {
    let preds = predict_all(sigma, examples)?;
    let p: Vec<T> = preds.iter().flat_map(|o| o.theta.iter().copied()).collect();
    let r: Vec<T> = examples
        .iter()
        .flat_map(|e| e.theta.iter().copied())
        .collect();
    let q = quality(&p, &r)?;
    Ok((q.rmse, q.r2))
}

fn snapshot<T: Real>(
    state: &State<T>,
    examples: &[TrainingExample<T>],
    real_features: &[Vec<T>],
    seed: u64,
    epoch: usize,
) -> Result<MetricSnapshot> {
    let mut feats = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let out = generate(
            &e.emg,
            &state.sigma,
            Some(derive_seed(seed, "fid-noise", i as u64)),
        )?;
        feats.push(embed_features(&out.forces, &out.theta, &state.phi0)?);
    }
    let f = fid(real_features, &feats)?;
    let post = feats
        .iter()
        .map(|x| state.aux.posterior(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSnapshot {
        epoch,
        fid: f.as_f64(),
        inception_score: inception_score(&post)?.as_f64(),
    })
}

fn check_finite_record(r: &EpochRecord) -> Result<()> {
    let vals = [
        r.expected_reward,
        r.mean_structural_reward,
        r.mean_action_value,
        r.baseline,
        r.grad_norm,
        r.d_loss,
        r.val_theta_rmse,
    ];
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingAbort(format!(
            "non-finite value logged at epoch {}: {r:?}",
            r.epoch
        )))
    }
}

/// Pretraining plus the alternating generator/discriminator loop.
pub fn adversarial_train<T: Real>(
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    dataset.validate()?;
    let train = examples_for(dataset, Split::Train)?;
    if train.is_empty() {
        return Err(Error::input("dataset has no training cycles"));
    }
    let mut val = examples_for(dataset, Split::Eval)?;
    if val.is_empty() {
        val = examples_for(dataset, Split::Test)?;
    }
    if val.is_empty() {
        val = train.clone();
    }
    let labels: Vec<usize> = dataset
        .indices(Split::Train)
        .iter()
        .map(|&i| dataset.patterns.get(i).map_or(0, |p| p.index()))
        .collect();
    let physics = PhysicsParams::<T>::from_config(&dataset.config);
    let dt = dataset.samples[0].dt;
    let seed = cfg.seed;
    let b = train[0].emg.rows();
    let n = train[0].forces.rows();
    let raw_pos: Vec<Tensor<T>> = train
        .iter()
        .map(|e| embed_raw(&e.forces, &e.theta))
        .collect::<Result<_>>()?;

    let resume_epoch = match (&opts.checkpoint_dir, opts.resume) {
        (Some(dir), true) => Some(latest_checkpoint(dir).ok_or_else(|| Error::Checkpoint {
            path: dir.clone(),
            reason: "no checkpoint to resume from".into(),
        })?),
        _ => None,
    };
    let mut state = match resume_epoch {
        Some(epoch) => State::load(opts.checkpoint_dir.as_ref().unwrap(), epoch, cfg)?,
        None => {
            let mut sigma =
                GeneratorParams::new(b, n, &cfg.generator, &mut rng::stream(seed, "init-gen", 0));
            sigma.fit_output_scales(&train);
            let mle_cfg = MleConfig {
                seed: derive_seed(seed, "mle", 0),
                ..cfg.mle.clone()
            };
            let mle_curve = mle_pretrain(&mut sigma, &train, &mle_cfg)?;
            let (best_val, _) = theta_quality(&sigma, &val)?;
            let mut phi = DiscriminatorParams::new(
                n + 1,
                &cfg.discriminator,
                &mut rng::stream(seed, "init-disc", 0),
            );
            phi.fit_standardization(&raw_pos);
            let pos: Vec<Tensor<T>> = raw_pos
                .iter()
                .map(|r| standardize(r, &phi))
                .collect::<Result<_>>()?;
            let mut neg = Vec::with_capacity(train.len());
            let mut pl_sum = 0.0;
            for (i, e) in train.iter().enumerate() {
                let out = generate(
                    &e.emg,
                    &sigma,
                    Some(derive_seed(seed, "pretrain-neg", i as u64)),
                )?;
                pl_sum += lagrangian_residual(&out.theta, &out.forces, &physics, dt)?.as_f64();
                neg.push(embed_generated(&out, &phi)?);
            }
            let mut adam_d = Adam::new(&phi, T::lit(cfg.d_lr));
            let d_curve =
                train_discriminator_with(&mut phi, &mut adam_d, &pos, &neg, cfg.d_pretrain_epochs)?;
            let phi0 = phi.clone();
            let feats: Vec<Vec<T>> = raw_pos
                .iter()
                .map(|r| crate::discriminator::features(&standardize(r, &phi0)?, &phi0))
                .collect::<Result<_>>()?;
            let mut aux = AuxClassifier::new(
                4,
                phi0.feature_width(),
                &mut rng::stream(seed, "init-aux", 0),
            );
            aux.fit(&feats, &labels, cfg.aux_epochs, T::lit(0.05))?;
            let auto = pl_sum / train.len() as f64;
            let kappa = match (cfg.reward_mode, cfg.reward_temperature) {
                (RewardMode::None, _) => 1.0,
                (_, Some(k)) => k,
                _ if auto > 0.0 && auto.is_finite() => auto,
                _ => 1.0,
            };
            State {
                adam_g: Adam::new(&sigma, T::lit(cfg.lr)),
                beta: sigma.clone(),
                best: sigma.clone(),
                sigma,
                phi,
                adam_d,
                phi0,
                aux,
                baseline: BaselineTracker::new(cfg.baseline_window),
                val_history: Vec::new(),
                best_val,
                kappa: T::lit(kappa),
                report: TrainReport {
                    config: cfg.clone(),
                    seed,
                    ablation: (cfg.reward_mode == RewardMode::None)
                        .then(|| "vanilla_gan".to_string()),
                    reward_temperature: kappa,
                    embedding: EMBEDDING_NOTE.into(),
                    mle_curve: mle_curve.iter().map(|v| v.as_f64()).collect(),
                    d_pretrain_curve: d_curve.iter().map(|v| v.as_f64()).collect(),
                    epochs: Vec::new(),
                    snapshots: Vec::new(),
                    stop_reason: StopReason::Budget,
                    checkpoints: Vec::new(),
                    resumed_from: None,
                    best_epoch: 0,
                },
            }
        }
    };
    let real_features: Vec<Vec<T>> = train
        .iter()
        .map(|e| embed_features(&e.forces, &e.theta, &state.phi0))
        .collect::<Result<_>>()?;
    // FID and IS need at least two sequences per set.
    let snapshots_defined = train.len() >= 2;
    log_line(
        &mut opts.log,
        &serde_json::json!({
            "event": "start",
            "seed": seed,
            "resumed_from": resume_epoch,
            "reward_temperature": state.kappa.as_f64(),
            "ablation": state.report.ablation,
            "config": cfg,
        }),
    )?;
    if resume_epoch.is_none() {
        if snapshots_defined {
            let s = snapshot(&state, &train, &real_features, seed, 0)?;
            state.report.snapshots.push(s);
        }
        if let Some(dir) = opts.checkpoint_dir.clone() {
            state.save(&dir, 0)?;
        }
    }

    let reward = RewardModel::new(cfg.reward_mode, state.kappa);
    let settings = PgSettings {
        lr: cfg.lr,
        n_mc: cfg.n_mc,
        clip_norm: cfg.clip_norm,
    };
    let start = resume_epoch.unwrap_or(0);
    let clock = Instant::now();
    let mut stop = StopReason::Budget;
    let mut epoch = start;
    while epoch < cfg.epochs {
        epoch += 1;
        let mut diag = PgDiagnostics::default();
        for g in 0..cfg.g_steps {
            let step = ((epoch - 1) * cfg.g_steps + g) as u64;
            let mut r = rng::stream(seed, "pg-batch", step);
            let idx = sample_indices(&mut r, train.len(), cfg.batch_size.min(train.len()));
            let batch: Vec<&Tensor<T>> = idx.iter().map(|i| &train[i].emg).collect();
            let d = policy_gradient_step(
                &mut state.sigma,
                &state.beta,
                &batch,
                &state.phi,
                &physics,
                &reward,
                dt,
                &settings,
                &mut state.baseline,
                (cfg.pg_optimizer == PgOptimizer::Adam).then_some(&mut state.adam_g),
                derive_seed(seed, "pg", step),
            )?;
            diag.expected_reward += d.expected_reward / cfg.g_steps as f64;
            diag.mean_structural_reward += d.mean_structural_reward / cfg.g_steps as f64;
            diag.mean_action_value += d.mean_action_value / cfg.g_steps as f64;
            diag.baseline += d.baseline / cfg.g_steps as f64;
            diag.grad_norm += d.grad_norm / cfg.g_steps as f64;
        }
        if !state.sigma.is_finite() {
            return Err(Error::TrainingAbort(format!(
                "generator diverged at epoch {epoch}; per-parameter norms [{}]",
                state.sigma.norm_report()
            )));
        }
        if epoch % cfg.rollout_sync == 0 {
            state.beta = state.sigma.clone();
        }
        let mut d_loss = 0.0;
        for d in 0..cfg.d_steps {
            let step = ((epoch - 1) * cfg.d_steps + d) as u64;
            let mut r = rng::stream(seed, "d-batch", step);
            let idx = sample_indices(&mut r, train.len(), cfg.d_batch.min(train.len()));
            let mut pos = Vec::with_capacity(idx.len());
            let mut neg = Vec::with_capacity(idx.len());
            for (j, i) in idx.iter().enumerate() {
                pos.push(standardize(&raw_pos[i], &state.phi)?);
                let noise = derive_seed(seed, "d-noise", step * 1_000_003 + j as u64);
                let out = generate(&train[i].emg, &state.sigma, Some(noise))?;
                neg.push(embed_generated(&out, &state.phi)?);
            }
            debug_assert_eq!(pos.len(), neg.len());
            let curve = train_discriminator_with(
                &mut state.phi,
                &mut state.adam_d,
                &pos,
                &neg,
                cfg.d_epochs,
            )?;
            d_loss += curve.last().map_or(0.0, |v| v.as_f64()) / cfg.d_steps as f64;
        }
        let (val_rmse, val_r2) = theta_quality(&state.sigma, &val)?;
        state.val_history.push(val_rmse);
        if val_rmse < state.best_val {
            state.best_val = val_rmse;
            state.best = state.sigma.clone();
            state.report.best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            expected_reward: diag.expected_reward,
            mean_structural_reward: diag.mean_structural_reward,
            mean_action_value: diag.mean_action_value,
            baseline: diag.baseline,
            grad_norm: diag.grad_norm,
            d_loss,
            val_theta_rmse: val_rmse,
            val_theta_r2: val_r2,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        };
        check_finite_record(&record)?;
        log_line(
            &mut opts.log,
            &serde_json::json!({"event": "epoch", "record": record}),
        )?;
        state.report.epochs.push(record);

        let p = cfg.plateau_patience;
        let h = &state.val_history;
        let plateau = p > 0 && h.len() > p && {
            let old = h[h.len() - 1 - p];
            (h[h.len() - 1] - old).abs() <= cfg.plateau_tol * old.abs()
        };
        if plateau {
            stop = StopReason::Plateau;
        }
        let last = plateau || epoch == cfg.epochs;
        if snapshots_defined && (epoch % cfg.metric_every == 0 || last) {
            let s = snapshot(&state, &train, &real_features, seed, epoch)?;
            log_line(
                &mut opts.log,
                &serde_json::json!({"event": "snapshot", "snapshot": s}),
            )?;
            state.report.snapshots.push(s);
        }
        state.report.stop_reason = stop;
        if let Some(dir) = opts.checkpoint_dir.clone() {
            if epoch % cfg.checkpoint_every == 0 || last {
                state.save(&dir, epoch)?;
            }
        }
        if plateau {
            break;
        }
    }
    state.report.stop_reason = stop;
    Ok(TrainOutcome {
        generator: state.best,
        discriminator: state.phi,
        metric_discriminator: state.phi0,
        aux: state.aux,
        report: state.report,
    })
}

/// Quality, FID and IS of generated sequences against references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_sequences: usize,
    pub quality: QualityReport,
    pub fid: Option<f64>,
    pub fid_error: Option<String>,
    pub inception_score: Option<f64>,
    pub embedding: String,
}

/// Scores `predictions` against `references` (quality) and the feature
/// distribution of `samples` against that of the references (FID, IS).
pub fn evaluation_report<T: Real>(
    split: &str,
    predictions: &[(Tensor<T>, Vec<T>)],
    samples: &[(Tensor<T>, Vec<T>)],
    references: &[TrainingExample<T>],
    metric_phi: &DiscriminatorParams<T>,
    aux: Option<&AuxClassifier<T>>,
) -> Result<EvalReport> {
    let pf: Vec<&Tensor<T>> = predictions.iter().map(|p| &p.0).collect();
    let pt: Vec<&[T]> = predictions.iter().map(|p| p.1.as_slice()).collect();
    let rf: Vec<&Tensor<T>> = references.iter().map(|r| &r.forces).collect();
    let rt: Vec<&[T]> = references.iter().map(|r| r.theta.as_slice()).collect();
    let quality = quality_report(&pf, &pt, &rf, &rt)?;
    let real: Vec<Vec<T>> = references
        .iter()
        .map(|r| embed_features(&r.forces, &r.theta, metric_phi))
        .collect::<Result<_>>()?;
    let gen: Vec<Vec<T>> = samples
        .iter()
        .map(|s| embed_features(&s.0, &s.1, metric_phi))
        .collect::<Result<_>>()?;
    let (fid_v, fid_error) = match fid(&real, &gen) {
        Ok(v) => (Some(v.as_f64()), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let is = match aux {
        Some(a) if gen.len() >= 2 => {
            let post = gen
                .iter()
                .map(|x| a.posterior(x))
                .collect::<Result<Vec<_>>>()?;
            Some(inception_score(&post)?.as_f64())
        }
        _ => None,
    };
    Ok(EvalReport {
        split: split.into(),
        n_sequences: references.len(),
        quality,
        fid: fid_v,
        fid_error,
        inception_score: is,
        embedding: EMBEDDING_NOTE.into(),
    })
}

/// Evaluates a generator on one split: mean predictions for quality, seeded
/// samples for FID/IS.
pub fn evaluate_generator<T: Real>(
    sigma: &GeneratorParams<T>,
    dataset: &Dataset<T>,
    split: Split,
    metric_phi: &DiscriminatorParams<T>,
    aux: Option<&AuxClassifier<T>>,
    seed: u64,
) -> Result<EvalReport> {
    let refs = examples_for(dataset, split)?;
    if refs.is_empty() {
        return Err(Error::input(format!("split `{split}` is empty")));
    }
    let mut preds = Vec::with_capacity(refs.len());
    let mut samples = Vec::with_capacity(refs.len());
    for (i, r) in refs.iter().enumerate() {
        let (mean, _) = forward(&r.emg, sigma)?;
        let p = sample_output(sigma, mean.clone(), None);
        let s = sample_output(sigma, mean, Some(derive_seed(seed, "eval-noise", i as u64)));
        preds.push((p.forces, p.theta));
        samples.push((s.forces, s.theta));
    }
    evaluation_report(&split.to_string(), &preds, &samples, &refs, metric_phi, aux)
}

/// Keeps the first `k` training cycles and every test/eval cycle.
pub fn restrict_train<T: Real>(dataset: &Dataset<T>, k: usize) -> Result<Dataset<T>> {
    let train = dataset.indices(Split::Train);
    if k == 0 || k > train.len() {
        return Err(Error::input(format!(
            "shot count {k} outside 1..={}",
            train.len()
        )));
    }
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.splits[i] != Split::Train || train[..k].contains(&i))
        .collect();
    let mut d = dataset.clone();
    d.samples = keep.iter().map(|&i| dataset.samples[i].clone()).collect();
    d.splits = keep.iter().map(|&i| dataset.splits[i]).collect();
    d.patterns = keep
        .iter()
        .filter_map(|&i| dataset.patterns.get(i).copied())
        .collect();
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRow {
    pub shots: usize,
    pub theta: crate::metrics::ChannelQuality,
    /// Percent of baseline PSNR.
    pub psnr_ratio: f64,
    pub r2_ratio: Option<f64>,
    /// Baseline RMSE over achieved RMSE, percent.
    pub rmse_ratio: f64,
    pub srcc_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowShotTable {
    pub baseline_shots: usize,
    pub baseline: crate::metrics::ChannelQuality,
    pub rows: Vec<ShotRow>,
}

impl LowShotTable {
    /// Spearman correlation of shot count with the R² ratio.
    pub fn r2_trend(&self) -> Option<f64> {
        let (s, r): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter_map(|row| Some((row.shots as f64, row.r2_ratio?)))
            .unzip();
        spearman(&s, &r)
    }
}

fn test_theta_quality<T: Real>(
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<crate::metrics::ChannelQuality> {
    let out = adversarial_train(dataset, cfg, RunOptions::default())?;
    let mut refs = examples_for(dataset, Split::Test)?;
    if refs.is_empty() {
        refs = examples_for(dataset, Split::Eval)?;
    }
    let preds = predict_all(&out.generator, &refs)?;
    let p: Vec<T> = preds.iter().flat_map(|o| o.theta.iter().copied()).collect();
    let r: Vec<T> = refs.iter().flat_map(|e| e.theta.iter().copied()).collect();
    quality(&p, &r)
}

fn pct(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b != 0.0 => Some(100.0 * a / b),
        _ => None,
    }
}

/// Trains from scratch on the first `k` training cycles for each shot count
/// and reports held-out angle metrics as percentages of the full-data run.
pub fn lowshot_sweep<T: Real>(
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    shots: &[usize],
) -> Result<LowShotTable> {
    let n_train = dataset.indices(Split::Train).len();
    if let Some(&bad) = shots.iter().find(|&&k| k == 0 || k > n_train) {
        return Err(Error::input(format!(
            "shot count {bad} outside 1..={n_train}"
        )));
    }
    let baseline = test_theta_quality(dataset, cfg)?;
    let mut rows = Vec::with_capacity(shots.len());
    for &k in shots {
        let q = if k == n_train {
            baseline.clone()
        } else {
            test_theta_quality(&restrict_train(dataset, k)?, cfg)?
        };
        rows.push(ShotRow {
            shots: k,
            psnr_ratio: 100.0 * q.psnr_db / baseline.psnr_db,
            r2_ratio: pct(q.r2, baseline.r2),
            rmse_ratio: if q.rmse > 0.0 {
                100.0 * baseline.rmse / q.rmse
            } else {
                100.0
            },
            srcc_ratio: pct(q.srcc, baseline.srcc),
            theta: q,
        });
    }
    Ok(LowShotTable {
        baseline_shots: n_train,
        baseline,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseRun {
    pub reward_mode: RewardMode,
    pub snapshots: Vec<MetricSnapshot>,
    pub final_fid: f64,
    /// Spearman correlation of snapshot epoch with FID.
    pub fid_trend: Option<f64>,
    pub dataset_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapsePair {
    pub seed: u64,
    pub physics: CollapseRun,
    pub vanilla: CollapseRun,
    /// Vanilla minus physics final FID.
    pub fid_delta: f64,
}

fn collapse_run<T: Real>(
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    hash: &str,
) -> Result<CollapseRun> {
    let out = adversarial_train(dataset, cfg, RunOptions::default())?;
    let snaps = out.report.snapshots;
    let e: Vec<f64> = snaps.iter().map(|s| s.epoch as f64).collect();
    let f: Vec<f64> = snaps.iter().map(|s| s.fid).collect();
    Ok(CollapseRun {
        reward_mode: cfg.reward_mode,
        final_fid: *f.last().unwrap_or(&f64::NAN),
        fid_trend: spearman(&e, &f),
        snapshots: snaps,
        dataset_hash: hash.into(),
    })
}

/// Paired physics-reward and vanilla runs per seed with identical data,
/// budgets and seeds.
pub fn collapse_comparison<T: Real>(
    dataset: &Dataset<T>,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<CollapsePair>> {
    let hash = crate::io::dataset_hash(dataset);
    seeds
        .iter()
        .map(|&seed| {
            let physics = collapse_run(
                dataset,
                &TrainConfig {
                    seed,
                    reward_mode: RewardMode::Physics,
                    ..cfg.clone()
                },
                &hash,
            )?;
            let vanilla = collapse_run(
                dataset,
                &TrainConfig {
                    seed,
                    reward_mode: RewardMode::None,
                    ..cfg.clone()
                },
                &hash,
            )?;
            Ok(CollapsePair {
                seed,
                fid_delta: vanilla.final_fid - physics.final_fid,
                physics,
                vanilla,
            })
        })
        .collect()
}
