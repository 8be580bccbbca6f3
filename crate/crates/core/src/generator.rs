//! Sequence generator mapping a `B × L` sEMG cycle to `N` muscle forces and a
//! joint angle per frame.
//!
//! Per frame `t`: a `B`-channel, width-2 convolution runs over the last few
//! frames, the conv outputs of that window are max-pooled, an LSTM step
//! consumes the pooled features, and the pooled features are concatenated
//! onto the LSTM output before an affine head. The head gives the mean of a
//! per-channel Gaussian in normalized units; sampling uses a learned
//! per-channel log-scale.
//!
//! Forces are emitted as `force_scale · max(y, 0)` with a softplus on the
//! mean, angles as `theta_scale · y`, where `y` is the Gaussian sample.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynsim::MotionSample;
use crate::error::{Error, Result};
use crate::nn::layers::{
    affine_backward, affine_into, conv1d, conv1d_backward, glorot_bound, lstm_step,
    lstm_step_backward, LstmCache, LstmParams,
};
use crate::nn::params::{clip_grad_norm, init_uniform, Adam, ParamSet};
use crate::nn::{Checkpoint, Tensor};
use crate::physics::{reference_forces, PhysicsParams};
use crate::rng::{self, SeededRng};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub filters: usize,
    pub hidden: usize,
    /// Conv width over time.
    pub conv_width: usize,
    /// Conv positions pooled per frame.
    pub pool_window: usize,
    pub log_scale_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            filters: 16,
            hidden: 32,
            conv_width: 2,
            pool_window: 3,
            log_scale_init: -2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    /// `K × B × w`
    pub conv_kernels: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub lstm: LstmParams<T>,
    /// `(N + 1) × (K + H)`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    /// Per output channel, natural log of the Gaussian scale.
    pub log_scale: Tensor<T>,
    /// Newtons per normalized unit, one per muscle.
    pub force_scale: Tensor<T>,
    /// Radians per normalized unit.
    pub theta_scale: Tensor<T>,
    pub pool_window: usize,
}

impl<T: Real> GeneratorParams<T> {
    pub fn new(
        emg_channels: usize,
        muscles: usize,
        cfg: &GeneratorConfig,
        rng: &mut SeededRng,
    ) -> Self {
        let mut p = Self::zeros(emg_channels, muscles, cfg);
        let (k, h, w) = (cfg.filters, cfg.hidden, cfg.conv_width);
        init_uniform(&mut p.conv_kernels, glorot_bound(emg_channels * w, k), rng);
        init_uniform(&mut p.lstm.w_x, glorot_bound(k, h), rng);
        init_uniform(&mut p.lstm.w_h, glorot_bound(h, h), rng);
        init_uniform(&mut p.head_w, glorot_bound(k + h, muscles + 1), rng);
        for j in h..2 * h {
            p.lstm.bias.data_mut()[j] = T::one();
        }
        p
    }

    /// All-zero weights; log-scales at the configured init, unit output scales.
    pub fn zeros(emg_channels: usize, muscles: usize, cfg: &GeneratorConfig) -> Self {
        let (k, h, w) = (cfg.filters, cfg.hidden, cfg.conv_width);
        Self {
            conv_kernels: Tensor::zeros(&[k, emg_channels, w]),
            conv_bias: Tensor::zeros(&[k]),
            lstm: LstmParams::zeros(k, h),
            head_w: Tensor::zeros(&[muscles + 1, k + h]),
            head_b: Tensor::zeros(&[muscles + 1]),
            log_scale: Tensor::filled(&[muscles + 1], T::lit(cfg.log_scale_init)),
            force_scale: Tensor::filled(&[muscles], T::one()),
            theta_scale: Tensor::filled(&[1], T::one()),
            pool_window: cfg.pool_window,
        }
    }

    pub fn emg_channels(&self) -> usize {
        self.conv_kernels.shape()[1]
    }

    pub fn muscles(&self) -> usize {
        self.head_b.len() - 1
    }

    pub fn filters(&self) -> usize {
        self.conv_kernels.shape()[0]
    }

    pub fn conv_width(&self) -> usize {
        self.conv_kernels.shape()[2]
    }

    /// Frames of left context consumed before the first output frame.
    fn left_pad(&self) -> usize {
        self.conv_width() - 1 + self.pool_window - 1
    }

    /// Sets the normalization from reference data: RMS of each force channel
    /// and of the angle (floored so silent channels keep a unit scale).
    pub fn fit_output_scales(&mut self, examples: &[TrainingExample<T>]) {
        let rms = |vals: &mut dyn Iterator<Item = T>| {
            let (mut s, mut n) = (T::zero(), 0usize);
            for v in vals {
                s += v * v;
                n += 1;
            }
            let r = (s / T::of_usize(n.max(1))).sqrt();
            if r > T::lit(1e-9) {
                r
            } else {
                T::one()
            }
        };
        for m in 0..self.muscles() {
            self.force_scale.data_mut()[m] = rms(&mut examples
                .iter()
                .flat_map(|e| e.forces.row(m).iter().copied()));
        }
        self.theta_scale.data_mut()[0] =
            rms(&mut examples.iter().flat_map(|e| e.theta.iter().copied()));
    }

    /// Rebuilds parameters from the `generator.` tensors of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| {
            ckpt.get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::input(format!("checkpoint is missing `{name}`")))
        };
        let conv = shape("generator.conv.kernels")?;
        let head = shape("generator.head.w")?;
        let hidden = shape("generator.lstm.w_h")?[1];
        let pool = ckpt.scalar("generator.arch.pool_window").unwrap_or(3.0) as usize;
        if conv.len() != 3 || head.len() != 2 {
            return Err(Error::input("malformed generator tensors"));
        }
        let cfg = GeneratorConfig {
            filters: conv[0],
            hidden,
            conv_width: conv[2],
            pool_window: pool,
            log_scale_init: 0.0,
        };
        let mut p = Self::zeros(conv[1], head[0] - 1, &cfg);
        p.import("generator.", ckpt)?;
        Ok(p)
    }

    pub fn save_to(&self, ckpt: &mut Checkpoint) {
        self.export("generator.", ckpt);
        ckpt.insert_scalar("generator.arch.pool_window", self.pool_window as f64);
    }
}

impl<T: Real> ParamSet<T> for GeneratorParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("conv.kernels", &self.conv_kernels);
        f("conv.bias", &self.conv_bias);
        f("lstm.w_x", &self.lstm.w_x);
        f("lstm.w_h", &self.lstm.w_h);
        f("lstm.bias", &self.lstm.bias);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
        f("log_scale", &self.log_scale);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("conv.kernels", &mut self.conv_kernels);
        f("conv.bias", &mut self.conv_bias);
        f("lstm.w_x", &mut self.lstm.w_x);
        f("lstm.w_h", &mut self.lstm.w_h);
        f("lstm.bias", &mut self.lstm.bias);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
        f("log_scale", &mut self.log_scale);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("norm.force_scale", &self.force_scale);
        f("norm.theta_scale", &self.theta_scale);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("norm.force_scale", &mut self.force_scale);
        f("norm.theta_scale", &mut self.theta_scale);
    }
}

/// One generated cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct GenOutput<T> {
    /// `N × L`, newtons, never negative.
    pub forces: Tensor<T>,
    /// Radians.
    pub theta: Vec<T>,
    /// Per-frame Gaussian log-density of `action`, summed over channels.
    pub log_density: Vec<T>,
    /// `(N + 1) × L` head means, normalized units.
    pub mean: Tensor<T>,
    /// `(N + 1) × L` sampled values, normalized units.
    pub action: Tensor<T>,
}

impl<T: Real> GenOutput<T> {
    pub fn frames(&self) -> usize {
        self.theta.len()
    }
}

/// Intermediate values of a forward pass kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    padded: Tensor<T>,
    argmax: Vec<Vec<usize>>,
    lstm: Vec<LstmCache<T>>,
    features: Vec<Vec<T>>,
    /// Pre-activation head outputs, `(N + 1) × L`.
    head_pre: Tensor<T>,
}

/// Computes the head means (normalized units, `(N + 1) × L`).
pub fn forward<T: Real>(
    emg: &Tensor<T>,
    params: &GeneratorParams<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let b = params.emg_channels();
    if emg.shape().len() != 2 || emg.rows() != b {
        return Err(Error::shape(
            "generator emg",
            format!("[{b}, L]"),
            format!("{:?}", emg.shape()),
        ));
    }
    let l = emg.cols();
    if l < params.conv_width() {
        return Err(Error::input(format!(
            "emg has {l} frames, shorter than the conv width"
        )));
    }
    if !emg.is_finite() {
        return Err(Error::input("emg contains NaN or Inf"));
    }
    let pad = params.left_pad();
    let mut padded = Tensor::zeros(&[b, l + pad]);
    for c in 0..b {
        let src = emg.row(c);
        let dst = padded.row_mut(c);
        dst[..pad].fill(src[0]);
        dst[pad..].copy_from_slice(src);
    }
    let conv = conv1d(&padded, &params.conv_kernels, params.conv_bias.data())?;
    let k = params.filters();
    let hs = params.lstm.hidden();
    let win = params.pool_window;
    let outs = params.muscles() + 1;

    let mut h = vec![T::zero(); hs];
    let mut c = vec![T::zero(); hs];
    let mut argmax = Vec::with_capacity(l);
    let mut lstm_caches = Vec::with_capacity(l);
    let mut features = Vec::with_capacity(l);
    let mut head_pre = Tensor::zeros(&[outs, l]);
    let mut mean = Tensor::zeros(&[outs, l]);
    let mut z = vec![T::zero(); outs];
    for t in 0..l {
        let mut pooled = Vec::with_capacity(k);
        let mut idx = Vec::with_capacity(k);
        for f in 0..k {
            let row = &conv.row(f)[t..t + win];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            pooled.push(row[best]);
            idx.push(t + best);
        }
        let (h_new, c_new, cache) = lstm_step(&pooled, &h, &c, &params.lstm)?;
        h = h_new;
        c = c_new;
        let mut feat = pooled;
        feat.extend_from_slice(&h);
        z.copy_from_slice(params.head_b.data());
        affine_into(&feat, &params.head_w, &mut z);
        for (o, &zo) in z.iter().enumerate() {
            head_pre.row_mut(o)[t] = zo;
            mean.row_mut(o)[t] = if o + 1 < outs { zo.softplus() } else { zo };
        }
        argmax.push(idx);
        lstm_caches.push(cache);
        features.push(feat);
    }
    Ok((
        mean,
        ForwardCache {
            padded,
            argmax,
            lstm: lstm_caches,
            features,
            head_pre,
        },
    ))
}

/// Accumulates parameter gradients given the upstream gradient with respect
/// to the head means (`d_mean`, `(N + 1) × L`) and a direct gradient with
/// respect to the log-scales.
pub fn backward<T: Real>(
    params: &GeneratorParams<T>,
    cache: &ForwardCache<T>,
    d_mean: &Tensor<T>,
    d_log_scale: &[T],
    grads: &mut GeneratorParams<T>,
) {
    let outs = params.muscles() + 1;
    let l = d_mean.cols();
    let k = params.filters();
    let hs = params.lstm.hidden();
    for (g, &d) in grads.log_scale.data_mut().iter_mut().zip(d_log_scale) {
        *g += d;
    }
    let mut d_conv = Tensor::zeros(&[k, cache.padded.cols() - params.conv_width() + 1]);
    let mut dh_next = vec![T::zero(); hs];
    let mut dc_next = vec![T::zero(); hs];
    let mut dz = vec![T::zero(); outs];
    let mut dfeat = vec![T::zero(); k + hs];
    for t in (0..l).rev() {
        for o in 0..outs {
            let dm = d_mean.at2(o, t);
            dz[o] = if o + 1 < outs {
                dm * cache.head_pre.at2(o, t).sigmoid()
            } else {
                dm
            };
        }
        dfeat.fill(T::zero());
        affine_backward(
            &cache.features[t],
            &params.head_w,
            &dz,
            &mut grads.head_w,
            grads.head_b.data_mut(),
            Some(&mut dfeat),
        );
        for j in 0..hs {
            dh_next[j] += dfeat[k + j];
        }
        let (dx, dh, dc) = lstm_step_backward(
            &params.lstm,
            &cache.lstm[t],
            &dh_next,
            &dc_next,
            &mut grads.lstm,
        );
        dh_next = dh;
        dc_next = dc;
        for f in 0..k {
            let g = dfeat[f] + dx[f];
            d_conv.row_mut(f)[cache.argmax[t][f]] += g;
        }
    }
    conv1d_backward(
        &cache.padded,
        &params.conv_kernels,
        &d_conv,
        &mut grads.conv_kernels,
        grads.conv_bias.data_mut(),
        None,
    );
}

fn log_normal<T: Real>(y: T, mu: T, log_s: T) -> T {
    let s = log_s.exp();
    let u = (y - mu) / s;
    T::lit(-0.5) * u * u - log_s - T::lit(0.5 * (2.0 * PI).ln())
}

/// Turns normalized samples into emitted forces/angles and per-frame log-densities.
fn emit<T: Real>(params: &GeneratorParams<T>, mean: Tensor<T>, action: Tensor<T>) -> GenOutput<T> {
    let n = params.muscles();
    let l = mean.cols();
    let mut forces = Tensor::zeros(&[n, l]);
    for m in 0..n {
        let s = params.force_scale.data()[m];
        for (f, &y) in forces.row_mut(m).iter_mut().zip(action.row(m)) {
            *f = s * y.max(T::zero());
        }
    }
    let ts = params.theta_scale.data()[0];
    let theta = action.row(n).iter().map(|&y| ts * y).collect();
    let log_density = (0..l)
        .map(|t| {
            (0..=n)
                .map(|o| log_normal(action.at2(o, t), mean.at2(o, t), params.log_scale.data()[o]))
                .sum()
        })
        .collect();
    GenOutput {
        forces,
        theta,
        log_density,
        mean,
        action,
    }
}

/// Draws Gaussian samples around `mean` for frames `from..L`, keeping
/// earlier frames of `base`. Noise is drawn frame by frame, channel by channel.
fn sample_from<T: Real>(
    params: &GeneratorParams<T>,
    mean: &Tensor<T>,
    base: &Tensor<T>,
    from: usize,
    rng: &mut SeededRng,
) -> Tensor<T> {
    let mut action = base.clone();
    let scales: Vec<T> = params.log_scale.data().iter().map(|v| v.exp()).collect();
    for t in from..mean.cols() {
        for (o, &s) in scales.iter().enumerate() {
            action.row_mut(o)[t] = mean.at2(o, t) + s * rng::normal::<T>(rng);
        }
    }
    action
}

/// Runs the generator. With `noise_seed = None` the outputs are the head
/// means (the noise-free prediction).
pub fn generate<T: Real>(
    emg: &Tensor<T>,
    params: &GeneratorParams<T>,
    noise_seed: Option<u64>,
) -> Result<GenOutput<T>> {
    let (mean, _) = forward(emg, params)?;
    Ok(sample_output(params, mean, noise_seed))
}

/// Samples an output around precomputed means.
pub fn sample_output<T: Real>(
    params: &GeneratorParams<T>,
    mean: Tensor<T>,
    noise_seed: Option<u64>,
) -> GenOutput<T> {
    let action = match noise_seed {
        Some(seed) => sample_from(
            params,
            &mean,
            &mean,
            0,
            &mut rng::stream(seed, "gen-noise", 0),
        ),
        None => mean.clone(),
    };
    emit(params, mean, action)
}

/// Completes `prefix` after frame `t` with `n_rollouts` fresh noise draws.
/// Frames `0..=t` of every completion equal the prefix exactly.
pub fn mc_rollout<T: Real>(
    emg: &Tensor<T>,
    prefix: &GenOutput<T>,
    t: usize,
    params: &GeneratorParams<T>,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<GenOutput<T>>> {
    let (mean, _) = forward(emg, params)?;
    rollout_with_mean(&mean, prefix, t, params, n_rollouts, seed)
}

/// [`mc_rollout`] with the rollout policy's means already computed.
pub fn rollout_with_mean<T: Real>(
    mean: &Tensor<T>,
    prefix: &GenOutput<T>,
    t: usize,
    params: &GeneratorParams<T>,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<GenOutput<T>>> {
    let l = prefix.frames();
    if t >= l {
        return Err(Error::input(format!(
            "rollout prefix end {t} must be < L = {l}"
        )));
    }
    if mean.shape() != prefix.action.shape() {
        return Err(Error::shape(
            "rollout",
            format!("{:?}", prefix.action.shape()),
            format!("{:?}", mean.shape()),
        ));
    }
    let base = rng::derive_seed(seed, "rollout-t", t as u64);
    Ok((0..n_rollouts)
        .map(|j| {
            let mut r = rng::stream(base, "rollout", j as u64);
            let action = sample_from(params, mean, &prefix.action, t + 1, &mut r);
            emit(params, mean.clone(), action)
        })
        .collect())
}

/// One supervised cycle: sEMG input with reference forces and angle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample<T> {
    pub emg: Tensor<T>,
    pub forces: Tensor<T>,
    pub theta: Vec<T>,
    pub dt: T,
}

impl<T: Real> TrainingExample<T> {
    /// Pairs a cycle's sEMG with its angle and inverse-dynamics reference forces.
    pub fn from_sample(sample: &MotionSample<T>, physics: &PhysicsParams<T>) -> Result<Self> {
        Ok(Self {
            emg: sample.emg.clone(),
            forces: reference_forces(&sample.theta, physics, sample.dt)?,
            theta: sample.theta.clone(),
            dt: sample.dt,
        })
    }

    /// Reference values in the generator's normalized units, `(N + 1) × L`.
    pub fn normalized_target(&self, params: &GeneratorParams<T>) -> Tensor<T> {
        let n = params.muscles();
        let l = self.theta.len();
        let mut y = Tensor::zeros(&[n + 1, l]);
        for m in 0..n {
            let s = params.force_scale.data()[m];
            for (dst, &f) in y.row_mut(m).iter_mut().zip(self.forces.row(m)) {
                *dst = f / s;
            }
        }
        let ts = params.theta_scale.data()[0];
        for (dst, &th) in y.row_mut(n).iter_mut().zip(&self.theta) {
            *dst = th / ts;
        }
        y
    }
}

/// Mean Gaussian negative log-likelihood of one example (per frame and
/// channel) and its gradient.
pub fn nll_and_grad<T: Real>(
    params: &GeneratorParams<T>,
    example: &TrainingExample<T>,
    grads: &mut GeneratorParams<T>,
) -> Result<T> {
    let (mean, cache) = forward(&example.emg, params)?;
    let target = example.normalized_target(params);
    if target.shape() != mean.shape() {
        return Err(Error::shape(
            "mle target",
            format!("{:?}", mean.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let (outs, l) = (mean.rows(), mean.cols());
    let norm = T::of_usize(outs * l);
    let mut d_mean = Tensor::zeros(&[outs, l]);
    let mut d_log_scale = vec![T::zero(); outs];
    let mut loss = T::zero();
    for o in 0..outs {
        let log_s = params.log_scale.data()[o];
        let inv_var = (T::lit(-2.0) * log_s).exp();
        for t in 0..l {
            let r = target.at2(o, t) - mean.at2(o, t);
            loss -= log_normal(target.at2(o, t), mean.at2(o, t), log_s);
            d_mean.row_mut(o)[t] = -r * inv_var / norm;
            d_log_scale[o] += (T::one() - r * r * inv_var) / norm;
        }
    }
    backward(params, &cache, &d_mean, &d_log_scale, grads);
    Ok(loss / norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// The learning rate follows a cosine from `lr` down to `lr · lr_floor`.
    pub lr_floor: f64,
    /// Minibatch gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            lr_floor: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl MleConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs.max(1) as f64;
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// Maximum-likelihood pretraining with Adam over shuffled minibatches.
/// Returns the mean training NLL of every epoch.
pub fn mle_pretrain<T: Real>(
    params: &mut GeneratorParams<T>,
    examples: &[TrainingExample<T>],
    cfg: &MleConfig,
) -> Result<Vec<T>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if examples.is_empty() {
        return Err(Error::input(
            "MLE pretraining needs a nonempty training split",
        ));
    }
    let mut opt = Adam::new(&*params, T::lit(cfg.lr));
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = T::lit(cfg.lr_at(epoch));
        let mut rng = rng::stream(cfg.seed, "mle-shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = T::zero();
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let mut grads = params.zeros_like();
            let mut loss = T::zero();
            for &i in chunk {
                loss += nll_and_grad(params, &examples[i], &mut grads)?;
            }
            let scale = T::one() / T::of_usize(chunk.len());
            grads.scale(scale);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingAbort(format!(
                    "non-finite MLE loss at epoch {epoch}, batch {bi}: loss={}, grad norms [{}]",
                    loss.as_f64(),
                    grads.norm_report()
                )));
            }
            epoch_loss += loss;
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, T::lit(cfg.clip_norm));
            }
            opt.step(params, &grads);
        }
        curve.push(epoch_loss / T::of_usize(examples.len()));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_emg(b: usize, l: usize) -> Tensor<f64> {
        let data = (0..b * l)
            .map(|i| 0.5 + 0.4 * (i as f64 * 0.37).sin())
            .collect();
        Tensor::from_vec(&[b, l], data).unwrap()
    }

    #[test]
    fn zero_weights_give_constant_outputs() {
        let cfg = GeneratorConfig::default();
        let p = GeneratorParams::<f64>::zeros(2, 2, &cfg);
        let out = generate(&toy_emg(2, 12), &p, None).unwrap();
        let level = 0.0f64.softplus();
        assert!(out.forces.data().iter().all(|&f| (f - level).abs() < 1e-15));
        assert!(out.theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let p = GeneratorParams::<f64>::new(2, 2, &GeneratorConfig::default(), &mut rng::seeded(1));
        let emg = toy_emg(2, 20);
        assert_eq!(
            generate(&emg, &p, Some(9)).unwrap(),
            generate(&emg, &p, Some(9)).unwrap()
        );
        assert_ne!(
            generate(&emg, &p, Some(9)).unwrap(),
            generate(&emg, &p, Some(10)).unwrap()
        );
    }

    #[test]
    fn forces_never_negative() {
        let mut p =
            GeneratorParams::<f64>::new(2, 2, &GeneratorConfig::default(), &mut rng::seeded(4));
        p.log_scale.fill(1.0);
        let out = generate(&toy_emg(2, 30), &p, Some(3)).unwrap();
        assert!(out.forces.data().iter().all(|&f| f >= 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = GeneratorParams::<f64>::zeros(2, 2, &GeneratorConfig::default());
        assert!(matches!(
            generate(&toy_emg(3, 10), &p, None),
            Err(Error::Shape { .. })
        ));
        let out = generate(&toy_emg(2, 10), &p, None).unwrap();
        assert!(mc_rollout(&toy_emg(2, 10), &out, 10, &p, 2, 0).is_err());
    }

    #[test]
    fn rollout_at_last_frame_returns_prefix() {
        let p = GeneratorParams::<f64>::new(2, 2, &GeneratorConfig::default(), &mut rng::seeded(2));
        let emg = toy_emg(2, 15);
        let prefix = generate(&emg, &p, Some(5)).unwrap();
        for c in mc_rollout(&emg, &prefix, 14, &p, 3, 11).unwrap() {
            assert_eq!(c, prefix);
        }
    }

    #[test]
    fn rollouts_keep_prefix_and_resample_the_rest() {
        let p = GeneratorParams::<f64>::new(2, 2, &GeneratorConfig::default(), &mut rng::seeded(2));
        let emg = toy_emg(2, 15);
        let prefix = generate(&emg, &p, Some(5)).unwrap();
        let a = mc_rollout(&emg, &prefix, 6, &p, 1, 1).unwrap().remove(0);
        let b = mc_rollout(&emg, &prefix, 6, &p, 1, 2).unwrap().remove(0);
        assert_eq!(a.action.slice_cols(0, 7), prefix.action.slice_cols(0, 7));
        assert_eq!(b.action.slice_cols(0, 7), prefix.action.slice_cols(0, 7));
        assert_ne!(a.action.slice_cols(7, 15), b.action.slice_cols(7, 15));
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let mut p =
            GeneratorParams::<f64>::new(2, 2, &GeneratorConfig::default(), &mut rng::seeded(2));
        let before = p.clone();
        let cfg = MleConfig {
            epochs: 0,
            ..MleConfig::default()
        };
        assert!(mle_pretrain(&mut p, &[], &cfg).unwrap().is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut p =
            GeneratorParams::<f64>::new(3, 2, &GeneratorConfig::default(), &mut rng::seeded(8));
        p.force_scale.data_mut()[1] = 12.5;
        let mut ck = Checkpoint::new();
        p.save_to(&mut ck);
        let back =
            GeneratorParams::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap())
                .unwrap();
        assert_eq!(back, p);
    }
}
