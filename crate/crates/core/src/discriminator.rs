//! Sequence discriminator scoring a (force, angle) series as physics-real.
//!
//! The `N` force rows and the angle are stacked into an `(N + 1) × L`
//! matrix, standardized per channel, and passed through parallel conv banks
//! of different widths (ReLU, max over time), a highway layer and a
//! two-class softmax. Class 0 is "real".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    affine, affine_backward, conv1d, conv1d_backward, glorot_bound, highway, highway_backward,
    log_softmax_at, max_over_time, max_over_time_backward, softmax, HighwayCache, HighwayParams,
};
use crate::nn::params::{init_uniform, Adam, ParamSet};
use crate::nn::{Checkpoint, Tensor};
use crate::rng::SeededRng;
use crate::scalar::Real;

pub const REAL: usize = 0;
pub const GENERATED: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub widths: Vec<usize>,
    pub kernels_per_bank: usize,
    /// Initial highway transform-gate bias.
    pub gate_bias: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            widths: vec![2, 4, 8],
            kernels_per_bank: 8,
            gate_bias: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBank<T> {
    /// `K × C × w`
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvBank<T> {
    pub fn width(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn kernels(&self) -> usize {
        self.kernels.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub banks: Vec<ConvBank<T>>,
    pub highway: HighwayParams<T>,
    /// `2 × F` over the pooled feature width `F`.
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    /// Per-channel standardization, fitted on positives.
    pub mean: Tensor<T>,
    pub scale: Tensor<T>,
}

impl<T: Real> DiscriminatorParams<T> {
    pub fn new(channels: usize, cfg: &DiscriminatorConfig, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(channels, cfg);
        let k = cfg.kernels_per_bank;
        let f = p.feature_width();
        for bank in &mut p.banks {
            let w = bank.width();
            init_uniform(&mut bank.kernels, glorot_bound(channels * w, k), rng);
        }
        init_uniform(&mut p.highway.w_h, glorot_bound(f, f), rng);
        init_uniform(&mut p.highway.w_t, glorot_bound(f, f), rng);
        p.highway.b_t.fill(T::lit(cfg.gate_bias));
        init_uniform(&mut p.head_w, glorot_bound(f, 2), rng);
        p
    }

    /// All weights zero, identity standardization.
    pub fn zeros(channels: usize, cfg: &DiscriminatorConfig) -> Self {
        let k = cfg.kernels_per_bank;
        let banks: Vec<ConvBank<T>> = cfg
            .widths
            .iter()
            .map(|&w| ConvBank {
                kernels: Tensor::zeros(&[k, channels, w]),
                bias: Tensor::zeros(&[k]),
            })
            .collect();
        let f = k * banks.len();
        Self {
            banks,
            highway: HighwayParams::zeros(f),
            head_w: Tensor::zeros(&[2, f]),
            head_b: Tensor::zeros(&[2]),
            mean: Tensor::zeros(&[channels]),
            scale: Tensor::filled(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn feature_width(&self) -> usize {
        self.banks.iter().map(|b| b.kernels()).sum()
    }

    pub fn max_width(&self) -> usize {
        self.banks.iter().map(|b| b.width()).max().unwrap_or(1)
    }

    /// Fits the per-channel standardization to a set of raw embeddings.
    pub fn fit_standardization(&mut self, raw: &[Tensor<T>]) {
        let c = self.channels();
        for ch in 0..c {
            let (mut s, mut s2, mut n) = (T::zero(), T::zero(), 0usize);
            for e in raw {
                for &v in e.row(ch) {
                    s += v;
                    s2 += v * v;
                    n += 1;
                }
            }
            let nn = T::of_usize(n.max(1));
            let m = s / nn;
            let var = (s2 / nn - m * m).max(T::zero());
            let sd = var.sqrt();
            self.mean.data_mut()[ch] = m;
            self.scale.data_mut()[ch] = if sd > T::lit(1e-9) { sd } else { T::one() };
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut widths = Vec::new();
        let mut kernels = 0;
        let mut channels = 0;
        while let Some(t) = ckpt.get(&format!("{prefix}bank{}.kernels", widths.len())) {
            let s = t.shape();
            if s.len() != 3 {
                return Err(Error::input("malformed discriminator bank"));
            }
            kernels = s[0];
            channels = s[1];
            widths.push(s[2]);
        }
        if widths.is_empty() {
            return Err(Error::input(format!(
                "checkpoint has no `{prefix}` discriminator"
            )));
        }
        let cfg = DiscriminatorConfig {
            widths,
            kernels_per_bank: kernels,
            gate_bias: 0.0,
        };
        let mut p = Self::zeros(channels, &cfg);
        p.import(prefix, ckpt)?;
        Ok(p)
    }
}

impl<T: Real> ParamSet<T> for DiscriminatorParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.banks.iter().enumerate() {
            f(&format!("bank{i}.kernels"), &b.kernels);
            f(&format!("bank{i}.bias"), &b.bias);
        }
        self.highway
            .visit(&mut |n, t| f(&format!("highway.{n}"), t));
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.banks.iter_mut().enumerate() {
            f(&format!("bank{i}.kernels"), &mut b.kernels);
            f(&format!("bank{i}.bias"), &mut b.bias);
        }
        self.highway
            .visit_mut(&mut |n, t| f(&format!("highway.{n}"), t));
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("norm.mean", &self.mean);
        f("norm.scale", &self.scale);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("norm.mean", &mut self.mean);
        f("norm.scale", &mut self.scale);
    }
}

/// Stacks forces and angle into an `(N + 1) × L` matrix.
pub fn embed_raw<T: Real>(forces: &Tensor<T>, theta: &[T]) -> Result<Tensor<T>> {
    if forces.shape().len() != 2 || forces.cols() != theta.len() {
        return Err(Error::shape(
            "embed",
            format!("[N, {}]", theta.len()),
            format!("{:?}", forces.shape()),
        ));
    }
    let (n, l) = (forces.rows(), theta.len());
    let mut data = Vec::with_capacity((n + 1) * l);
    data.extend_from_slice(forces.data());
    data.extend_from_slice(theta);
    Tensor::from_vec(&[n + 1, l], data)
}

/// Applies the stored standardization to a raw embedding.
pub fn standardize<T: Real>(raw: &Tensor<T>, params: &DiscriminatorParams<T>) -> Result<Tensor<T>> {
    let c = params.channels();
    if raw.shape().len() != 2 || raw.rows() != c {
        return Err(Error::shape(
            "discriminator input",
            format!("[{c}, L]"),
            format!("{:?}", raw.shape()),
        ));
    }
    let mut e = raw.clone();
    for ch in 0..c {
        let (m, s) = (params.mean.data()[ch], params.scale.data()[ch]);
        e.row_mut(ch).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(e)
}

/// Inverse of [`standardize`].
pub fn destandardize<T: Real>(e: &Tensor<T>, params: &DiscriminatorParams<T>) -> Tensor<T> {
    let mut raw = e.clone();
    for ch in 0..params.channels() {
        let (m, s) = (params.mean.data()[ch], params.scale.data()[ch]);
        raw.row_mut(ch).iter_mut().for_each(|v| *v = *v * s + m);
    }
    raw
}

/// Standardized embedding of a force/angle pair.
pub fn embed<T: Real>(
    forces: &Tensor<T>,
    theta: &[T],
    params: &DiscriminatorParams<T>,
) -> Result<Tensor<T>> {
    standardize(&embed_raw(forces, theta)?, params)
}

struct Forward<T> {
    x: Tensor<T>,
    pre: Vec<Tensor<T>>,
    argmax: Vec<Vec<usize>>,
    hw: HighwayCache<T>,
    features: Vec<T>,
    logits: Vec<T>,
}

fn forward<T: Real>(e: &Tensor<T>, params: &DiscriminatorParams<T>) -> Result<Forward<T>> {
    if e.shape().len() != 2 || e.rows() != params.channels() {
        return Err(Error::shape(
            "discriminator input",
            format!("[{}, L]", params.channels()),
            format!("{:?}", e.shape()),
        ));
    }
    if e.cols() < params.max_width() {
        return Err(Error::input(format!(
            "sequence of {} frames is shorter than the widest conv bank ({})",
            e.cols(),
            params.max_width()
        )));
    }
    if !e.is_finite() {
        return Err(Error::input("discriminator input contains NaN or Inf"));
    }
    let mut pooled = Vec::with_capacity(params.feature_width());
    let mut pre = Vec::with_capacity(params.banks.len());
    let mut argmax = Vec::with_capacity(params.banks.len());
    for bank in &params.banks {
        let c = conv1d(e, &bank.kernels, bank.bias.data())?;
        let act = c.map(|v| v.max(T::zero()));
        let (m, idx) = max_over_time(&act)?;
        pooled.extend(m);
        pre.push(c);
        argmax.push(idx);
    }
    let (features, hw) = highway(&pooled, &params.highway)?;
    let logits = affine(&features, &params.head_w, params.head_b.data())?;
    Ok(Forward {
        x: e.clone(),
        pre,
        argmax,
        hw,
        features,
        logits,
    })
}

/// Probability that the standardized embedding `e` is real.
pub fn discriminate<T: Real>(e: &Tensor<T>, params: &DiscriminatorParams<T>) -> Result<T> {
    let f = forward(e, params)?;
    Ok(softmax(&f.logits)?[REAL])
}

/// Highway output of the pooled conv features.
pub fn features<T: Real>(e: &Tensor<T>, params: &DiscriminatorParams<T>) -> Result<Vec<T>> {
    Ok(forward(e, params)?.features)
}

/// Cross-entropy of one labelled embedding; accumulates the gradient.
pub fn cross_entropy_and_grad<T: Real>(
    e: &Tensor<T>,
    label: usize,
    params: &DiscriminatorParams<T>,
    grads: &mut DiscriminatorParams<T>,
) -> Result<T> {
    let f = forward(e, params)?;
    let p = softmax(&f.logits)?;
    let loss = -log_softmax_at(&f.logits, label);
    let dz: Vec<T> = p
        .iter()
        .enumerate()
        .map(|(c, &pc)| if c == label { pc - T::one() } else { pc })
        .collect();
    let mut dfeat = vec![T::zero(); f.features.len()];
    affine_backward(
        &f.features,
        &params.head_w,
        &dz,
        &mut grads.head_w,
        grads.head_b.data_mut(),
        Some(&mut dfeat),
    );
    let dpooled = highway_backward(&params.highway, &f.hw, &dfeat, &mut grads.highway);
    let mut off = 0;
    for (b, bank) in params.banks.iter().enumerate() {
        let k = bank.kernels();
        let mut dact = Tensor::zeros(f.pre[b].shape());
        max_over_time_backward(&f.argmax[b], &dpooled[off..off + k], &mut dact);
        for (d, &z) in dact.data_mut().iter_mut().zip(f.pre[b].data()) {
            if z <= T::zero() {
                *d = T::zero();
            }
        }
        let gb = &mut grads.banks[b];
        conv1d_backward(
            &f.x,
            &bank.kernels,
            &dact,
            &mut gb.kernels,
            gb.bias.data_mut(),
            None,
        );
        off += k;
    }
    Ok(loss)
}

/// Full-batch training on equal-size positive and negative sets of
/// standardized embeddings with a caller-owned Adam state. Returns the mean
/// cross-entropy before each update.
pub fn train_discriminator_with<T: Real>(
    params: &mut DiscriminatorParams<T>,
    opt: &mut Adam<T, DiscriminatorParams<T>>,
    positives: &[Tensor<T>],
    negatives: &[Tensor<T>],
    epochs: usize,
) -> Result<Vec<T>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::input(
            "discriminator training needs positives and negatives",
        ));
    }
    if positives.len() != negatives.len() {
        return Err(Error::input(format!(
            "class imbalance: {} positives vs {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let norm = T::one() / T::of_usize(2 * positives.len());
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut grads = params.zeros_like();
        let mut loss = T::zero();
        for e in positives {
            loss += cross_entropy_and_grad(e, REAL, params, &mut grads)?;
        }
        for e in negatives {
            loss += cross_entropy_and_grad(e, GENERATED, params, &mut grads)?;
        }
        grads.scale(norm);
        loss *= norm;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::TrainingAbort(format!(
                "non-finite discriminator loss at epoch {epoch}: loss={}, grad norms [{}]",
                loss.as_f64(),
                grads.norm_report()
            )));
        }
        opt.step(params, &grads);
        curve.push(loss);
    }
    Ok(curve)
}

/// [`train_discriminator_with`] using a fresh Adam state.
pub fn train_discriminator<T: Real>(
    params: &mut DiscriminatorParams<T>,
    positives: &[Tensor<T>],
    negatives: &[Tensor<T>],
    epochs: usize,
    lr: T,
) -> Result<Vec<T>> {
    let mut opt = Adam::new(&*params, lr);
    train_discriminator_with(params, &mut opt, positives, negatives, epochs)
}
