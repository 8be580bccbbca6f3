//! Named parameter collections, gradient buffers and optimizers.
//!
//! A network's gradient buffer is a second instance of the same parameter
//! struct (see [`ParamSet::zeros_like`]), so gradients always have exactly the
//! shapes of the parameters they belong to.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{HighwayParams, LstmParams};
use crate::nn::tensor::Tensor;
use crate::scalar::Real;

/// A fixed, ordered collection of named trainable tensors.
pub trait ParamSet<T: Real>: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Non-trainable state that still belongs in a checkpoint.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(T::zero()));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn assign_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(
            off,
            flat.len(),
            "flat parameter vector has the wrong length"
        );
    }

    /// `self += alpha * other`.
    fn axpy(&mut self, alpha: T, other: &Self) {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v += alpha * flat[off];
                off += 1;
            }
        });
    }

    fn scale(&mut self, alpha: T) {
        self.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= alpha));
    }

    fn norm(&self) -> T {
        let mut s = T::zero();
        self.visit(&mut |_, t| s += t.sum_sq());
        s.sqrt()
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }

    /// Per-tensor L2 norms, for abort diagnostics.
    fn norm_report(&self) -> String {
        let mut parts = Vec::new();
        self.visit(&mut |name, t| parts.push(format!("{name}={:.3e}", t.sum_sq().sqrt().as_f64())));
        parts.join(", ")
    }

    /// Writes trainable tensors and buffers under `prefix`.
    fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        self.visit(&mut |name, t| ckpt.insert(format!("{prefix}{name}"), t.cast()));
        self.visit_buffers(&mut |name, t| ckpt.insert(format!("{prefix}{name}"), t.cast()));
    }

    /// Loads every tensor under `prefix`; shapes must match exactly.
    fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        let mut err = None;
        let mut load = |name: &str, t: &mut Tensor<T>| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}{name}");
            match ckpt.get(&key) {
                None => {
                    err = Some(Error::input(format!(
                        "checkpoint is missing tensor `{key}`"
                    )))
                }
                Some(src) if src.shape() != t.shape() => {
                    err = Some(Error::shape(
                        key,
                        format!("{:?}", t.shape()),
                        format!("{:?}", src.shape()),
                    ))
                }
                Some(src) => *t = src.cast(),
            }
        };
        self.visit_mut(&mut load);
        self.visit_buffers_mut(&mut load);
        err.map_or(Ok(()), Err)
    }
}

/// Fills a tensor uniformly in `±bound`.
pub fn init_uniform<T: Real, R: Rng + ?Sized>(t: &mut Tensor<T>, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = T::lit(rng.random_range(-bound..=bound));
    }
}

impl<T: Real> ParamSet<T> for LstmParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w_x", &self.w_x);
        f("w_h", &self.w_h);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w_x", &mut self.w_x);
        f("w_h", &mut self.w_h);
        f("bias", &mut self.bias);
    }
}

impl<T: Real> ParamSet<T> for HighwayParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w_h", &self.w_h);
        f("b_h", &self.b_h);
        f("w_t", &self.w_t);
        f("b_t", &self.b_t);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w_h", &mut self.w_h);
        f("b_h", &mut self.b_h);
        f("w_t", &mut self.w_t);
        f("b_t", &mut self.b_t);
    }
}

/// Rescales `grads` in place so its norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real, P: ParamSet<T>>(grads: &mut P, max_norm: T) -> T {
    let n = grads.norm();
    if n > max_norm && n > T::zero() {
        grads.scale(max_norm / n);
    }
    n
}

/// Adam with bias correction. `step` descends along the supplied gradient.
#[derive(Clone, Debug)]
pub struct Adam<T: Real, P: ParamSet<T>> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub m: P,
    pub v: P,
    pub t: u64,
}

impl<T: Real, P: ParamSet<T>> Adam<T, P> {
    pub fn new(params: &P, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let g = grads.flatten();
        let mut m = self.m.flatten();
        let mut v = self.v.flatten();
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        let mut p = params.flatten();
        for i in 0..g.len() {
            m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        params.assign_flat(&p);
        self.m.assign_flat(&m);
        self.v.assign_flat(&v);
    }

    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        self.m.export(&format!("{prefix}m."), ckpt);
        self.v.export(&format!("{prefix}v."), ckpt);
        ckpt.insert(
            format!("{prefix}t"),
            Tensor::from_vec(&[1], vec![self.t as f64]).unwrap(),
        );
    }

    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        self.m.import(&format!("{prefix}m."), ckpt)?;
        self.v.import(&format!("{prefix}v."), ckpt)?;
        let t = ckpt
            .get(&format!("{prefix}t"))
            .ok_or_else(|| Error::input(format!("checkpoint is missing `{prefix}t`")))?;
        self.t = t.data()[0] as u64;
        Ok(())
    }
}
