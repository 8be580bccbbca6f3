//! Fixed layer set with hand-written reverse-mode passes.
//!
//! Every forward function returns whatever the matching `*_backward` needs.
//! Backward functions *accumulate* into the gradient buffers they are given,
//! so a caller can sum over frames and samples without extra copies.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::{dot, Real};

fn check_finite<T: Real>(op: &str, xs: &[T]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::input(format!("{op}: non-finite input")))
    }
}

/// `W x + b` for `W` of shape `m × n`.
pub fn affine<T: Real>(x: &[T], w: &Tensor<T>, b: &[T]) -> Result<Vec<T>> {
    if w.shape().len() != 2 || w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::shape(
            "affine",
            format!(
                "W {}x{} with x[{}] and b[{}]",
                b.len(),
                x.len(),
                x.len(),
                b.len()
            ),
            format!("W {:?}", w.shape()),
        ));
    }
    let mut y = b.to_vec();
    affine_into(x, w, &mut y);
    Ok(y)
}

/// `y += W x` without shape checks.
#[inline]
pub(crate) fn affine_into<T: Real>(x: &[T], w: &Tensor<T>, y: &mut [T]) {
    let n = x.len();
    let wd = w.data();
    for (i, yi) in y.iter_mut().enumerate() {
        *yi += dot(&wd[i * n..(i + 1) * n], x);
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy`, and `dx += Wᵀ dy` when requested.
pub fn affine_backward<T: Real>(
    x: &[T],
    w: &Tensor<T>,
    dy: &[T],
    dw: &mut Tensor<T>,
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let n = x.len();
    let dwd = dw.data_mut();
    for (i, &g) in dy.iter().enumerate() {
        db[i] += g;
        if g != T::zero() {
            for (dwij, &xj) in dwd[i * n..(i + 1) * n].iter_mut().zip(x) {
                *dwij += g * xj;
            }
        }
    }
    if let Some(dx) = dx {
        let wd = w.data();
        for (i, &g) in dy.iter().enumerate() {
            if g != T::zero() {
                for (dxj, &wij) in dx.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                    *dxj += g * wij;
                }
            }
        }
    }
}

/// Valid, stride-1 cross-correlation of `x` (`C × L`) with `kernels` (`K × C × w`).
pub fn conv1d<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (c, l) = dims2(x, "conv1d input")?;
    if kernels.shape().len() != 3 || kernels.shape()[1] != c || kernels.shape()[0] != bias.len() {
        return Err(Error::shape(
            "conv1d kernels",
            format!("[{} x {c} x w]", bias.len()),
            format!("{:?}", kernels.shape()),
        ));
    }
    let (k, w) = (kernels.shape()[0], kernels.shape()[2]);
    if w == 0 || l < w {
        return Err(Error::input(format!(
            "conv1d: series length {l} shorter than kernel width {w}"
        )));
    }
    let m = l - w + 1;
    let mut out = Tensor::zeros(&[k, m]);
    let xd = x.data();
    let kd = kernels.data();
    for ki in 0..k {
        let orow = out.row_mut(ki);
        orow.iter_mut().for_each(|o| *o = bias[ki]);
        for ci in 0..c {
            let xrow = &xd[ci * l..(ci + 1) * l];
            let krow = &kd[(ki * c + ci) * w..(ki * c + ci + 1) * w];
            for (j, o) in orow.iter_mut().enumerate() {
                *o += dot(krow, &xrow[j..j + w]);
            }
        }
    }
    Ok(out)
}

/// Accumulates kernel, bias and (optionally) input gradients of [`conv1d`].
pub fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
    dkernels: &mut Tensor<T>,
    dbias: &mut [T],
    mut dx: Option<&mut Tensor<T>>,
) {
    let (c, l) = (x.rows(), x.cols());
    let (k, w) = (kernels.shape()[0], kernels.shape()[2]);
    let m = dy.cols();
    let xd = x.data();
    let kd = kernels.data();
    for ki in 0..k {
        let g = dy.row(ki);
        dbias[ki] += g.iter().copied().sum();
        for ci in 0..c {
            let xrow = &xd[ci * l..(ci + 1) * l];
            let base = (ki * c + ci) * w;
            {
                let dk = &mut dkernels.data_mut()[base..base + w];
                for (o, dko) in dk.iter_mut().enumerate() {
                    *dko += dot(g, &xrow[o..o + m]);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let krow = &kd[base..base + w];
                let dxrow = dx.row_mut(ci);
                for (j, &gj) in g.iter().enumerate() {
                    if gj != T::zero() {
                        for (o, &kv) in krow.iter().enumerate() {
                            dxrow[j + o] += gj * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Per-row maximum of a `K × M` tensor. Returns the maxima and the argmax of
/// each row; ties resolve to the earliest index.
pub fn max_over_time<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<usize>)> {
    let (k, m) = dims2(x, "max_over_time")?;
    if k == 0 || m == 0 {
        return Err(Error::input("max_over_time: empty input"));
    }
    let mut vals = Vec::with_capacity(k);
    let mut idx = Vec::with_capacity(k);
    for r in 0..k {
        let row = x.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        vals.push(row[best]);
        idx.push(best);
    }
    Ok((vals, idx))
}

/// Scatters `dy` back to the argmax positions, accumulating into `dx`.
pub fn max_over_time_backward<T: Real>(argmax: &[usize], dy: &[T], dx: &mut Tensor<T>) {
    for (r, (&j, &g)) in argmax.iter().zip(dy).enumerate() {
        dx.row_mut(r)[j] += g;
    }
}

/// LSTM cell weights. Gate blocks are stacked in the order input, forget,
/// candidate, output; each block has `hidden` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * hidden, input]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }
}

/// Values saved by [`lstm_step`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// Activated gates `[i, f, g, o]`, each of length `hidden`.
    pub gates: Vec<T>,
    pub tanh_c: Vec<T>,
}

/// One LSTM step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step<T: Real>(
    x: &[T],
    h: &[T],
    c: &[T],
    p: &LstmParams<T>,
) -> Result<(Vec<T>, Vec<T>, LstmCache<T>)> {
    let hs = p.hidden();
    if x.len() != p.input() || h.len() != hs || c.len() != hs {
        return Err(Error::shape(
            "lstm_step",
            format!("x[{}], h[{hs}], c[{hs}]", p.input()),
            format!("x[{}], h[{}], c[{}]", x.len(), h.len(), c.len()),
        ));
    }
    let mut z = p.bias.data().to_vec();
    affine_into(x, &p.w_x, &mut z);
    affine_into(h, &p.w_h, &mut z);
    for (j, zj) in z.iter_mut().enumerate() {
        *zj = if (2 * hs..3 * hs).contains(&j) {
            zj.tanh()
        } else {
            zj.sigmoid()
        };
    }
    let mut c_new = vec![T::zero(); hs];
    let mut h_new = vec![T::zero(); hs];
    let mut tanh_c = vec![T::zero(); hs];
    for j in 0..hs {
        let (i, f, g, o) = (z[j], z[hs + j], z[2 * hs + j], z[3 * hs + j]);
        c_new[j] = f * c[j] + i * g;
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = o * tanh_c[j];
    }
    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        gates: z,
        tanh_c,
    };
    Ok((h_new, c_new, cache))
}

/// Backward through one LSTM step given upstream `dh'` and `dc'`.
/// Accumulates weight gradients into `grads` and returns `(dx, dh, dc)`.
pub fn lstm_step_backward<T: Real>(
    p: &LstmParams<T>,
    cache: &LstmCache<T>,
    dh_next: &[T],
    dc_next: &[T],
    grads: &mut LstmParams<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hs = p.hidden();
    let z = &cache.gates;
    let mut dz = vec![T::zero(); 4 * hs];
    let mut dc_prev = vec![T::zero(); hs];
    let one = T::one();
    for j in 0..hs {
        let (i, f, g, o) = (z[j], z[hs + j], z[2 * hs + j], z[3 * hs + j]);
        let tc = cache.tanh_c[j];
        let dc = dc_next[j] + dh_next[j] * o * (one - tc * tc);
        let d_o = dh_next[j] * tc;
        let d_i = dc * g;
        let d_f = dc * cache.c_prev[j];
        let d_g = dc * i;
        dc_prev[j] = dc * f;
        dz[j] = d_i * i * (one - i);
        dz[hs + j] = d_f * f * (one - f);
        dz[2 * hs + j] = d_g * (one - g * g);
        dz[3 * hs + j] = d_o * o * (one - o);
    }
    let mut dx = vec![T::zero(); p.input()];
    let mut dh = vec![T::zero(); hs];
    let mut scratch = vec![T::zero(); 4 * hs];
    affine_backward(
        &cache.x,
        &p.w_x,
        &dz,
        &mut grads.w_x,
        grads.bias.data_mut(),
        Some(&mut dx),
    );
    // Bias already accumulated above; route the second product through a scratch buffer.
    affine_backward(
        &cache.h_prev,
        &p.w_h,
        &dz,
        &mut grads.w_h,
        &mut scratch,
        Some(&mut dh),
    );
    (dx, dh, dc_prev)
}

/// Highway layer weights: transform `H` and gate `T`, both square.
#[derive(Clone, Debug, PartialEq)]
pub struct HighwayParams<T> {
    pub w_h: Tensor<T>,
    pub b_h: Tensor<T>,
    pub w_t: Tensor<T>,
    pub b_t: Tensor<T>,
}

impl<T: Real> HighwayParams<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            w_h: Tensor::zeros(&[n, n]),
            b_h: Tensor::zeros(&[n]),
            w_t: Tensor::zeros(&[n, n]),
            b_t: Tensor::zeros(&[n]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HighwayCache<T> {
    pub x: Vec<T>,
    pub h_pre: Vec<T>,
    pub gate: Vec<T>,
}

/// `y = g⊙relu(W_H x + b_H) + (1 − g)⊙x` with `g = σ(W_T x + b_T)`.
pub fn highway<T: Real>(x: &[T], p: &HighwayParams<T>) -> Result<(Vec<T>, HighwayCache<T>)> {
    let h_pre = affine(x, &p.w_h, p.b_h.data())?;
    let t_pre = affine(x, &p.w_t, p.b_t.data())?;
    let gate: Vec<T> = t_pre.iter().map(|&v| v.sigmoid()).collect();
    let y = x
        .iter()
        .zip(&h_pre)
        .zip(&gate)
        .map(|((&xi, &hi), &gi)| gi * hi.max(T::zero()) + (T::one() - gi) * xi)
        .collect();
    Ok((
        y,
        HighwayCache {
            x: x.to_vec(),
            h_pre,
            gate,
        },
    ))
}

/// Accumulates highway gradients and returns `dx`.
pub fn highway_backward<T: Real>(
    p: &HighwayParams<T>,
    cache: &HighwayCache<T>,
    dy: &[T],
    grads: &mut HighwayParams<T>,
) -> Vec<T> {
    let n = dy.len();
    let mut dx = vec![T::zero(); n];
    let mut dh_pre = vec![T::zero(); n];
    let mut dt_pre = vec![T::zero(); n];
    for i in 0..n {
        let g = cache.gate[i];
        let h = cache.h_pre[i].max(T::zero());
        dx[i] += dy[i] * (T::one() - g);
        if cache.h_pre[i] > T::zero() {
            dh_pre[i] = dy[i] * g;
        }
        dt_pre[i] = dy[i] * (h - cache.x[i]) * g * (T::one() - g);
    }
    affine_backward(
        &cache.x,
        &p.w_h,
        &dh_pre,
        &mut grads.w_h,
        grads.b_h.data_mut(),
        Some(&mut dx),
    );
    affine_backward(
        &cache.x,
        &p.w_t,
        &dt_pre,
        &mut grads.w_t,
        grads.b_t.data_mut(),
        Some(&mut dx),
    );
    dx
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return Err(Error::input("softmax: empty input"));
    }
    check_finite("softmax", z)?;
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `log softmax(z)[class]`, computed with the log-sum-exp shift.
pub fn log_softmax_at<T: Real>(z: &[T], class: usize) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    z[class] - lse
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn dims2<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(what, "rank-2 tensor", format!("{s:?}"))),
    }
}
