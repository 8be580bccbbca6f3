//! Prediction quality (RMSE, R², PSNR, SRCC) and distribution metrics
//! (Fréchet distance and inception score over discriminator features).

use serde::{Deserialize, Serialize};

use crate::discriminator::{embed, features, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::nn::layers::{affine, affine_backward, glorot_bound, log_softmax_at, softmax};
use crate::nn::params::{init_uniform, Adam, ParamSet};
use crate::nn::{Checkpoint, Tensor};
use crate::rng::SeededRng;
use crate::scalar::Real;

/// PSNR reported when the error is negligible relative to the peak.
pub const PSNR_CAP_DB: f64 = 200.0;

/// Quality of one predicted channel. `None` marks a metric that is undefined
/// for a constant reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuality {
    pub rmse: f64,
    pub r2: Option<f64>,
    pub psnr_db: f64,
    pub srcc: Option<f64>,
}

pub fn rmse<T: Real>(pred: &[T], reference: &[T]) -> T {
    let n = T::of_usize(pred.len());
    (pred
        .iter()
        .zip(reference)
        .map(|(&p, &r)| (p - r) * (p - r))
        .sum::<T>()
        / n)
        .sqrt()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks<T: Real>(xs: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = T::of_usize(i + j + 2) / T::lit(2.0);
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson<T: Real>(a: &[T], b: &[T]) -> Option<T> {
    let n = T::of_usize(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= T::zero() || sbb <= T::zero() {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).max(-T::one()).min(T::one()))
}

pub fn spearman<T: Real>(a: &[T], b: &[T]) -> Option<T> {
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn quality<T: Real>(pred: &[T], reference: &[T]) -> Result<ChannelQuality> {
    if pred.len() != reference.len() {
        return Err(Error::shape("quality", reference.len(), pred.len()));
    }
    if pred.len() < 2 {
        return Err(Error::input("quality needs at least 2 points"));
    }
    if !pred.iter().chain(reference).all(|v| v.is_finite()) {
        return Err(Error::input("quality: NaN or Inf in input"));
    }
    let e = rmse(pred, reference).as_f64();
    let n = reference.len() as f64;
    let mean = reference.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let sst: f64 = reference.iter().map(|v| (v.as_f64() - mean).powi(2)).sum();
    let sse: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p.as_f64() - r.as_f64()).powi(2))
        .sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);
    let peak = reference
        .iter()
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max);
    let psnr_db = if e <= peak * 1e-10 {
        PSNR_CAP_DB
    } else {
        (20.0 * (peak / e).log10()).min(PSNR_CAP_DB)
    };
    let srcc = spearman(pred, reference).map(|v| v.as_f64());
    Ok(ChannelQuality {
        rmse: e,
        r2,
        psnr_db,
        srcc,
    })
}

/// Per-channel and channel-averaged quality over a set of sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub channels: Vec<NamedQuality>,
    /// Mean over force channels.
    pub force_mean: ChannelQuality,
    pub theta: ChannelQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedQuality {
    pub channel: String,
    #[serde(flatten)]
    pub quality: ChannelQuality,
}

fn mean_quality(qs: &[&ChannelQuality]) -> ChannelQuality {
    let n = qs.len().max(1) as f64;
    let opt_mean = |get: &dyn Fn(&ChannelQuality) -> Option<f64>| {
        let v: Vec<f64> = qs.iter().filter_map(|q| get(q)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    ChannelQuality {
        rmse: qs.iter().map(|q| q.rmse).sum::<f64>() / n,
        r2: opt_mean(&|q| q.r2),
        psnr_db: qs.iter().map(|q| q.psnr_db).sum::<f64>() / n,
        srcc: opt_mean(&|q| q.srcc),
    }
}

/// Scores predicted forces and angles against references. Each channel is
/// concatenated across sequences before scoring.
pub fn quality_report<T: Real>(
    pred_forces: &[&Tensor<T>],
    pred_theta: &[&[T]],
    ref_forces: &[&Tensor<T>],
    ref_theta: &[&[T]],
) -> Result<QualityReport> {
    if pred_forces.len() != ref_forces.len()
        || pred_theta.len() != ref_theta.len()
        || pred_forces.is_empty()
    {
        return Err(Error::input(
            "quality report needs matching, nonempty prediction and reference sets",
        ));
    }
    let n = ref_forces[0].rows();
    let mut channels = Vec::with_capacity(n + 1);
    for m in 0..n {
        let mut p = Vec::new();
        let mut r = Vec::new();
        for (pf, rf) in pred_forces.iter().zip(ref_forces) {
            if pf.shape() != rf.shape() {
                return Err(Error::shape(
                    "force prediction",
                    format!("{:?}", rf.shape()),
                    format!("{:?}", pf.shape()),
                ));
            }
            p.extend_from_slice(pf.row(m));
            r.extend_from_slice(rf.row(m));
        }
        channels.push(NamedQuality {
            channel: format!("force_{m}"),
            quality: quality(&p, &r)?,
        });
    }
    let p: Vec<T> = pred_theta.iter().flat_map(|s| s.iter().copied()).collect();
    let r: Vec<T> = ref_theta.iter().flat_map(|s| s.iter().copied()).collect();
    let theta = quality(&p, &r)?;
    channels.push(NamedQuality {
        channel: "theta".into(),
        quality: theta.clone(),
    });
    let force_mean = mean_quality(&channels[..n].iter().map(|c| &c.quality).collect::<Vec<_>>());
    Ok(QualityReport {
        channels,
        force_mean,
        theta,
    })
}

/// Eigen-decomposition of a symmetric `n × n` matrix (row-major) by cyclic
/// Jacobi rotations. Returns eigenvalues and the eigenvectors as columns of
/// a row-major matrix.
pub fn symmetric_eigen<T: Real>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut a = a.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: T = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn mean_cov<T: Real>(set: &[Vec<T>], d: usize) -> (Vec<T>, Vec<T>) {
    let n = T::of_usize(set.len());
    let mut mu = vec![T::zero(); d];
    for x in set {
        for (m, &v) in mu.iter_mut().zip(x) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![T::zero(); d * d];
    for x in set {
        for i in 0..d {
            let di = x[i] - mu[i];
            for j in i..d {
                cov[i * d + j] += di * (x[j] - mu[j]);
            }
        }
    }
    let denom = T::of_usize(set.len() - 1);
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / denom;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    (mu, cov)
}

fn matmul<T: Real>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

fn check_spectrum<T: Real>(vals: &[T], set: &str, scale: T) -> Result<()> {
    let tol = T::lit(1e-10) * scale.max(T::one());
    for &l in vals {
        if l < -tol || !l.is_finite() {
            return Err(Error::Conditioning {
                set: set.into(),
                eigenvalue: l.as_f64(),
            });
        }
    }
    Ok(())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μ_r − μ_g‖² + tr Σ_r + tr Σ_g − 2 tr (Σ_r^½ Σ_g Σ_r^½)^½`.
///
/// Eigenvalues in `(−1e-10·scale, 0)` are clamped to zero; anything more
/// negative is reported as a conditioning error naming the set.
pub fn fid<T: Real>(real: &[Vec<T>], generated: &[Vec<T>]) -> Result<T> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::input("FID needs at least 2 vectors per set"));
    }
    let d = real[0].len();
    if real.iter().chain(generated).any(|x| x.len() != d) {
        return Err(Error::shape("FID features", d, "ragged feature vectors"));
    }
    if real
        .iter()
        .chain(generated)
        .any(|x| x.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::input("FID features contain NaN or Inf"));
    }
    let (mr, cr) = mean_cov(real, d);
    let (mg, cg) = mean_cov(generated, d);
    let tr = |c: &[T]| (0..d).map(|i| c[i * d + i]).sum::<T>();
    let scale = tr(&cr) + tr(&cg);

    let (lr, vr) = symmetric_eigen(&cr, d);
    check_spectrum(&lr, "real", scale)?;
    let (lg, _) = symmetric_eigen(&cg, d);
    check_spectrum(&lg, "generated", scale)?;
    let mut sqrt_r = vec![T::zero(); d * d];
    for k in 0..d {
        let s = lr[k].max(T::zero()).sqrt();
        for i in 0..d {
            let vik = vr[i * d + k] * s;
            for j in 0..d {
                sqrt_r[i * d + j] += vik * vr[j * d + k];
            }
        }
    }
    let mut m = matmul(&matmul(&sqrt_r, &cg, d), &sqrt_r, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = (m[i * d + j] + m[j * d + i]) / T::lit(2.0);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let (lm, _) = symmetric_eigen(&m, d);
    check_spectrum(&lm, "product", scale * scale)?;
    let tr_sqrt: T = lm.iter().map(|&l| l.max(T::zero()).sqrt()).sum();
    let dmu: T = mr.iter().zip(&mg).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((dmu + scale - T::lit(2.0) * tr_sqrt).max(T::zero()))
}

/// `exp(mean_x KL(p(c|x) ‖ p(c)))` over a set of class posteriors.
pub fn inception_score<T: Real>(posteriors: &[Vec<T>]) -> Result<T> {
    if posteriors.len() < 2 {
        return Err(Error::input("inception score needs at least 2 samples"));
    }
    let k = posteriors[0].len();
    if posteriors.iter().any(|p| p.len() != k) {
        return Err(Error::shape("posteriors", k, "ragged posterior vectors"));
    }
    let n = T::of_usize(posteriors.len());
    let mut marginal = vec![T::zero(); k];
    for p in posteriors {
        for (m, &v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut kl = T::zero();
    for p in posteriors {
        for (&pc, &mc) in p.iter().zip(&marginal) {
            if pc > T::zero() {
                kl += pc * (pc.ln() - mc.ln());
            }
        }
    }
    Ok((kl / n).exp())
}

/// Feature vector of a force/angle sequence under `params`.
pub fn embed_features<T: Real>(
    forces: &Tensor<T>,
    theta: &[T],
    params: &DiscriminatorParams<T>,
) -> Result<Vec<T>> {
    features(&embed(forces, theta, params)?, params)
}

/// Softmax classifier on feature vectors supplying class posteriors for the
/// inception score.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxClassifier<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> ParamSet<T> for AuxClassifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

impl<T: Real> AuxClassifier<T> {
    pub fn new(classes: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut w = Tensor::zeros(&[classes, dim]);
        init_uniform(&mut w, glorot_bound(dim, classes), rng);
        Self {
            w,
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn posterior(&self, x: &[T]) -> Result<Vec<T>> {
        softmax(&affine(x, &self.w, self.b.data())?)
    }

    /// Full-batch Adam on the mean cross-entropy; returns the loss curve.
    pub fn fit(&mut self, xs: &[Vec<T>], labels: &[usize], epochs: usize, lr: T) -> Result<Vec<T>> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::input(
                "aux classifier needs one label per feature vector",
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes()) {
            return Err(Error::input(format!("label {bad} out of range")));
        }
        let mut opt = Adam::new(&*self, lr);
        let norm = T::one() / T::of_usize(xs.len());
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut g = self.zeros_like();
            let mut loss = T::zero();
            for (x, &y) in xs.iter().zip(labels) {
                let z = affine(x, &self.w, self.b.data())?;
                let p = softmax(&z)?;
                loss -= log_softmax_at(&z, y);
                let dz: Vec<T> = p
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| (if c == y { pc - T::one() } else { pc }) * norm)
                    .collect();
                affine_backward(x, &self.w, &dz, &mut g.w, g.b.data_mut(), None);
            }
            opt.step(self, &g);
            curve.push(loss * norm);
        }
        Ok(curve)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let w = ckpt
            .get(&format!("{prefix}w"))
            .ok_or_else(|| Error::input(format!("checkpoint has no `{prefix}w`")))?;
        let mut a = Self {
            w: Tensor::zeros(w.shape()),
            b: Tensor::zeros(&[w.shape()[0]]),
        };
        a.import(prefix, ckpt)?;
        Ok(a)
    }
}
