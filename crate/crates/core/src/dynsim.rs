//! Synthetic single-joint musculoskeletal simulator.
//!
//! A rigid segment with constant inertia `I`, viscous damping `b` and a
//! gravity torque `G0·sin θ` is driven by `N` muscles:
//!
//! ```text
//! I·θ̈ + b·θ̇ + G0·sin θ = Σ_n s_n·ρ_n·F_n,   F_n = Fmax_n·a_n,   ȧ_n = (u_n − a_n)/τ
//! ```
//!
//! Excitations `u_n` are held constant over each frame interval. Activation is
//! advanced with its closed-form exponential solution and `(θ, θ̇)` with
//! fixed-step RK4 at the frame spacing. The emitted sEMG envelope is the
//! activation with multiplicative Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, SeededRng};
use crate::scalar::Real;

/// Frames per normalized gait cycle.
pub const GAIT_FRAMES: usize = 100;
/// Frames per normalized wrist motion cycle.
pub const WRIST_FRAMES: usize = 156;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Muscle {
    /// Maximum isometric force, N.
    pub max_force: f64,
    /// +1 for a flexor, −1 for an extensor.
    pub sign: i8,
    /// Moment-arm magnitude, m.
    pub moment_arm: f64,
}

impl Muscle {
    pub fn flexor(max_force: f64, moment_arm: f64) -> Self {
        Self {
            max_force,
            sign: 1,
            moment_arm,
        }
    }

    pub fn extensor(max_force: f64, moment_arm: f64) -> Self {
        Self {
            max_force,
            sign: -1,
            moment_arm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Segment inertia about the joint, kg·m².
    pub inertia: f64,
    /// Viscous damping, N·m·s/rad.
    pub damping: f64,
    /// `m·g·l_c`, N·m.
    pub gravity_torque: f64,
    pub muscles: Vec<Muscle>,
    /// Activation time constant, s.
    pub activation_tau: f64,
    /// Standard deviation of the multiplicative sEMG noise.
    #[serde(default)]
    pub emg_noise: f64,
    /// Frames per cycle.
    pub frames: usize,
    /// Seconds per frame.
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::knee()
    }
}

impl SimConfig {
    /// Knee-like preset: one flexor/extensor pair over a 100-frame cycle.
    pub fn knee() -> Self {
        Self {
            inertia: 1.0,
            damping: 0.5,
            gravity_torque: 2.0,
            muscles: vec![Muscle::flexor(50.0, 0.02), Muscle::extensor(50.0, 0.02)],
            activation_tau: 0.05,
            emg_noise: 0.05,
            frames: GAIT_FRAMES,
            dt: 0.01,
            seed: 0,
        }
    }

    /// Wrist-like preset: two flexors and three extensors over a 156-frame cycle.
    pub fn wrist() -> Self {
        Self {
            inertia: 0.4,
            damping: 0.3,
            gravity_torque: 0.8,
            muscles: vec![
                Muscle::flexor(40.0, 0.012),
                Muscle::flexor(35.0, 0.014),
                Muscle::extensor(30.0, 0.011),
                Muscle::extensor(25.0, 0.013),
                Muscle::extensor(25.0, 0.010),
            ],
            activation_tau: 0.05,
            emg_noise: 0.05,
            frames: WRIST_FRAMES,
            dt: 0.01,
            seed: 0,
        }
    }

    pub fn n_muscles(&self) -> usize {
        self.muscles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.inertia) {
            return Err(Error::input(format!(
                "inertia must be > 0, got {}",
                self.inertia
            )));
        }
        if !self.damping.is_finite() || !self.gravity_torque.is_finite() {
            return Err(Error::input("damping and gravity_torque must be finite"));
        }
        if !pos(self.activation_tau) {
            return Err(Error::input("activation_tau must be > 0"));
        }
        if !pos(self.dt) {
            return Err(Error::input("dt must be > 0 and finite"));
        }
        if !(self.emg_noise.is_finite() && self.emg_noise >= 0.0) {
            return Err(Error::input("emg_noise must be >= 0"));
        }
        if self.frames < 3 {
            return Err(Error::input(format!(
                "frames must be >= 3, got {}",
                self.frames
            )));
        }
        for (i, m) in self.muscles.iter().enumerate() {
            if !pos(m.max_force) || !pos(m.moment_arm) || (m.sign != 1 && m.sign != -1) {
                return Err(Error::input(format!(
                    "muscle {i}: need max_force > 0, moment_arm > 0 and sign = ±1"
                )));
            }
        }
        if !self.muscles.iter().any(|m| m.sign == 1) || !self.muscles.iter().any(|m| m.sign == -1) {
            return Err(Error::input(
                "need at least one flexor (sign +1) and one extensor (sign -1)",
            ));
        }
        Ok(())
    }

    fn describe_physics(&self) -> String {
        let fmax: Vec<_> = self.muscles.iter().map(|m| m.max_force).collect();
        let arms: Vec<_> = self
            .muscles
            .iter()
            .map(|m| m.sign as f64 * m.moment_arm)
            .collect();
        format!(
            "inertia={}, damping={}, gravity_torque={}, max_force={fmax:?}, signed moment_arm={arms:?}, dt={}",
            self.inertia, self.damping, self.gravity_torque, self.dt
        )
    }
}

/// One normalized motion cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample<T> {
    pub dt: T,
    /// `B × L` sEMG envelope.
    pub emg: Tensor<T>,
    /// `N × L` muscle forces, N.
    pub force: Tensor<T>,
    /// Joint angle, rad.
    pub theta: Vec<T>,
}

impl<T: Real> MotionSample<T> {
    pub fn frames(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.theta.len();
        if l < 3 {
            return Err(Error::input(format!("sample has {l} frames, need >= 3")));
        }
        if self.emg.shape().len() != 2
            || self.force.shape().len() != 2
            || self.emg.cols() != l
            || self.force.cols() != l
        {
            return Err(Error::shape(
                "motion sample",
                format!("emg/force with {l} columns"),
                format!("emg {:?}, force {:?}", self.emg.shape(), self.force.shape()),
            ));
        }
        if !(self.dt.is_finite() && self.dt > T::zero()) {
            return Err(Error::input("sample dt must be > 0 and finite"));
        }
        if !self.emg.is_finite()
            || !self.force.is_finite()
            || self.theta.iter().any(|v| !v.is_finite())
        {
            return Err(Error::input("sample contains NaN or Inf"));
        }
        if self
            .emg
            .data()
            .iter()
            .chain(self.force.data())
            .any(|&v| v < T::zero())
        {
            return Err(Error::input("sample has negative emg or force"));
        }
        Ok(())
    }
}

/// Angular velocity and acceleration captured from the integrator at each frame.
#[derive(Clone, Debug)]
pub struct SimTrace<T> {
    pub thetadot: Vec<T>,
    pub thetaddot: Vec<T>,
    pub activation: Tensor<T>,
}

/// Integrates one cycle; see [`simulate_cycle_traced`].
pub fn simulate_cycle<T: Real>(
    excitations: &Tensor<T>,
    cfg: &SimConfig,
    seed: u64,
) -> Result<MotionSample<T>> {
    simulate_cycle_traced(excitations, cfg, seed).map(|(s, _)| s)
}

/// Integrates one cycle from rest (`θ = θ̇ = 0`, zero activation) and also
/// returns the integrator's own velocity and acceleration.
///
/// `excitations` is `N × L`; frame `k` holds the excitation applied over
/// `[t_k, t_{k+1})`. The cycle length is the number of excitation columns.
pub fn simulate_cycle_traced<T: Real>(
    excitations: &Tensor<T>,
    cfg: &SimConfig,
    seed: u64,
) -> Result<(MotionSample<T>, SimTrace<T>)> {
    cfg.validate()?;
    let n = cfg.n_muscles();
    if excitations.shape().len() != 2 || excitations.rows() != n {
        return Err(Error::shape(
            "excitations",
            format!("{n} x L"),
            format!("{:?}", excitations.shape()),
        ));
    }
    let l = excitations.cols();
    if l < 3 {
        return Err(Error::input(format!(
            "excitations cover {l} frames, need >= 3"
        )));
    }
    if let Some(bad) = excitations.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite excitation {bad}")));
    }
    if excitations
        .data()
        .iter()
        .any(|&u| u < T::zero() || u > T::one())
    {
        return Err(Error::input("excitations must lie in [0, 1]"));
    }

    let lit = T::lit;
    let h = lit(cfg.dt);
    let inertia = lit(cfg.inertia);
    let damping = lit(cfg.damping);
    let g0 = lit(cfg.gravity_torque);
    let decay_full = lit((-cfg.dt / cfg.activation_tau).exp());
    let decay_half = lit((-0.5 * cfg.dt / cfg.activation_tau).exp());
    let gains: Vec<T> = cfg
        .muscles
        .iter()
        .map(|m| lit(m.sign as f64 * m.moment_arm * m.max_force))
        .collect();
    let limit = lit(10.0 * PI);

    let accel =
        |theta: T, omega: T, torque: T| (torque - damping * omega - g0 * theta.sin()) / inertia;
    let torque_of = |a: &[T]| a.iter().zip(&gains).map(|(&ai, &gi)| ai * gi).sum::<T>();

    let mut act = Tensor::zeros(&[n, l]);
    let mut theta = vec![T::zero(); l];
    let mut omega = vec![T::zero(); l];
    let mut alpha = vec![T::zero(); l];
    let mut a = vec![T::zero(); n];
    let mut a_half = vec![T::zero(); n];
    let mut a_next = vec![T::zero(); n];

    for k in 0..l {
        for (i, &ai) in a.iter().enumerate() {
            act.row_mut(i)[k] = ai;
        }
        alpha[k] = accel(theta[k], omega[k], torque_of(&a));
        if k + 1 == l {
            break;
        }
        for i in 0..n {
            let u = excitations.at2(i, k);
            a_half[i] = u + (a[i] - u) * decay_half;
            a_next[i] = u + (a[i] - u) * decay_full;
        }
        let (tq_half, tq1) = (torque_of(&a_half), torque_of(&a_next));
        let (th, om) = (theta[k], omega[k]);
        let half = lit(0.5);
        let k1 = (om, alpha[k]);
        let k2 = (
            om + half * h * k1.1,
            accel(th + half * h * k1.0, om + half * h * k1.1, tq_half),
        );
        let k3 = (
            om + half * h * k2.1,
            accel(th + half * h * k2.0, om + half * h * k2.1, tq_half),
        );
        let k4 = (om + h * k3.1, accel(th + h * k3.0, om + h * k3.1, tq1));
        let sixth = h / lit(6.0);
        let two = lit(2.0);
        theta[k + 1] = th + sixth * (k1.0 + two * k2.0 + two * k3.0 + k4.0);
        omega[k + 1] = om + sixth * (k1.1 + two * k2.1 + two * k3.1 + k4.1);
        if !theta[k + 1].is_finite() || theta[k + 1].abs() > limit {
            return Err(Error::Instability {
                frame: k + 1,
                theta: theta[k + 1].as_f64(),
                params: cfg.describe_physics(),
            });
        }
        std::mem::swap(&mut a, &mut a_next);
    }

    let mut force = Tensor::zeros(&[n, l]);
    for (i, m) in cfg.muscles.iter().enumerate() {
        let fmax = lit(m.max_force);
        for (f, &ai) in force.row_mut(i).iter_mut().zip(act.row(i)) {
            *f = fmax * ai;
        }
    }

    let mut noise = rng::stream(seed, "emg-noise", 0);
    let sd = lit(cfg.emg_noise);
    let mut emg = Tensor::zeros(&[n, l]);
    for i in 0..n {
        for k in 0..l {
            let eta = if cfg.emg_noise > 0.0 {
                sd * rng::normal::<T>(&mut noise)
            } else {
                T::zero()
            };
            emg.row_mut(i)[k] = (act.at2(i, k) * (T::one() + eta)).max(T::zero());
        }
    }

    let sample = MotionSample {
        dt: h,
        emg,
        force,
        theta,
    };
    let trace = SimTrace {
        thetadot: omega,
        thetaddot: alpha,
        activation: act,
    };
    Ok((sample, trace))
}

/// Shape of the excitation pattern behind one cycle. Also the class label for
/// the inception-score posterior head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Sine,
    Ramp,
    MixedA,
    MixedB,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Sine,
        Pattern::Ramp,
        Pattern::MixedA,
        Pattern::MixedB,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExcitationFamily {
    Sine,
    Ramp,
    /// Draws each cycle's pattern uniformly from all four [`Pattern`]s.
    Mixed,
}

impl std::str::FromStr for ExcitationFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(Self::Sine),
            "ramp" => Ok(Self::Ramp),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::input(format!("unknown excitation family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "eval" => Ok(Self::Eval),
            other => Err(Error::input(format!(
                "unknown split `{other}` (train|test|eval)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Eval => "eval",
        })
    }
}

/// Split tags for `n` samples: the last `⌊n/10⌋` are eval, the `⌊n/10⌋`
/// before them test, the rest train.
pub fn default_splits(n: usize) -> Vec<Split> {
    let tenth = n / 10;
    let n_train = n - 2 * tenth;
    (0..n)
        .map(|i| match i {
            i if i < n_train => Split::Train,
            i if i < n_train + tenth => Split::Test,
            _ => Split::Eval,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<MotionSample<T>>,
    pub config: SimConfig,
    pub family: ExcitationFamily,
    pub seed: u64,
    pub splits: Vec<Split>,
    pub patterns: Vec<Pattern>,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&MotionSample<T>> {
        self.indices(split)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect()
    }

    /// Checks non-emptiness and that every sample shares `B`, `N`, `L` and `dt`.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::input("dataset is empty"))?;
        if self.splits.len() != self.len() || self.patterns.len() != self.len() {
            return Err(Error::input("split/pattern tags do not cover every sample"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            s.validate()?;
            if s.emg.shape() != first.emg.shape()
                || s.force.shape() != first.force.shape()
                || s.dt != first.dt
            {
                return Err(Error::shape(
                    format!("dataset sample {i}"),
                    format!(
                        "emg {:?}, force {:?}, dt {}",
                        first.emg.shape(),
                        first.force.shape(),
                        first.dt
                    ),
                    format!(
                        "emg {:?}, force {:?}, dt {}",
                        s.emg.shape(),
                        s.force.shape(),
                        s.dt
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Draws a random excitation matrix (`N × L`, values in `[0, 1]`).
pub fn excitations(
    pattern: Pattern,
    muscles: &[Muscle],
    frames: usize,
    rng: &mut SeededRng,
) -> Tensor<f64> {
    let n = muscles.len();
    let mut out = Tensor::zeros(&[n, frames]);
    let pos = |k: usize| k as f64 / (frames - 1).max(1) as f64;
    match pattern {
        Pattern::Sine => {
            let freq = rng.random_range(1..=2) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            for (i, m) in muscles.iter().enumerate() {
                let amp = rng.random_range(0.2..0.8);
                let base = rng.random_range(0.0..0.15);
                let shift = if m.sign < 0 { PI } else { 0.0 } + rng.random_range(-0.3..0.3);
                for (k, u) in out.row_mut(i).iter_mut().enumerate() {
                    *u =
                        base + amp * 0.5 * (1.0 + (2.0 * PI * freq * pos(k) + phase + shift).sin());
                }
            }
        }
        Pattern::Ramp => {
            let peak = rng.random_range(0.2..0.8);
            for (i, m) in muscles.iter().enumerate() {
                let amp = rng.random_range(0.2..0.8);
                let base = rng.random_range(0.0..0.15);
                for (k, u) in out.row_mut(i).iter_mut().enumerate() {
                    let x = pos(k);
                    let tri = if x <= peak {
                        x / peak
                    } else {
                        (1.0 - x) / (1.0 - peak)
                    };
                    *u = base + amp * if m.sign > 0 { tri } else { 1.0 - tri };
                }
            }
        }
        Pattern::MixedA => {
            let s = excitations(Pattern::Sine, muscles, frames, rng);
            let r = excitations(Pattern::Ramp, muscles, frames, rng);
            for ((u, &a), &b) in out.data_mut().iter_mut().zip(s.data()).zip(r.data()) {
                *u = 0.5 * (a + b);
            }
        }
        Pattern::MixedB => {
            for i in 0..n {
                let bursts = rng.random_range(1..=3);
                let spec: Vec<(f64, f64, f64)> = (0..bursts)
                    .map(|_| {
                        (
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.05..0.15),
                            rng.random_range(0.3..0.9),
                        )
                    })
                    .collect();
                for (k, u) in out.row_mut(i).iter_mut().enumerate() {
                    let x = pos(k);
                    *u = spec
                        .iter()
                        .map(|&(c, w, a)| a * (-0.5 * ((x - c) / w).powi(2)).exp())
                        .sum();
                }
            }
        }
    }
    out.data_mut()
        .iter_mut()
        .for_each(|u| *u = u.clamp(0.0, 1.0));
    out
}

/// Generates `n_cycles` simulated cycles. A pure function of its arguments.
pub fn make_dataset<T: Real>(
    n_cycles: usize,
    cfg: &SimConfig,
    family: ExcitationFamily,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_cycles == 0 {
        return Err(Error::input("n_cycles must be >= 1"));
    }
    cfg.validate()?;
    let mut samples = Vec::with_capacity(n_cycles);
    let mut patterns = Vec::with_capacity(n_cycles);
    for i in 0..n_cycles {
        let mut rng = rng::stream(seed, "cycle", i as u64);
        let pattern = match family {
            ExcitationFamily::Sine => Pattern::Sine,
            ExcitationFamily::Ramp => Pattern::Ramp,
            ExcitationFamily::Mixed => Pattern::ALL[rng.random_range(0..4)],
        };
        let u = excitations(pattern, &cfg.muscles, cfg.frames, &mut rng).cast::<T>();
        samples.push(simulate_cycle(
            &u,
            cfg,
            rng::derive_seed(seed, "cycle-noise", i as u64),
        )?);
        patterns.push(pattern);
    }
    Ok(Dataset {
        samples,
        config: cfg.clone(),
        family,
        seed,
        splits: default_splits(n_cycles),
        patterns,
    })
}

/// Linear interpolation of every channel onto `frames` uniformly spaced
/// points spanning the same duration.
pub fn resample_cycle<T: Real>(sample: &MotionSample<T>, frames: usize) -> Result<MotionSample<T>> {
    if frames < 3 {
        return Err(Error::input(format!(
            "cannot resample to {frames} frames, need >= 3"
        )));
    }
    sample.validate()?;
    let l = sample.frames();
    let resample = |src: &[T]| -> Vec<T> {
        (0..frames)
            .map(|j| {
                if j == frames - 1 {
                    return src[l - 1];
                }
                // position on the source grid, in source-frame units
                let x = T::of_usize(j) * T::of_usize(l - 1) / T::of_usize(frames - 1);
                let i0 = x.floor().to_usize().unwrap().min(l - 2);
                let w = x - T::of_usize(i0);
                src[i0] + w * (src[i0 + 1] - src[i0])
            })
            .collect()
    };
    let resample_rows = |t: &Tensor<T>| -> Tensor<T> {
        let rows: Vec<Vec<T>> = (0..t.rows()).map(|r| resample(t.row(r))).collect();
        Tensor::from_vec(&[t.rows(), frames], rows.concat()).unwrap()
    };
    Ok(MotionSample {
        dt: sample.dt * T::of_usize(l - 1) / T::of_usize(frames - 1),
        emg: resample_rows(&sample.emg),
        force: resample_rows(&sample.force),
        theta: resample(&sample.theta),
    })
}
