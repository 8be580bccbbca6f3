//! Torque-balance residual of the joint equation of motion, the structural
//! reward built on it, and inverse-dynamics reference forces.

use serde::{Deserialize, Serialize};

use crate::dynsim::SimConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Real;

/// Coefficients of `I·θ̈ + b·θ̇ + G0·sin θ = Σ_n s_n·ρ_n·F_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsParams<T> {
    pub inertia: T,
    pub damping: T,
    pub gravity_torque: T,
    /// Signed moment arms `s_n·ρ_n`, m.
    pub moment_arms: Vec<T>,
}

impl<T: Real> PhysicsParams<T> {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            inertia: T::lit(cfg.inertia),
            damping: T::lit(cfg.damping),
            gravity_torque: T::lit(cfg.gravity_torque),
            moment_arms: cfg
                .muscles
                .iter()
                .map(|m| T::lit(m.sign as f64 * m.moment_arm))
                .collect(),
        }
    }

    pub fn n_muscles(&self) -> usize {
        self.moment_arms.len()
    }

    /// `I·θ̈ + b·θ̇ + G0·sin θ` at one frame.
    #[inline]
    pub fn required_torque(&self, theta: T, thetadot: T, thetaddot: T) -> T {
        self.inertia * thetaddot + self.damping * thetadot + self.gravity_torque * theta.sin()
    }

    /// `Σ_n s_n·ρ_n·F_n` at frame `k`.
    #[inline]
    pub fn muscle_torque(&self, forces: &Tensor<T>, k: usize) -> T {
        self.moment_arms
            .iter()
            .enumerate()
            .map(|(n, &r)| r * forces.at2(n, k))
            .sum()
    }
}

/// How the residual maps to a reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSign {
    /// `exp(−PL)`: 1 on exact torque balance, decaying with violation.
    #[default]
    Physics,
    /// `exp(+PL²)`, the formula exactly as printed. Grows with violation;
    /// kept only to reproduce that reading. Saturates at the largest finite value.
    PaperLiteral,
}

/// Velocity and acceleration of a uniformly sampled series: central
/// differences inside, second-order one-sided differences at both ends.
pub fn kinematic_derivatives<T: Real>(theta: &[T], dt: T) -> Result<(Vec<T>, Vec<T>)> {
    let l = theta.len();
    if l < 3 {
        return Err(Error::input(format!(
            "need >= 3 frames for derivatives, got {l}"
        )));
    }
    if !(dt.is_finite() && dt > T::zero()) {
        return Err(Error::input("dt must be > 0 and finite"));
    }
    let two = T::lit(2.0);
    let (three, four, five) = (T::lit(3.0), T::lit(4.0), T::lit(5.0));
    let dt2 = dt * dt;
    let mut vel = vec![T::zero(); l];
    let mut acc = vec![T::zero(); l];
    for k in 1..l - 1 {
        vel[k] = (theta[k + 1] - theta[k - 1]) / (two * dt);
        acc[k] = (theta[k + 1] - two * theta[k] + theta[k - 1]) / dt2;
    }
    let t = theta;
    vel[0] = (-three * t[0] + four * t[1] - t[2]) / (two * dt);
    vel[l - 1] = (three * t[l - 1] - four * t[l - 2] + t[l - 3]) / (two * dt);
    if l >= 4 {
        acc[0] = (two * t[0] - five * t[1] + four * t[2] - t[3]) / dt2;
        acc[l - 1] = (two * t[l - 1] - five * t[l - 2] + four * t[l - 3] - t[l - 4]) / dt2;
    } else {
        acc[0] = acc[1];
        acc[l - 1] = acc[1];
    }
    Ok((vel, acc))
}

fn check_shapes<T: Real>(theta: &[T], forces: &Tensor<T>, params: &PhysicsParams<T>) -> Result<()> {
    let l = theta.len();
    if forces.shape() != [params.n_muscles(), l] {
        return Err(Error::shape(
            "lagrangian residual forces",
            format!("[{}, {l}]", params.n_muscles()),
            format!("{:?}", forces.shape()),
        ));
    }
    if theta.iter().chain(forces.data()).any(|v| v.is_nan()) {
        return Err(Error::input("NaN in residual input"));
    }
    Ok(())
}

/// Mean squared torque imbalance with caller-supplied derivatives, (N·m)².
pub fn residual_with_derivatives<T: Real>(
    theta: &[T],
    thetadot: &[T],
    thetaddot: &[T],
    forces: &Tensor<T>,
    params: &PhysicsParams<T>,
) -> Result<T> {
    check_shapes(theta, forces, params)?;
    if thetadot.len() != theta.len() || thetaddot.len() != theta.len() {
        return Err(Error::shape(
            "residual derivatives",
            theta.len(),
            thetadot.len().min(thetaddot.len()),
        ));
    }
    let sum: T = (0..theta.len())
        .map(|k| {
            let r = params.required_torque(theta[k], thetadot[k], thetaddot[k])
                - params.muscle_torque(forces, k);
            r * r
        })
        .sum();
    Ok(sum / T::of_usize(theta.len()))
}

/// Mean squared torque imbalance over all frames, with finite-difference
/// derivatives of `theta`.
pub fn lagrangian_residual<T: Real>(
    theta: &[T],
    forces: &Tensor<T>,
    params: &PhysicsParams<T>,
    dt: T,
) -> Result<T> {
    check_shapes(theta, forces, params)?;
    let (vel, acc) = kinematic_derivatives(theta, dt)?;
    residual_with_derivatives(theta, &vel, &acc, forces, params)
}

/// Maps a residual to a reward under the given sign convention.
pub fn reward_from_residual<T: Real>(residual: T, sign: RewardSign) -> T {
    match sign {
        RewardSign::Physics => (-residual).exp(),
        RewardSign::PaperLiteral => {
            let cap = T::max_value().ln();
            (residual * residual).min(cap).exp()
        }
    }
}

/// `exp(−lagrangian_residual)`, in `(0, 1]`.
pub fn structural_reward<T: Real>(
    theta: &[T],
    forces: &Tensor<T>,
    params: &PhysicsParams<T>,
    dt: T,
) -> Result<T> {
    Ok(reward_from_residual(
        lagrangian_residual(theta, forces, params, dt)?,
        RewardSign::Physics,
    ))
}

/// Net joint torque needed to realize `theta`: `I·θ̈ + b·θ̇ + G0·sin θ`.
pub fn inverse_dynamics_torque<T: Real>(
    theta: &[T],
    params: &PhysicsParams<T>,
    dt: T,
) -> Result<Vec<T>> {
    let (vel, acc) = kinematic_derivatives(theta, dt)?;
    Ok((0..theta.len())
        .map(|k| params.required_torque(theta[k], vel[k], acc[k]))
        .collect())
}

/// Distributes a torque series onto muscles: positive torque goes entirely to
/// the first flexor, negative torque to the first extensor, as `|τ|/ρ`; every
/// other channel stays at zero.
pub fn distribute_torque<T: Real>(torque: &[T], params: &PhysicsParams<T>) -> Result<Tensor<T>> {
    let flexor = params.moment_arms.iter().position(|&r| r > T::zero());
    let extensor = params.moment_arms.iter().position(|&r| r < T::zero());
    let (Some(fl), Some(ex)) = (flexor, extensor) else {
        return Err(Error::input(
            "torque distribution needs one flexor and one extensor",
        ));
    };
    let mut forces = Tensor::zeros(&[params.n_muscles(), torque.len()]);
    for (k, &tq) in torque.iter().enumerate() {
        let ch = if tq > T::zero() { fl } else { ex };
        forces.row_mut(ch)[k] = tq.abs() / params.moment_arms[ch].abs();
    }
    Ok(forces)
}

/// Inverse-dynamics reference forces for an angle series.
pub fn reference_forces<T: Real>(
    theta: &[T],
    params: &PhysicsParams<T>,
    dt: T,
) -> Result<Tensor<T>> {
    distribute_torque(&inverse_dynamics_torque(theta, params, dt)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PhysicsParams<f64> {
        PhysicsParams::from_config(&SimConfig::knee())
    }

    #[test]
    fn derivatives_of_constant_vanish() {
        let (v, a) = kinematic_derivatives(&[0.7f64; 6], 0.01).unwrap();
        assert!(v.iter().chain(&a).all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        let th: Vec<f64> = (0..20).map(|k| (k as f64 * 0.1).powi(2)).collect();
        let (_, a) = kinematic_derivatives(&th, 0.1).unwrap();
        for &ak in &a[1..19] {
            assert!((ak - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn derivatives_of_sine_are_accurate() {
        let dt = 0.01;
        let th: Vec<f64> = (0..200).map(|k| (k as f64 * dt).sin()).collect();
        let (v, a) = kinematic_derivatives(&th, dt).unwrap();
        for k in 0..200 {
            let t = k as f64 * dt;
            assert!((v[k] - t.cos()).abs() < 2e-4, "vel {k}");
            assert!((a[k] + t.sin()).abs() < 2e-4, "acc {k}");
        }
    }

    #[test]
    fn short_series_are_rejected() {
        assert!(kinematic_derivatives(&[0.0, 1.0], 0.1).is_err());
        assert!(inverse_dynamics_torque(&[0.0, 1.0], &params(), 0.1).is_err());
    }

    #[test]
    fn equilibrium_has_zero_residual_and_unit_reward() {
        let p = params();
        let f = Tensor::zeros(&[2, 10]);
        assert_eq!(lagrangian_residual(&[0.0; 10], &f, &p, 0.01).unwrap(), 0.0);
        assert_eq!(structural_reward(&[0.0; 10], &f, &p, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn unit_torque_imbalance() {
        let p = params();
        let mut f = Tensor::zeros(&[2, 10]);
        // 0.02 m · 50 N = 1 N·m on the flexor
        f.row_mut(0).fill(50.0);
        let r = lagrangian_residual(&[0.0; 10], &f, &p, 0.01).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let w = structural_reward(&[0.0; 10], &f, &p, 0.01).unwrap();
        assert!((w - (-1.0f64).exp()).abs() < 1e-12);
        assert!((w - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn nan_input_is_rejected() {
        let f = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            lagrangian_residual(&[0.0, f64::NAN, 0.0, 0.0], &f, &params(), 0.01),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn inverse_dynamics_of_quadratic() {
        let p = PhysicsParams {
            inertia: 2.0,
            damping: 0.0,
            gravity_torque: 0.0,
            moment_arms: vec![0.02, -0.02],
        };
        let th: Vec<f64> = (0..12).map(|k| (k as f64 * 0.1).powi(2)).collect();
        let tq = inverse_dynamics_torque(&th, &p, 0.1).unwrap();
        for &t in &tq[1..11] {
            assert!((t - 4.0).abs() < 1e-9);
        }
        assert!(inverse_dynamics_torque(&[0.0; 5], &p, 0.1)
            .unwrap()
            .iter()
            .all(|&t| t == 0.0));
    }

    #[test]
    fn distributed_forces_balance_exactly() {
        let p = params();
        let th: Vec<f64> = (0..50)
            .map(|k| 0.3 * (k as f64 * 0.2).sin() - 0.1)
            .collect();
        let f = reference_forces(&th, &p, 0.01).unwrap();
        assert!(f.data().iter().all(|&v| v >= 0.0));
        let r = lagrangian_residual(&th, &f, &p, 0.01).unwrap();
        assert!(r < 1e-10, "{r}");
    }

    #[test]
    fn literal_reward_grows_and_saturates() {
        assert!(
            reward_from_residual(2.0f64, RewardSign::PaperLiteral)
                > reward_from_residual(1.0, RewardSign::PaperLiteral)
        );
        assert!(reward_from_residual(1e200f64, RewardSign::PaperLiteral).is_finite());
    }
}
