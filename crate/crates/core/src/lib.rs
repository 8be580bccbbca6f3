//! Physics-informed adversarial estimation of muscle force and joint angle
//! from multi-channel sEMG envelopes.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what training and every
//! serialized artifact use.

pub mod discriminator;
pub mod dynsim;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod physics;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = nn::Tensor<f64>;
pub type MotionSample = dynsim::MotionSample<f64>;
pub type Dataset = dynsim::Dataset<f64>;
pub type PhysicsParams = physics::PhysicsParams<f64>;
pub type GeneratorParams = generator::GeneratorParams<f64>;
pub type GenOutput = generator::GenOutput<f64>;
pub type DiscriminatorParams = discriminator::DiscriminatorParams<f64>;
pub type TrainOutcome = training::TrainOutcome<f64>;
