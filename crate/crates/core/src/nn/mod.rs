//! Minimal differentiable layer set: affine, conv1d, max-over-time, LSTM,
//! highway and softmax, each with an explicit backward pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use layers::{
    affine, affine_backward, conv1d, conv1d_backward, highway, highway_backward, lstm_step,
    lstm_step_backward, max_over_time, max_over_time_backward, softmax, HighwayCache,
    HighwayParams, LstmCache, LstmParams,
};
pub use params::{clip_grad_norm, Adam, ParamSet};
pub use tensor::Tensor;
