//! Dense tensors on a reverse-mode tape, with the handful of layers the
//! enhancement pipeline needs (convolutions, pooling, attention), an Adam
//! optimizer and finite-difference gradient checking.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); training runs in
//! `f32`, gradient verification in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig, CosineSchedule};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_where, GradCheckConfig, GradCheckReport, ParamCheck};
pub use kernels::Padding;
pub use params::{Param, ParamGrads, ParamSet, Session};
pub use scalar::Scalar;
pub use tape::{Gradients, Replay, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
