//! Monotonic Taylor neural networks.
//!
//! A learned Jacobian network is embedded in a first- or second-order
//! Taylor predictor of the next state, with monotonicity priors imposed
//! either by sign gates on the network outputs or by a loss penalty. The
//! crate also contains the synthetic plants used for benchmarking, rollout
//! metrics and a gradient-based receding-horizon controller.

pub mod checkpoint;
pub mod constraints;
pub mod error;
pub mod evaluation;
pub mod finite_diff;
pub mod linalg;
pub mod mpc;
pub mod net;
pub mod plants;
pub mod taylor;
pub mod training;

pub use constraints::{MonoSpec, MonoTag, PenaltyWeights};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use net::{Activation, DenseNet, Scaling};
pub use plants::{Plant, TimeSeries, Transition};
pub use taylor::{AugState, GateMode, ModelLayout, MtnnModel, NetShape, TaylorOrder};
pub use training::{LossMode, TrainConfig, TrainHistory};
