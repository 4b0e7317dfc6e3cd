//! Reason-then-answer post-training on a toy autoregressive token policy.

pub mod cde;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod scalar;
pub mod task;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = policy::PolicyParams<f64>;
pub type Params32 = policy::PolicyParams<f32>;
pub type Snapshot = policy::Snapshot<f64>;
pub type Snapshot32 = policy::Snapshot<f32>;
pub type Gradient = policy::Gradient<f64>;
