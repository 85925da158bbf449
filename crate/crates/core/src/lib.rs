//! Cross-entropy analytic policy gradients (CE-APG) on self-contained
//! differentiable simulations of underactuated planar chains.
//!
//! * [`autodiff`]: scalar reverse-mode tape.
//! * [`dynamics`]: cartpole, acrobot, and double cartpole models.
//! * [`policy`]: GRU + MLP controller over a flat parameter vector.
//! * [`optim`]: Adam, gradient clipping, learning-rate schedule.
//! * [`apg`]: differentiable rollouts and the gradient inner loop.
//! * [`cem`]: cross-entropy outer loop, CE-APG, and the ablation drivers.
//! * [`harness`]: configuration, CSV outputs, and the command implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod apg;
pub mod autodiff;
pub mod cem;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod seed;

pub use error::{Error, Result};
