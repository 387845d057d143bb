//! Characteristic neural ODEs.
//!
//! A characteristic model evolves a latent state `u` along a learned curve
//! `x(s)` in a `k`-dimensional coordinate space: `dx/ds = a(x, u; u0)` and
//! `du/ds = J(x, u) · a`, where `J` plays the role of `∂u/∂x`. Setting
//! `k = 1` and `a ≡ 1` recovers an ordinary neural ODE.
//!
//! - [`diffcore`]: tensors, reverse-mode tape, MLPs, Adam, checkpoints
//! - [`solver`]: Euler / RK4 / Dormand–Prince integration, adjoint and
//!   discrete sensitivities
//! - [`cnode`]: characteristic fields, the three-stage model and training
//! - [`density`]: continuous normalizing flows under characteristic dynamics
//! - [`tasks`]: synthetic datasets and experiment procedures

pub mod cnode;
pub mod density;
pub mod diffcore;
pub mod error;
pub mod solver;
pub mod tasks;

pub use error::{Error, Result};
