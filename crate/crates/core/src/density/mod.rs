//! Continuous normalizing flows driven by characteristic fields.
//!
//! The log-density of `u` changes at rate `−tr(∂(du/ds)/∂u)`. The trace is
//! computed exactly from forward-mode Jacobian columns, or estimated with
//! Hutchinson probes during training.

mod flow;
mod trace;

pub use flow::{
    flow_dynamics, log_prob, log_prob_with_stats, mean_nll, pull_back, push_forward, sample,
    train_cnf,
    BaseDensity, Cnf, CnfTrainConfig, FlowDynamics, FlowState, NllRecord,
};
pub use trace::{draw_probe, hutchinson_trace, ProbeDist, TraceEstimator, TraceMode};
