//! Initial-value integration and parameter sensitivities.
//!
//! [`integrate`] covers forward Euler, classical RK4 and the adaptive
//! Dormand–Prince 5(4) pair. [`integrate_adjoint`] computes gradients by
//! solving the adjoint system backward in `s` with constant memory;
//! [`backprop_through_solver`] differentiates the discrete fixed-step map
//! exactly by replaying every step in reverse.

mod adjoint;
mod discrete;
mod integrate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adjoint::{integrate_adjoint, integrate_adjoint_observed, Observation, Sensitivity};
pub use discrete::backprop_through_solver;
pub use integrate::{integrate, integrate_with};

/// Right-hand side `dy/ds = f(s, y)` of an ODE.
pub trait Dynamics {
    fn dim(&self) -> usize;

    /// Writes `f(s, y)` into `dy`.
    fn eval(&self, s: f64, y: &[f64], dy: &mut [f64]);
}

/// Dynamics with parameters `θ` that can form vector–Jacobian products.
pub trait DiffDynamics: Dynamics {
    fn num_params(&self) -> usize;

    /// Writes `f(s, y)` into `dy`, `cotᵀ ∂f/∂y` into `grad_y` and
    /// `cotᵀ ∂f/∂θ` into `grad_p` (all overwritten).
    fn vjp(
        &self,
        s: f64,
        y: &[f64],
        cot: &[f64],
        dy: &mut [f64],
        grad_y: &mut [f64],
        grad_p: &mut [f64],
    );
}

impl<D: Dynamics + ?Sized> Dynamics for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, s: f64, y: &[f64], dy: &mut [f64]) {
        (**self).eval(s, y, dy)
    }
}

impl<D: DiffDynamics + ?Sized> DiffDynamics for &D {
    fn num_params(&self) -> usize {
        (**self).num_params()
    }
    fn vjp(
        &self,
        s: f64,
        y: &[f64],
        cot: &[f64],
        dy: &mut [f64],
        grad_y: &mut [f64],
        grad_p: &mut [f64],
    ) {
        (**self).vjp(s, y, cot, dy, grad_y, grad_p)
    }
}

/// Adapts a closure `(s, y, dy)` into [`Dynamics`].
pub struct FnDynamics<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnDynamics<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> Dynamics for FnDynamics<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, s: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(s, y, dy)
    }
}

/// An initial-value problem over `s ∈ [s0, s1]` (`s1 < s0` integrates backward).
pub struct OdeProblem<D> {
    pub dynamics: D,
    pub s_span: (f64, f64),
    pub y0: Vec<f64>,
}

impl<D: Dynamics> OdeProblem<D> {
    pub fn new(dynamics: D, s_span: (f64, f64), y0: Vec<f64>) -> Self {
        Self {
            dynamics,
            s_span,
            y0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.y0.len() != self.dynamics.dim() {
            return Err(Error::dim(
                "initial state",
                self.dynamics.dim(),
                self.y0.len(),
            ));
        }
        let (s0, s1) = self.s_span;
        if !(s0.is_finite() && s1.is_finite()) || s0 == s1 {
            return Err(Error::Contract(format!(
                "integration span ({s0}, {s1}) must be finite and non-empty"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn is_fixed_step(self) -> bool {
        !matches!(self, Method::Dopri5)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(Error::UnsupportedMethod(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Step length for the fixed-step methods.
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            h: 0.05,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn euler(h: f64) -> Self {
        Self {
            method: Method::Euler,
            h,
            ..Self::default()
        }
    }

    pub fn rk4(h: f64) -> Self {
        Self {
            method: Method::Rk4,
            h,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.h) && ok(self.rtol) && ok(self.atol)) || self.max_steps == 0 {
            return Err(Error::Contract(format!(
                "solver config needs positive h, rtol, atol and max_steps: {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of equal steps the fixed-step methods take over `span`.
    pub fn fixed_steps(&self, span: f64) -> usize {
        ((span.abs() / self.h) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Function-evaluation and step accounting for one solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Largest number of `f64` values the solve held at once.
    #[serde(skip)]
    pub peak_floats: usize,
}

impl SolveStats {
    pub fn merge(&mut self, other: &SolveStats) {
        self.nfe += other.nfe;
        self.steps_accepted += other.steps_accepted;
        self.steps_rejected += other.steps_rejected;
        self.peak_floats = self.peak_floats.max(other.peak_floats);
    }
}
