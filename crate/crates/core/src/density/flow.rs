use std::cell::RefCell;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trace::{draw_probe, TraceEstimator, TraceMode};
use crate::cnode::{CharacteristicField, FieldDynamics};
use crate::diffcore::{
    adam_step, AdamConfig, AdamState, ParamVector, Tape, Tensor, Var, FIELD_SEGMENT,
};
use crate::error::{check_len, Error, Result};
use crate::solver::{
    integrate, integrate_adjoint, DiffDynamics, Dynamics, OdeProblem, SolveStats, SolverConfig,
};

/// `u`, the characteristic coordinate `x` and the accumulated log-density change.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub delta_logp: f64,
}

impl FlowState {
    pub fn start(u: Vec<f64>, k: usize) -> Self {
        Self {
            u,
            x: vec![0.0; k],
            delta_logp: 0.0,
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut y = self.u.clone();
        y.extend_from_slice(&self.x);
        y.push(self.delta_logp);
        y
    }

    fn from_slice(y: &[f64], n: usize) -> Self {
        Self {
            u: y[..n].to_vec(),
            x: y[n..y.len() - 1].to_vec(),
            delta_logp: y[y.len() - 1],
        }
    }
}

/// Standard normal on `R^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseDensity {
    pub n: usize,
}

impl BaseDensity {
    pub fn log_prob(&self, u: &[f64]) -> f64 {
        -0.5 * u.iter().map(|v| v * v).sum::<f64>() - 0.5 * self.n as f64 * (2.0 * PI).ln()
    }

    /// Differential entropy in nats, `n/2·(1 + ln 2π)`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.n as f64 * (1.0 + (2.0 * PI).ln())
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.n).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// A continuous normalizing flow whose velocity is a characteristic field.
///
/// The field may depend on `u` only: its direction must not read `x` or the
/// conditioner, and `J` must be in `u_only` mode. This keeps the density of
/// `u` self-contained, since `x` and `u0` are unknown when a data point is
/// mapped back to the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnf {
    pub field: CharacteristicField,
    pub t_end: f64,
}

impl Cnf {
    pub fn new(field: CharacteristicField) -> Result<Self> {
        field.validate()?;
        if !field.is_autonomous_in_u() {
            return Err(Error::Contract(
                "flow fields must depend on u only (no x or conditioner inputs, u_only balance)"
                    .into(),
            ));
        }
        Ok(Self { field, t_end: 1.0 })
    }

    pub fn base(&self) -> BaseDensity {
        BaseDensity { n: self.field.n }
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::from_parts(vec![(FIELD_SEGMENT, self.field.init_params(seed))])
            .expect("single segment")
    }

    /// Wraps raw Θ2 values.
    pub fn params_from(&self, theta: Vec<f64>) -> Result<ParamVector> {
        check_len("flow parameters", self.field.param_count(), theta.len())?;
        ParamVector::from_parts(vec![(FIELD_SEGMENT, theta)])
    }

    fn theta<'a>(&self, params: &'a ParamVector) -> Result<&'a [f64]> {
        let t = params.segment(FIELD_SEGMENT)?;
        check_len("flow parameters", self.field.param_count(), t.len())?;
        Ok(t)
    }
}

/// `d/ds [u, x, Δlog p]` with `dΔlog p/ds = −tr(∂(du/ds)/∂u)`.
///
/// Hutchinson probes are drawn once at construction and reused for every
/// evaluation, so a forward solve and its adjoint see the same estimator.
pub struct FlowDynamics<'a> {
    field: &'a CharacteristicField,
    theta: &'a [f64],
    mode: TraceMode,
    probes: Vec<Vec<f64>>,
    tape: RefCell<Tape>,
}

impl<'a> FlowDynamics<'a> {
    pub fn new(
        field: &'a CharacteristicField,
        theta: &'a [f64],
        est: &TraceEstimator,
    ) -> Result<Self> {
        est.validate()?;
        check_len("flow parameters", field.param_count(), theta.len())?;
        let probes = match est.mode {
            TraceMode::Exact => Vec::new(),
            TraceMode::Hutchinson => {
                let mut rng = ChaCha8Rng::seed_from_u64(est.seed);
                (0..est.probes)
                    .map(|_| draw_probe(field.n, est.probe_dist, &mut rng))
                    .collect()
            }
        };
        Ok(Self {
            field,
            theta,
            mode: est.mode,
            probes,
            tape: RefCell::new(Tape::new()),
        })
    }

    /// Records the derivative; returns `(θ, u, x, output)`.
    fn record(&self, tape: &mut Tape, y: &[f64]) -> Result<(Var, Var, Var, Var)> {
        let (n, k) = (self.field.n, self.field.k);
        tape.clear();
        let theta = tape.leaf(self.theta);
        let u = tape.leaf(&y[..n]);
        let x = tape.leaf(&y[n..n + k]);
        let dirs: Vec<Var> = match self.mode {
            TraceMode::Exact => (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    tape.constant(&e)
                })
                .collect(),
            TraceMode::Hutchinson => self.probes.iter().map(|p| tape.constant(p)).collect(),
        };
        let (a, du, tangents) = self.field.record(tape, theta, x, u, None, &dirs)?;
        let terms: Vec<Var> = match self.mode {
            TraceMode::Exact => tangents
                .iter()
                .enumerate()
                .map(|(i, &t)| tape.slice(t, i, 1))
                .collect(),
            TraceMode::Hutchinson => tangents
                .iter()
                .zip(&dirs)
                .map(|(&t, &e)| tape.dot(e, t))
                .collect(),
        };
        let stacked = tape.concat(&terms);
        let total = tape.sum(stacked);
        let scale = match self.mode {
            TraceMode::Exact => -1.0,
            TraceMode::Hutchinson => -1.0 / self.probes.len() as f64,
        };
        let neg_trace = tape.scale(total, scale);
        let out = tape.concat(&[du, a, neg_trace]);
        Ok((theta, u, x, out))
    }
}

impl Dynamics for FlowDynamics<'_> {
    fn dim(&self) -> usize {
        self.field.n + self.field.k + 1
    }

    fn eval(&self, _s: f64, y: &[f64], dy: &mut [f64]) {
        let mut tape = self.tape.borrow_mut();
        match self.record(&mut tape, y) {
            Ok((.., out)) => dy.copy_from_slice(tape.value(out)),
            Err(_) => dy.fill(f64::NAN),
        }
    }
}

impl DiffDynamics for FlowDynamics<'_> {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn vjp(
        &self,
        _s: f64,
        y: &[f64],
        cot: &[f64],
        dy: &mut [f64],
        grad_y: &mut [f64],
        grad_p: &mut [f64],
    ) {
        let (n, k) = (self.field.n, self.field.k);
        let mut tape = self.tape.borrow_mut();
        let recorded = self.record(&mut tape, y).and_then(|vars| {
            tape.backward_with(vars.3, cot)?;
            Ok(vars)
        });
        let Ok((theta, u, x, out)) = recorded else {
            dy.fill(f64::NAN);
            grad_y.fill(f64::NAN);
            grad_p.fill(f64::NAN);
            return;
        };
        dy.copy_from_slice(tape.value(out));
        grad_y[..n].copy_from_slice(tape.grad(u));
        grad_y[n..n + k].copy_from_slice(tape.grad(x));
        grad_y[n + k] = 0.0;
        grad_p.copy_from_slice(tape.grad(theta));
    }
}

/// Time derivative of a [`FlowState`].
pub fn flow_dynamics(
    field: &CharacteristicField,
    theta: &[f64],
    state: &FlowState,
    estimator: &TraceEstimator,
) -> Result<FlowState> {
    check_len("flow state u", field.n, state.u.len())?;
    check_len("flow state x", field.k, state.x.len())?;
    let dynamics = FlowDynamics::new(field, theta, estimator)?;
    let y = state.to_vec();
    let mut tape = Tape::new();
    let (.., out) = dynamics.record(&mut tape, &y)?;
    Ok(FlowState::from_slice(tape.value(out), field.n))
}

fn solve_flow(
    cnf: &Cnf,
    theta: &[f64],
    start: FlowState,
    span: (f64, f64),
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<(FlowState, SolveStats)> {
    let dynamics = FlowDynamics::new(&cnf.field, theta, estimator)?;
    let (y, stats) = integrate(&OdeProblem::new(&dynamics, span, start.to_vec()), solver)?;
    Ok((FlowState::from_slice(&y, cnf.field.n), stats))
}

/// Maps a base point `w` forward to `s = T`. The returned `delta_logp` is
/// `−∫₀ᵀ tr(∂f/∂u) ds`.
pub fn push_forward(
    cnf: &Cnf,
    params: &ParamVector,
    w: &[f64],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<FlowState> {
    check_len("base point", cnf.field.n, w.len())?;
    let start = FlowState::start(w.to_vec(), cnf.field.k);
    solve_flow(
        cnf,
        cnf.theta(params)?,
        start,
        (0.0, cnf.t_end),
        solver,
        estimator,
    )
    .map(|(s, _)| s)
    .map_err(|e| e.context("pushing base sample forward"))
}

/// Maps a data point `v` back to the base at `s = 0`. The returned
/// `delta_logp` is `+∫₀ᵀ tr(∂f/∂u) ds`.
pub fn pull_back(
    cnf: &Cnf,
    params: &ParamVector,
    v: &[f64],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<FlowState> {
    check_len("data point", cnf.field.n, v.len())?;
    let start = FlowState::start(v.to_vec(), cnf.field.k);
    solve_flow(
        cnf,
        cnf.theta(params)?,
        start,
        (cnf.t_end, 0.0),
        solver,
        estimator,
    )
    .map(|(s, _)| s)
    .map_err(|e| e.context("mapping data point to base"))
}

/// Log-density of `v` under the flow, integrating from the data (`s = T`) to the base.
pub fn log_prob(
    cnf: &Cnf,
    params: &ParamVector,
    v: &[f64],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<f64> {
    log_prob_with_stats(cnf, params, v, solver, estimator).map(|(l, _)| l)
}

pub fn log_prob_with_stats(
    cnf: &Cnf,
    params: &ParamVector,
    v: &[f64],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<(f64, SolveStats)> {
    check_len("data point", cnf.field.n, v.len())?;
    let start = FlowState::start(v.to_vec(), cnf.field.k);
    let (base_state, stats) = solve_flow(
        cnf,
        cnf.theta(params)?,
        start,
        (cnf.t_end, 0.0),
        solver,
        estimator,
    )
    .map_err(|e| e.context("mapping data point to base"))?;
    // Integrated backward, the accumulator holds +∫₀ᵀ tr ds at s = 0.
    Ok((
        cnf.base().log_prob(&base_state.u) - base_state.delta_logp,
        stats,
    ))
}

/// `count` base draws pushed to `s = T`, as a `count × n` tensor.
pub fn sample(
    cnf: &Cnf,
    params: &ParamVector,
    count: usize,
    solver: &SolverConfig,
    seed: u64,
) -> Result<Tensor> {
    let theta = cnf.theta(params)?;
    let base = cnf.base();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dynamics = FieldDynamics::new(&cnf.field, theta, &[])?;
    let k_off = if cnf.field.carries_x() {
        cnf.field.k
    } else {
        0
    };
    let mut data = Vec::with_capacity(count * base.n);
    for _ in 0..count {
        let mut y0 = vec![0.0; k_off];
        y0.extend(base.sample(&mut rng));
        let (y, _) = integrate(&OdeProblem::new(&dynamics, (0.0, cnf.t_end), y0), solver)
            .map_err(|e| e.context("sampling from flow"))?;
        data.extend_from_slice(&y[k_off..]);
    }
    Tensor::new(vec![count, base.n], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub solver: SolverConfig,
    pub estimator: TraceEstimator,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for CnfTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            solver: SolverConfig::default(),
            estimator: TraceEstimator::hutchinson(1, super::ProbeDist::Rademacher, 0),
            seed: 0,
            parallel: false,
        }
    }
}

/// Per-epoch negative log-likelihood in nats and mean solver cost per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllRecord {
    pub epoch: usize,
    pub mean_nll_nats: f64,
    pub nfe_forward: f64,
    pub nfe_adjoint: f64,
}

struct NllGradient {
    nll: f64,
    grads: Vec<f64>,
    nfe_forward: usize,
    nfe_adjoint: usize,
}

fn nll_gradient(
    cnf: &Cnf,
    theta: &[f64],
    v: &[f64],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<NllGradient> {
    let (n, k) = (cnf.field.n, cnf.field.k);
    check_len("data point", n, v.len())?;
    let dynamics = FlowDynamics::new(&cnf.field, theta, estimator)?;
    let span = (cnf.t_end, 0.0);
    let start = FlowState::start(v.to_vec(), k).to_vec();
    let (y0, fwd) = integrate(&OdeProblem::new(&dynamics, span, start), solver)
        .map_err(|e| e.context("mapping data point to base"))?;
    let base = FlowState::from_slice(&y0, n);
    let nll = -(cnf.base().log_prob(&base.u) - base.delta_logp);
    let mut loss_grad = base.u.clone();
    loss_grad.extend(std::iter::repeat_n(0.0, k));
    loss_grad.push(1.0);
    let sens = integrate_adjoint(&dynamics, &y0, span, solver, &loss_grad)
        .map_err(|e| e.context("flow adjoint"))?;
    Ok(NllGradient {
        nll,
        grads: sens.grad_params,
        nfe_forward: fwd.nfe,
        nfe_adjoint: sens.stats.nfe,
    })
}

/// Mean negative log-likelihood over `data`.
pub fn mean_nll(
    cnf: &Cnf,
    params: &ParamVector,
    data: &[Vec<f64>],
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let total = data
        .par_iter()
        .map(|v| log_prob(cnf, params, v, solver, estimator))
        .collect::<Result<Vec<f64>>>()?;
    Ok(-total.iter().sum::<f64>() / data.len() as f64)
}

/// Maximum-likelihood training with adjoint gradients.
pub fn train_cnf(
    cnf: &Cnf,
    params: ParamVector,
    data: &[Vec<f64>],
    config: &CnfTrainConfig,
) -> Result<(ParamVector, Vec<NllRecord>)> {
    config.solver.validate()?;
    config.estimator.validate()?;
    cnf.theta(&params)?;
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::Contract(
            "training needs data and a positive batch size".into(),
        ));
    }
    let mut params = params;
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nll_sum, mut nf, mut na) = (0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let theta = params.segment(FIELD_SEGMENT)?;
            let batch_seed = config
                .estimator
                .seed
                .wrapping_add((epoch as u64) << 32)
                .wrapping_add((b as u64) << 16);
            let one = |(j, &i): (usize, &usize)| {
                let est = config
                    .estimator
                    .with_seed(batch_seed.wrapping_add(j as u64));
                nll_gradient(cnf, theta, &data[i], &config.solver, &est)
            };
            let results: Vec<Result<NllGradient>> = if config.parallel {
                batch.par_iter().enumerate().map(one).collect()
            } else {
                batch.iter().enumerate().map(one).collect()
            };
            let mut grad = vec![0.0; params.len()];
            let mut batch_nll = 0.0;
            for r in results {
                let r = r?;
                batch_nll += r.nll;
                nf += r.nfe_forward;
                na += r.nfe_adjoint;
                for (g, v) in grad.iter_mut().zip(&r.grads) {
                    *g += v;
                }
            }
            if !batch_nll.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_good: Box::new(params),
                });
            }
            nll_sum += batch_nll;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params, &grad, &mut state, &config.adam)?;
        }
        let count = data.len() as f64;
        history.push(NllRecord {
            epoch,
            mean_nll_nats: nll_sum / count,
            nfe_forward: nf as f64 / count,
            nfe_adjoint: na as f64 / count,
        });
    }
    Ok((params, history))
}
