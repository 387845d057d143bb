use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pde::{analytic_u, percent_deviation, simpson, PdePoint};
use crate::cnode::{BalanceMode, CharacteristicField, DirectionInputs, FieldDynamics};
use crate::diffcore::{adam_step, AdamConfig, AdamState, MlpSpec, ParamVector, Tape};
use crate::error::{Error, Result};
use crate::solver::{integrate, integrate_adjoint_observed, Observation, OdeProblem, SolveStats, SolverConfig};

/// A noisy reading `(t, ũ)` with `x` withheld.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: f64,
    pub u: f64,
}

/// Noiseless test points with `t ∈ [start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
    pub points: Vec<PdePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesTask {
    /// Training readings, sorted by `t`.
    pub train: Vec<SeriesPoint>,
    pub windows: Vec<Window>,
    /// `u(1, 0)`, the one value the models receive besides `t`.
    pub anchor: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Training readings `u(x, t) + σ·ε` on `[1, 2] × [0, 1]` and test windows
/// `[n, n + 1]` for `n < n_windows`.
pub fn gen_timeseries(
    n_train: usize,
    n_test: usize,
    n_windows: usize,
    sigma: f64,
    seed: u64,
) -> TimeSeriesTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<SeriesPoint> = (0..n_train)
        .map(|_| {
            let x = rng.random_range(1.0..=2.0);
            let t = rng.random_range(0.0..=1.0);
            let eps: f64 = rng.sample(StandardNormal);
            SeriesPoint {
                t,
                u: analytic_u(x, t) + sigma * eps,
            }
        })
        .collect();
    train.sort_by(|a, b| a.t.total_cmp(&b.t));
    let windows = (0..n_windows)
        .map(|n| {
            let start = n as f64;
            let points = (0..n_test)
                .map(|_| {
                    let x = rng.random_range(1.0..=2.0);
                    let t = rng.random_range(start..=start + 1.0);
                    PdePoint {
                        x,
                        t,
                        u: analytic_u(x, t),
                    }
                })
                .collect();
            Window {
                start,
                end: start + 1.0,
                points,
            }
        })
        .collect();
    TimeSeriesTask {
        train,
        windows,
        anchor: analytic_u(1.0, 0.0),
        sigma,
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesModelKind {
    /// `u(t) = u(1,0) + ∫₀ᵗ nn(τ, u(1,0)) dτ`.
    Node,
    /// `u` carried along an 8-dimensional characteristic from `u(1,0)`.
    Cnode,
}

impl std::str::FromStr for SeriesModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Self::Node),
            "cnode" => Ok(Self::Cnode),
            other => Err(Error::Contract(format!("unknown model kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SeriesModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Node => "node",
            Self::Cnode => "cnode",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Characteristic dimension of the C-NODE.
    pub k: usize,
    pub cnode_hidden: usize,
    pub node_hidden: usize,
    pub solver: SolverConfig,
    /// Simpson panels per unit time for the NODE integral.
    pub quad_per_unit: usize,
    pub seed: u64,
}

impl Default for TimeSeriesConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            k: 8,
            cnode_hidden: 16,
            node_hidden: 28,
            solver: SolverConfig::rk4(0.05),
            quad_per_unit: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesReport {
    pub kind: SeriesModelKind,
    pub param_count: usize,
    pub params: Vec<f64>,
    /// Training mse per epoch.
    pub history: Vec<f64>,
    /// `(start, end, deviation %)` per test window.
    pub windows: Vec<(f64, f64, f64)>,
    pub stats: SolveStats,
}

enum SeriesModel {
    Node(MlpSpec),
    Cnode(CharacteristicField),
}

impl SeriesModel {
    fn new(kind: SeriesModelKind, cfg: &TimeSeriesConfig) -> Self {
        match kind {
            SeriesModelKind::Node => {
                let h = cfg.node_hidden;
                SeriesModel::Node(MlpSpec::tanh(vec![2, h, h, 1]))
            }
            SeriesModelKind::Cnode => {
                let h = cfg.cnode_hidden;
                let inputs = DirectionInputs {
                    x: false,
                    u: true,
                    cond: true,
                };
                SeriesModel::Cnode(
                    CharacteristicField::new(cfg.k, 1, &[h, h], &[h, h], BalanceMode::UOnly)
                        .with_direction(MlpSpec::tanh(vec![2, h, h, cfg.k]), inputs),
                )
            }
        }
    }

    fn init(&self, seed: u64) -> Vec<f64> {
        match self {
            SeriesModel::Node(net) => net.init_params(seed),
            SeriesModel::Cnode(field) => field.init_params(seed),
        }
    }

    fn node_value(net: &MlpSpec, tape: &mut Tape, p: crate::diffcore::Var, anchor: f64, t: f64, per_unit: usize) -> Result<crate::diffcore::Var> {
        let steps = ((t * per_unit as f64).ceil() as usize).max(1);
        let integral = simpson(tape, t, steps, |tape, s| {
            let input = tape.constant(&[s, anchor]);
            net.record(tape, p, 0, input)
        })?;
        let base = tape.constant(&[anchor]);
        Ok(match integral {
            Some(i) => tape.add(base, i),
            None => base,
        })
    }

    /// Predictions at ascending times `ts`.
    fn predict(&self, theta: &[f64], anchor: f64, ts: &[f64], cfg: &TimeSeriesConfig, stats: &mut SolveStats) -> Result<Vec<f64>> {
        match self {
            SeriesModel::Node(net) => ts
                .iter()
                .map(|&t| {
                    let mut tape = Tape::new();
                    let p = tape.constant(theta);
                    let v = Self::node_value(net, &mut tape, p, anchor, t, cfg.quad_per_unit)?;
                    Ok(tape.scalar(v))
                })
                .collect(),
            SeriesModel::Cnode(field) => {
                let states = cnode_states(field, theta, anchor, ts, &cfg.solver, stats)?;
                Ok(states.iter().map(|y| y[field.k]).collect())
            }
        }
    }

    /// Training mse and its gradient.
    fn loss_grad(&self, theta: &[f64], task: &TimeSeriesTask, cfg: &TimeSeriesConfig, stats: &mut SolveStats) -> Result<(f64, Vec<f64>)> {
        let m = task.train.len() as f64;
        match self {
            SeriesModel::Node(net) => {
                let mut loss = 0.0;
                let mut grad = vec![0.0; theta.len()];
                for pt in &task.train {
                    let mut tape = Tape::new();
                    let p = tape.leaf(theta);
                    let v = Self::node_value(net, &mut tape, p, task.anchor, pt.t, cfg.quad_per_unit)?;
                    let r = tape.scalar(v) - pt.u;
                    loss += r * r / m;
                    tape.backward_with(v, &[2.0 * r / m])?;
                    for (g, d) in grad.iter_mut().zip(tape.grad(p)) {
                        *g += d;
                    }
                }
                Ok((loss, grad))
            }
            SeriesModel::Cnode(field) => {
                let ts: Vec<f64> = task.train.iter().map(|p| p.t).collect();
                let states = cnode_states(field, theta, task.anchor, &ts, &cfg.solver, stats)?;
                let k = field.k;
                let mut loss = 0.0;
                let observations: Vec<Observation> = task
                    .train
                    .iter()
                    .zip(states)
                    .map(|(pt, y)| {
                        let r = y[k] - pt.u;
                        loss += r * r / m;
                        let mut grad = vec![0.0; k + 1];
                        grad[k] = 2.0 * r / m;
                        Observation { s: pt.t, y, grad }
                    })
                    .collect();
                let dynamics = FieldDynamics::new(field, theta, &[task.anchor])?;
                let sens = integrate_adjoint_observed(&dynamics, 0.0, &observations, &cfg.solver)?;
                stats.merge(&sens.stats);
                Ok((loss, sens.grad_params[..theta.len()].to_vec()))
            }
        }
    }
}

/// Forward states `[x, u]` at ascending times, integrating from `s = 0`.
fn cnode_states(
    field: &CharacteristicField,
    theta: &[f64],
    anchor: f64,
    ts: &[f64],
    solver: &SolverConfig,
    stats: &mut SolveStats,
) -> Result<Vec<Vec<f64>>> {
    let dynamics = FieldDynamics::new(field, theta, &[anchor])?;
    let mut y = vec![0.0; field.k + 1];
    y[field.k] = anchor;
    let mut s = 0.0;
    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        if t > s {
            let (next, st) = integrate(&OdeProblem::new(&dynamics, (s, t), y), solver)?;
            stats.merge(&st);
            y = next;
            s = t;
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Trains the chosen model on the `[0, 1]` readings and reports the
/// deviation on every test window.
pub fn timeseries_eval(
    kind: SeriesModelKind,
    task: &TimeSeriesTask,
    cfg: &TimeSeriesConfig,
) -> Result<TimeSeriesReport> {
    if task.train.is_empty() {
        return Err(Error::Contract("time series task has no training data".into()));
    }
    cfg.solver.validate()?;
    let model = SeriesModel::new(kind, cfg);
    let init = model.init(cfg.seed);
    let mut params = ParamVector::from_parts(vec![("theta", init)])?;
    let mut state = AdamState::new(params.len());
    let mut stats = SolveStats::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = model.loss_grad(params.values(), task, cfg, &mut stats)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                last_good: Box::new(params),
            });
        }
        history.push(loss);
        adam_step(&mut params, &grad, &mut state, &cfg.adam)?;
    }
    let mut windows = Vec::with_capacity(task.windows.len());
    for w in &task.windows {
        let mut pts = w.points.clone();
        pts.sort_by(|a, b| a.t.total_cmp(&b.t));
        let ts: Vec<f64> = pts.iter().map(|p| p.t).collect();
        let pred = model.predict(params.values(), task.anchor, &ts, cfg, &mut stats)?;
        let truth: Vec<f64> = pts.iter().map(|p| p.u).collect();
        windows.push((w.start, w.end, percent_deviation(&pred, &truth)));
    }
    Ok(TimeSeriesReport {
        kind,
        param_count: params.len(),
        params: params.values().to_vec(),
        history,
        windows,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_is_seeded_and_sorted() {
        let a = gen_timeseries(100, 50, 6, 0.1, 3);
        assert_eq!(a, gen_timeseries(100, 50, 6, 0.1, 3));
        assert!(a.train.windows(2).all(|w| w[0].t <= w[1].t));
        assert_eq!(a.windows.len(), 6);
        for w in &a.windows {
            assert!(w.points.iter().all(|p| p.t >= w.start && p.t <= w.end));
        }
        assert!((a.anchor - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn noise_has_unit_scale() {
        let task = gen_timeseries(20_000, 0, 0, 0.1, 1);
        let clean = gen_timeseries(20_000, 0, 0, 0.0, 1);
        let d: Vec<f64> = task.train.iter().zip(&clean.train).map(|(a, b)| a.u - b.u).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * 0.1 / (d.len() as f64).sqrt());
        assert!((sd - 0.1).abs() < 0.003, "{sd}");
    }

    #[test]
    fn untrained_models_start_at_the_anchor() {
        let cfg = TimeSeriesConfig::default();
        let task = gen_timeseries(10, 5, 1, 0.1, 0);
        for kind in [SeriesModelKind::Node, SeriesModelKind::Cnode] {
            let model = SeriesModel::new(kind, &cfg);
            let theta = model.init(1);
            let mut stats = SolveStats::default();
            let p = model.predict(&theta, task.anchor, &[0.0], &cfg, &mut stats).unwrap();
            assert_eq!(p, vec![task.anchor]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = TimeSeriesConfig {
            cnode_hidden: 4,
            node_hidden: 4,
            ..TimeSeriesConfig::default()
        };
        let task = gen_timeseries(6, 0, 0, 0.1, 2);
        for kind in [SeriesModelKind::Node, SeriesModelKind::Cnode] {
            let model = SeriesModel::new(kind, &cfg);
            let theta = model.init(4);
            let mut stats = SolveStats::default();
            let (_, grad) = model.loss_grad(&theta, &task, &cfg, &mut stats).unwrap();
            for i in 0..theta.len() {
                let (mut a, mut b) = (theta.clone(), theta.clone());
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let la = model.loss_grad(&a, &task, &cfg, &mut stats).unwrap().0;
                let lb = model.loss_grad(&b, &task, &cfg, &mut stats).unwrap().0;
                let fd = (la - lb) / 2e-6;
                assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind} {i}: {fd} vs {}", grad[i]);
            }
        }
    }
}
