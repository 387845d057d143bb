use super::{integrate, DiffDynamics, Dynamics, OdeProblem, SolveStats, SolverConfig};
use crate::error::{check_len, Error, Result};

/// Gradients of a scalar loss with respect to parameters and initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub grad_params: Vec<f64>,
    pub grad_y0: Vec<f64>,
    pub stats: SolveStats,
}

/// A point where the loss reads the forward trajectory.
#[derive(Debug, Clone)]
pub struct Observation {
    pub s: f64,
    /// Forward state `y(s)`.
    pub y: Vec<f64>,
    /// `∂L/∂y(s)`.
    pub grad: Vec<f64>,
}

/// Backward system over `[y, a, g]`:
/// `dy/ds = f`, `da/ds = −aᵀ ∂f/∂y`, `dg/ds = −aᵀ ∂f/∂θ`.
struct AdjointSystem<'a, D> {
    f: &'a D,
    n: usize,
    p: usize,
}

impl<D: DiffDynamics> Dynamics for AdjointSystem<'_, D> {
    fn dim(&self) -> usize {
        2 * self.n + self.p
    }

    fn eval(&self, s: f64, state: &[f64], out: &mut [f64]) {
        let (y, rest) = state.split_at(self.n);
        let a = &rest[..self.n];
        let (dy, rest) = out.split_at_mut(self.n);
        let (da, dg) = rest.split_at_mut(self.n);
        self.f.vjp(s, y, a, dy, da, dg);
        da.iter_mut().for_each(|v| *v = -*v);
        dg.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Adjoint sensitivities for a loss on the terminal state `y(s1)`.
///
/// `y_final` is the forward solution at `s_span.1`; the state is recovered
/// by integrating it backward jointly with the adjoint, so memory does not
/// grow with the number of steps.
pub fn integrate_adjoint<D: DiffDynamics>(
    dynamics: &D,
    y_final: &[f64],
    s_span: (f64, f64),
    config: &SolverConfig,
    loss_grad: &[f64],
) -> Result<Sensitivity> {
    integrate_adjoint_observed(
        dynamics,
        s_span.0,
        &[Observation {
            s: s_span.1,
            y: y_final.to_vec(),
            grad: loss_grad.to_vec(),
        }],
        config,
    )
}

/// Adjoint sensitivities for a loss reading the trajectory at several
/// points, ordered from `s0` outward. Between observations the adjoint is
/// integrated backward; at each observation its loss gradient is added and
/// the state is reset to the recorded forward value.
pub fn integrate_adjoint_observed<D: DiffDynamics>(
    dynamics: &D,
    s0: f64,
    observations: &[Observation],
    config: &SolverConfig,
) -> Result<Sensitivity> {
    let n = dynamics.dim();
    let p = dynamics.num_params();
    let last = observations
        .last()
        .ok_or_else(|| Error::Contract("adjoint needs at least one observation".into()))?;
    for o in observations {
        check_len("adjoint observed state", n, o.y.len())?;
        check_len("adjoint loss gradient", n, o.grad.len())?;
    }
    let dir = (last.s - s0).signum();
    if observations
        .windows(2)
        .any(|w| (w[1].s - w[0].s) * dir < 0.0)
        || (observations[0].s - s0) * dir < 0.0
    {
        return Err(Error::Contract(
            "observations must be ordered away from s0".into(),
        ));
    }

    let system = AdjointSystem { f: dynamics, n, p };
    let mut state = vec![0.0; 2 * n + p];
    state[..n].copy_from_slice(&last.y);
    state[n..2 * n].copy_from_slice(&last.grad);
    let mut stats = SolveStats::default();
    let mut s = last.s;

    let mut targets: Vec<(f64, Option<&Observation>)> = observations[..observations.len() - 1]
        .iter()
        .rev()
        .map(|o| (o.s, Some(o)))
        .collect();
    targets.push((s0, None));

    for (target, obs) in targets {
        if target != s {
            let (next, st) = integrate(
                &OdeProblem::new(&system, (s, target), state.clone()),
                config,
            )
            .map_err(|e| e.context("adjoint backward solve"))?;
            stats.merge(&st);
            state = next;
            s = target;
        }
        if let Some(o) = obs {
            state[..n].copy_from_slice(&o.y);
            for (a, g) in state[n..2 * n].iter_mut().zip(&o.grad) {
                *a += g;
            }
        }
    }
    stats.peak_floats = stats.peak_floats.max(state.len());

    Ok(Sensitivity {
        grad_y0: state[n..2 * n].to_vec(),
        grad_params: state[2 * n..].to_vec(),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dy/ds = θ · y (scalar).
    struct Linear {
        theta: f64,
    }

    impl Dynamics for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _s: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = self.theta * y[0];
        }
    }

    impl DiffDynamics for Linear {
        fn num_params(&self) -> usize {
            1
        }
        fn vjp(
            &self,
            _: f64,
            y: &[f64],
            cot: &[f64],
            dy: &mut [f64],
            gy: &mut [f64],
            gp: &mut [f64],
        ) {
            dy[0] = self.theta * y[0];
            gy[0] = cot[0] * self.theta;
            gp[0] = cot[0] * y[0];
        }
    }

    #[test]
    fn scalar_growth_gradient_closed_form() {
        for theta in [0.0, 0.7, -1.3] {
            let f = Linear { theta };
            let cfg = SolverConfig::dopri5(1e-10, 1e-12);
            let (y1, _) = integrate(&OdeProblem::new(&f, (0.0, 1.0), vec![1.0]), &cfg).unwrap();
            let sens = integrate_adjoint(&f, &y1, (0.0, 1.0), &cfg, &[1.0]).unwrap();
            assert!(
                (sens.grad_params[0] - theta.exp()).abs() < 1e-5,
                "θ={theta}"
            );
            assert!((sens.grad_y0[0] - theta.exp()).abs() < 1e-5);
        }
    }

    #[test]
    fn observed_loss_sums_contributions() {
        // L = y(0.5) + y(1) with y = e^{θ s}: dL/dθ = 0.5 e^{θ/2} + e^θ.
        let theta = 0.4;
        let f = Linear { theta };
        let cfg = SolverConfig::dopri5(1e-10, 1e-12);
        let obs: Vec<Observation> = [0.5, 1.0]
            .iter()
            .map(|&s| Observation {
                s,
                y: vec![(theta * s).exp()],
                grad: vec![1.0],
            })
            .collect();
        let sens = integrate_adjoint_observed(&f, 0.0, &obs, &cfg).unwrap();
        let expect = 0.5 * (theta / 2.0).exp() + theta.exp();
        assert!((sens.grad_params[0] - expect).abs() < 1e-7);
    }

    #[test]
    fn misordered_observations_rejected() {
        let f = Linear { theta: 1.0 };
        let obs = vec![
            Observation {
                s: 1.0,
                y: vec![1.0],
                grad: vec![1.0],
            },
            Observation {
                s: 0.5,
                y: vec![1.0],
                grad: vec![1.0],
            },
        ];
        assert!(integrate_adjoint_observed(&f, 0.0, &obs, &SolverConfig::default()).is_err());
    }
}
