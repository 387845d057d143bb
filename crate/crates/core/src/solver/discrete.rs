use super::{DiffDynamics, Method, SolveStats, SolverConfig};
use crate::diffcore::axpy;
use crate::error::{check_len, Error, Result};

/// Exact gradients of the discrete fixed-step solution map.
///
/// Every step's starting state is stored on the forward pass; the backward
/// pass replays each step's stages and chains their vector–Jacobian
/// products in reverse. Returns the terminal state with the sensitivities.
pub fn backprop_through_solver<D: DiffDynamics>(
    dynamics: &D,
    y0: &[f64],
    s_span: (f64, f64),
    config: &SolverConfig,
    loss_grad: &[f64],
) -> Result<(Vec<f64>, super::Sensitivity)> {
    config.validate()?;
    if !config.method.is_fixed_step() {
        return Err(Error::UnsupportedMethod(format!(
            "{} (discrete backprop needs a fixed-step method)",
            config.method
        )));
    }
    let n = dynamics.dim();
    let p = dynamics.num_params();
    check_len("initial state", n, y0.len())?;
    check_len("loss gradient", n, loss_grad.len())?;
    let (s0, s1) = s_span;
    let steps = config.fixed_steps(s1 - s0);
    if steps > config.max_steps {
        return Err(Error::NonConvergence {
            max_steps: config.max_steps,
            stats: SolveStats::default(),
        });
    }
    let h = (s1 - s0) / steps as f64;
    let stages = match config.method {
        Method::Euler => 1,
        _ => 4,
    };
    let mut stats = SolveStats::default();
    let mut ws = Workspace::new(n, p);

    let mut trajectory = Vec::with_capacity((steps + 1) * n);
    trajectory.extend_from_slice(y0);
    let mut y = y0.to_vec();
    for i in 0..steps {
        let s = s0 + i as f64 * h;
        ws.forward_step(dynamics, config.method, s, h, &mut y)?;
        stats.nfe += stages;
        stats.steps_accepted += 1;
        trajectory.extend_from_slice(&y);
    }
    let y_final = y;

    let mut y_bar = loss_grad.to_vec();
    let mut p_bar = vec![0.0; p];
    for i in (0..steps).rev() {
        let s = s0 + i as f64 * h;
        let y_start = &trajectory[i * n..(i + 1) * n];
        ws.backward_step(
            dynamics,
            config.method,
            s,
            h,
            y_start,
            &mut y_bar,
            &mut p_bar,
        );
        stats.nfe += 2 * stages;
    }
    stats.peak_floats = trajectory.len() + ws.floats();

    Ok((
        y_final,
        super::Sensitivity {
            grad_params: p_bar,
            grad_y0: y_bar,
            stats,
        },
    ))
}

struct Workspace {
    k: [Vec<f64>; 4],
    inputs: [Vec<f64>; 4],
    k_bar: [Vec<f64>; 4],
    gy: Vec<f64>,
    gp: Vec<f64>,
    scratch: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, p: usize) -> Self {
        let v = || vec![0.0; n];
        Self {
            k: [v(), v(), v(), v()],
            inputs: [v(), v(), v(), v()],
            k_bar: [v(), v(), v(), v()],
            gy: v(),
            gp: vec![0.0; p],
            scratch: v(),
        }
    }

    fn floats(&self) -> usize {
        let n = self.gy.len();
        13 * n + self.gp.len() + n
    }

    /// Evaluates the stages from `y` and records their inputs.
    fn stages<D: DiffDynamics>(&mut self, f: &D, method: Method, s: f64, h: f64, y: &[f64]) {
        self.inputs[0].copy_from_slice(y);
        f.eval(s, y, &mut self.k[0]);
        if method == Method::Euler {
            return;
        }
        let offsets = [(0.5, 0), (0.5, 1), (1.0, 2)];
        for (stage, &(c, prev)) in offsets.iter().enumerate() {
            let st = stage + 1;
            for j in 0..y.len() {
                self.inputs[st][j] = y[j] + c * h * self.k[prev][j];
            }
            let (inp, k) = (&self.inputs[st], &mut self.k[st]);
            f.eval(s + c * h, inp, k);
        }
    }

    fn forward_step<D: DiffDynamics>(
        &mut self,
        f: &D,
        method: Method,
        s: f64,
        h: f64,
        y: &mut [f64],
    ) -> Result<()> {
        self.stages(f, method, s, h, y);
        let used = if method == Method::Euler { 1 } else { 4 };
        if self.k[..used]
            .iter()
            .any(|k| k.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Instability { s });
        }
        if method == Method::Euler {
            axpy(h, &self.k[0], y);
        } else {
            for j in 0..y.len() {
                y[j] += h / 6.0
                    * (self.k[0][j] + 2.0 * self.k[1][j] + 2.0 * self.k[2][j] + self.k[3][j]);
            }
        }
        Ok(())
    }

    /// Pulls `y_bar` (cotangent of the step's output) back to the step's input,
    /// accumulating parameter cotangents into `p_bar`.
    #[allow(clippy::too_many_arguments)]
    fn backward_step<D: DiffDynamics>(
        &mut self,
        f: &D,
        method: Method,
        s: f64,
        h: f64,
        y_start: &[f64],
        y_bar: &mut [f64],
        p_bar: &mut [f64],
    ) {
        self.stages(f, method, s, h, y_start);
        if method == Method::Euler {
            f.vjp(
                s,
                y_start,
                y_bar,
                &mut self.scratch,
                &mut self.gy,
                &mut self.gp,
            );
            axpy(h, &self.gy, y_bar);
            axpy(h, &self.gp, p_bar);
            return;
        }
        let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        for (kb, w) in self.k_bar.iter_mut().zip(weights) {
            kb.iter_mut()
                .zip(y_bar.iter())
                .for_each(|(a, b)| *a = w * b);
        }
        // Stage i's input is y + c_i h k_{i-1}; walk the stages in reverse.
        let stage_s = [s, s + 0.5 * h, s + 0.5 * h, s + h];
        let coef = [0.0, 0.5 * h, 0.5 * h, h];
        for st in (0..4).rev() {
            f.vjp(
                stage_s[st],
                &self.inputs[st],
                &self.k_bar[st],
                &mut self.scratch,
                &mut self.gy,
                &mut self.gp,
            );
            axpy(1.0, &self.gp, p_bar);
            axpy(1.0, &self.gy, y_bar);
            if st > 0 {
                let (lo, hi) = self.k_bar.split_at_mut(st);
                let _ = hi;
                axpy(coef[st], &self.gy, &mut lo[st - 1]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{Dynamics, OdeProblem};

    /// dy/ds = A y with A = θ as a 2x2 matrix.
    struct MatrixField {
        a: [f64; 4],
    }

    impl Dynamics for MatrixField {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = self.a[0] * y[0] + self.a[1] * y[1];
            dy[1] = self.a[2] * y[0] + self.a[3] * y[1];
        }
    }

    impl DiffDynamics for MatrixField {
        fn num_params(&self) -> usize {
            4
        }
        fn vjp(
            &self,
            s: f64,
            y: &[f64],
            c: &[f64],
            dy: &mut [f64],
            gy: &mut [f64],
            gp: &mut [f64],
        ) {
            self.eval(s, y, dy);
            gy[0] = c[0] * self.a[0] + c[1] * self.a[2];
            gy[1] = c[0] * self.a[1] + c[1] * self.a[3];
            gp.copy_from_slice(&[c[0] * y[0], c[0] * y[1], c[1] * y[0], c[1] * y[1]]);
        }
    }

    #[test]
    fn rejects_adaptive_method() {
        let f = MatrixField { a: [0.0; 4] };
        let err = backprop_through_solver(
            &f,
            &[1.0, 1.0],
            (0.0, 1.0),
            &SolverConfig::default(),
            &[1.0, 0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedMethod(_)));
    }

    #[test]
    fn zero_loss_grad_gives_zero() {
        let f = MatrixField {
            a: [0.3, -1.0, 0.5, 0.1],
        };
        let (_, sens) = backprop_through_solver(
            &f,
            &[1.0, 2.0],
            (0.0, 1.0),
            &SolverConfig::rk4(0.1),
            &[0.0, 0.0],
        )
        .unwrap();
        assert!(sens
            .grad_params
            .iter()
            .chain(&sens.grad_y0)
            .all(|&g| g == 0.0));
    }

    #[test]
    fn one_euler_step_chain_rule() {
        // y1 = y0 + h A y0, L = c · y1 → ∂L/∂A_ij = h c_i y0_j, ∂L/∂y0 = (I + hA)ᵀ c
        let a = [0.3, -1.0, 0.5, 0.1];
        let f = MatrixField { a };
        let (y0, c, h) = ([1.0, 2.0], [0.7, -0.4], 0.5);
        let (y1, sens) =
            backprop_through_solver(&f, &y0, (0.0, h), &SolverConfig::euler(h), &c).unwrap();
        assert!((y1[0] - (1.0 + h * (0.3 - 2.0))).abs() < 1e-15);
        let gp = [
            h * c[0] * y0[0],
            h * c[0] * y0[1],
            h * c[1] * y0[0],
            h * c[1] * y0[1],
        ];
        for (g, e) in sens.grad_params.iter().zip(gp) {
            assert!((g - e).abs() < 1e-15);
        }
        let gy0 = [
            c[0] + h * (a[0] * c[0] + a[2] * c[1]),
            c[1] + h * (a[1] * c[0] + a[3] * c[1]),
        ];
        for (g, e) in sens.grad_y0.iter().zip(gy0) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn rk4_discrete_gradient_matches_finite_differences() {
        let a = [0.3, -1.0, 0.5, 0.1];
        let y0 = [1.0, 2.0];
        let c = [0.7, -0.4];
        let cfg = SolverConfig::rk4(0.25);
        let loss = |a: [f64; 4]| {
            let f = MatrixField { a };
            let (y, _) =
                crate::solver::integrate(&OdeProblem::new(&f, (0.0, 1.0), y0.to_vec()), &cfg)
                    .unwrap();
            c[0] * y[0] + c[1] * y[1]
        };
        let (_, sens) =
            backprop_through_solver(&MatrixField { a }, &y0, (0.0, 1.0), &cfg, &c).unwrap();
        for i in 0..4 {
            let (mut ap, mut am) = (a, a);
            ap[i] += 1e-6;
            am[i] -= 1e-6;
            let fd = (loss(ap) - loss(am)) / 2e-6;
            assert!(
                (fd - sens.grad_params[i]).abs() < 1e-8,
                "{i}: {fd} vs {}",
                sens.grad_params[i]
            );
        }
    }
}
