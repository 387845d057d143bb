use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{integrate, FnDynamics, OdeProblem, SolverConfig};

/// Characteristics of `u_t + u·u_x = 0` with `u(x, 0) = f(x)`.
pub struct BurgersDemo<F> {
    pub f: F,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Polyline vertices per characteristic, including both ends.
    pub samples: usize,
}

/// One characteristic `x(s) = f(x0)·s + x0, t(s) = s`, carrying `u = f(x0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Characteristic {
    pub x0: f64,
    pub u: f64,
    /// `(t, x)` vertices.
    pub points: Vec<(f64, f64)>,
}

/// The first time two characteristics meet, with their indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub i: usize,
    pub j: usize,
    pub s: f64,
}

/// Integrates `dx/ds = u, du/ds = 0, dt/ds = 1` from every `x0` and checks
/// each vertex against the closed-form line.
pub fn burgers_characteristics<F: Fn(f64) -> f64>(
    demo: &BurgersDemo<F>,
    solver: &SolverConfig,
) -> Result<Vec<Characteristic>> {
    if demo.samples < 2 || !(demo.horizon > 0.0) {
        return Err(Error::Contract(
            "burgers demo needs a positive horizon and at least two samples".into(),
        ));
    }
    let system = FnDynamics::new(3, |_s, y: &[f64], dy: &mut [f64]| {
        dy[0] = y[1];
        dy[1] = 0.0;
        dy[2] = 1.0;
    });
    let ds = demo.horizon / (demo.samples - 1) as f64;
    demo.x0
        .iter()
        .map(|&x0| {
            let u = (demo.f)(x0);
            if !u.is_finite() {
                return Err(Error::Contract(format!("initial profile is not finite at x0 = {x0}")));
            }
            let mut y = vec![x0, u, 0.0];
            let mut points = vec![(0.0, x0)];
            for i in 1..demo.samples {
                let span = ((i - 1) as f64 * ds, i as f64 * ds);
                y = integrate(&OdeProblem::new(&system, span, y), solver)?.0;
                let exact = u * span.1 + x0;
                if (y[0] - exact).abs() > 1e-10 * (1.0 + exact.abs()) {
                    return Err(Error::Contract(format!(
                        "characteristic from {x0} left its line: {} vs {exact}",
                        y[0]
                    )));
                }
                points.push((y[2], y[0]));
            }
            Ok(Characteristic { x0, u, points })
        })
        .collect()
}

/// Earliest positive `s` at which two characteristics share a position.
pub fn first_crossing(chars: &[Characteristic]) -> Option<Crossing> {
    let mut best: Option<Crossing> = None;
    for i in 0..chars.len() {
        for j in i + 1..chars.len() {
            let du = chars[i].u - chars[j].u;
            if du == 0.0 {
                continue;
            }
            let s = (chars[j].x0 - chars[i].x0) / du;
            if s > 0.0 && best.is_none_or(|b| s < b.s) {
                best = Some(Crossing { i, j, s });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..11).map(|i| i as f64 / 10.0).collect()
    }

    fn run<F: Fn(f64) -> f64>(f: F) -> Vec<Characteristic> {
        let demo = BurgersDemo {
            f,
            x0: grid(),
            horizon: 2.0,
            samples: 9,
        };
        burgers_characteristics(&demo, &SolverConfig::dopri5(1e-10, 1e-12)).unwrap()
    }

    #[test]
    fn zero_profile_gives_vertical_lines() {
        for c in run(|_| 0.0) {
            assert!(c.points.iter().all(|&(_, x)| x == c.x0));
        }
        assert!(first_crossing(&run(|_| 0.0)).is_none());
    }

    #[test]
    fn identity_profile_reaches_two() {
        let chars = run(|x| x);
        let c = chars.iter().find(|c| c.x0 == 1.0).unwrap();
        let (t, x) = c.points[4];
        assert!((t - 1.0).abs() < 1e-12);
        assert!((x - 2.0).abs() < 1e-10);
        assert!(first_crossing(&chars).is_none());
    }

    #[test]
    fn decreasing_profile_crosses_at_one() {
        let c = first_crossing(&run(|x| 1.0 - x)).unwrap();
        assert!((c.s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn crossing_precedes_gradient_bound() {
        let f = |x: f64| (-3.0 * x).exp();
        let c = first_crossing(&run(f)).unwrap();
        // min f' on [0, 1] is −3, so crossing happens at or after 1/3 and
        // before the first pair's secant time.
        assert!(c.s >= 1.0 / 3.0 - 1e-12 && c.s < 1.0);
    }

    #[test]
    fn rejects_non_finite_profile() {
        let demo = BurgersDemo {
            f: |x: f64| 1.0 / (x - 0.5),
            x0: vec![0.5],
            horizon: 1.0,
            samples: 3,
        };
        assert!(burgers_characteristics(&demo, &SolverConfig::rk4(0.1)).is_err());
    }
}
