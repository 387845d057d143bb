use super::{Dynamics, Method, OdeProblem, SolveStats, SolverConfig};
use crate::error::{Error, Result};

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Difference between the 5th- and 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// Integrates `problem` to `s1` and returns the terminal state.
pub fn integrate<D: Dynamics>(
    problem: &OdeProblem<D>,
    config: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    integrate_with(problem, config, |_, _| {})
}

/// As [`integrate`], calling `observe(s, y)` at `s0` and after every accepted step.
pub fn integrate_with<D: Dynamics>(
    problem: &OdeProblem<D>,
    config: &SolverConfig,
    mut observe: impl FnMut(f64, &[f64]),
) -> Result<(Vec<f64>, SolveStats)> {
    config.validate()?;
    problem.validate()?;
    observe(problem.s_span.0, &problem.y0);
    match config.method {
        Method::Euler => fixed_step(problem, config, euler_step, 1, &mut observe),
        Method::Rk4 => fixed_step(problem, config, rk4_step, 4, &mut observe),
        Method::Dopri5 => dopri5(problem, config, &mut observe),
    }
}

fn check_finite(k: &[f64], s: f64) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Instability { s })
    }
}

type Stepper<D> = fn(&D, f64, f64, &mut [f64], &mut Work) -> Result<()>;

struct Work {
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
}

impl Work {
    fn new(dim: usize, stages: usize) -> Self {
        Self {
            k: vec![vec![0.0; dim]; stages],
            tmp: vec![0.0; dim],
        }
    }

    fn floats(&self) -> usize {
        self.k.iter().map(Vec::len).sum::<usize>() + self.tmp.len()
    }
}

fn euler_step<D: Dynamics>(f: &D, s: f64, h: f64, y: &mut [f64], w: &mut Work) -> Result<()> {
    f.eval(s, y, &mut w.k[0]);
    check_finite(&w.k[0], s)?;
    for (yi, ki) in y.iter_mut().zip(&w.k[0]) {
        *yi += h * ki;
    }
    Ok(())
}

fn rk4_step<D: Dynamics>(f: &D, s: f64, h: f64, y: &mut [f64], w: &mut Work) -> Result<()> {
    let n = y.len();
    let (k, tmp) = (&mut w.k, &mut w.tmp);
    f.eval(s, y, &mut k[0]);
    check_finite(&k[0], s)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k[0][i];
    }
    f.eval(s + 0.5 * h, tmp, &mut k[1]);
    check_finite(&k[1], s + 0.5 * h)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k[1][i];
    }
    f.eval(s + 0.5 * h, tmp, &mut k[2]);
    check_finite(&k[2], s + 0.5 * h)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k[2][i];
    }
    f.eval(s + h, tmp, &mut k[3]);
    check_finite(&k[3], s + h)?;
    for i in 0..n {
        y[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
    Ok(())
}

fn fixed_step<D: Dynamics>(
    problem: &OdeProblem<D>,
    config: &SolverConfig,
    step: Stepper<D>,
    stages: usize,
    observe: &mut impl FnMut(f64, &[f64]),
) -> Result<(Vec<f64>, SolveStats)> {
    let (s0, s1) = problem.s_span;
    let n = config.fixed_steps(s1 - s0);
    let mut stats = SolveStats::default();
    if n > config.max_steps {
        return Err(Error::NonConvergence {
            max_steps: config.max_steps,
            stats,
        });
    }
    let h = (s1 - s0) / n as f64;
    let mut y = problem.y0.clone();
    let mut w = Work::new(y.len(), stages);
    stats.peak_floats = w.floats() + y.len();
    for i in 0..n {
        let s = s0 + i as f64 * h;
        step(&problem.dynamics, s, h, &mut y, &mut w)?;
        stats.nfe += stages;
        stats.steps_accepted += 1;
        let s_next = if i + 1 == n {
            s1
        } else {
            s0 + (i + 1) as f64 * h
        };
        observe(s_next, &y);
    }
    Ok((y, stats))
}

fn rms_norm(err: &[f64], y: &[f64], y_new: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

/// Hairer–Nørsett–Wanner starting step; costs one extra evaluation.
fn initial_step<D: Dynamics>(
    f: &D,
    s0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    config: &SolverConfig,
    tmp: &mut [f64],
    f1: &mut [f64],
) -> Result<f64> {
    let n = y0.len() as f64;
    let sc = |y: f64| config.atol + config.rtol * y.abs();
    let d0 = (y0.iter().map(|y| (y / sc(*y)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (y0
        .iter()
        .zip(f0)
        .map(|(y, fv)| (fv / sc(*y)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(span);
    for i in 0..y0.len() {
        tmp[i] = y0[i] + dir * h0 * f0[i];
    }
    f.eval(s0 + dir * h0, tmp, f1);
    check_finite(f1, s0 + dir * h0)?;
    let d2 = (y0
        .iter()
        .zip(f0.iter().zip(f1.iter()))
        .map(|(y, (a, b))| ((b - a) / sc(*y)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri5<D: Dynamics>(
    problem: &OdeProblem<D>,
    config: &SolverConfig,
    observe: &mut impl FnMut(f64, &[f64]),
) -> Result<(Vec<f64>, SolveStats)> {
    let f = &problem.dynamics;
    let (s0, s1) = problem.s_span;
    let dir = (s1 - s0).signum();
    let span = (s1 - s0).abs();
    let dim = problem.y0.len();

    let mut y = problem.y0.clone();
    let mut y_new = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut w = Work::new(dim, 7);
    let mut stats = SolveStats {
        peak_floats: w.floats() + 3 * dim,
        ..SolveStats::default()
    };

    f.eval(s0, &y, &mut w.k[0]);
    stats.nfe += 1;
    check_finite(&w.k[0], s0)?;
    let (k0, rest) = w.k.split_at_mut(1);
    let mut h = initial_step(
        f,
        s0,
        &y,
        &k0[0],
        dir,
        span,
        config,
        &mut w.tmp,
        &mut rest[0],
    )?;
    stats.nfe += 1;

    let mut s = s0;
    let mut last_rejected = false;
    loop {
        let remaining = (s1 - s) * dir;
        if remaining <= 0.0 {
            break;
        }
        if stats.steps_accepted + stats.steps_rejected >= config.max_steps {
            return Err(Error::NonConvergence {
                max_steps: config.max_steps,
                stats,
            });
        }
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        let hs = dir * h;

        for stage in 1..7 {
            for i in 0..dim {
                let mut acc = y[i];
                for j in 0..stage {
                    acc += hs * A[stage][j] * w.k[j][i];
                }
                w.tmp[i] = acc;
            }
            let st = s + C[stage] * hs;
            f.eval(st, &w.tmp, &mut w.k[stage]);
            check_finite(&w.k[stage], st)?;
        }
        stats.nfe += 6;
        // Stage 7 is evaluated at the 5th-order solution, so tmp holds y_new.
        y_new.copy_from_slice(&w.tmp);
        for i in 0..dim {
            err[i] = hs * (0..7).map(|j| E[j] * w.k[j][i]).sum::<f64>();
        }
        let norm = rms_norm(&err, &y, &y_new, config.rtol, config.atol);
        let mut fac = if norm == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * norm.powf(-1.0 / 5.0)).clamp(FAC_MIN, FAC_MAX)
        };
        if norm <= 1.0 {
            stats.steps_accepted += 1;
            s = if last { s1 } else { s + hs };
            std::mem::swap(&mut y, &mut y_new);
            // FSAL: the last stage is the first stage of the next step.
            w.k.swap(0, 6);
            observe(s, &y);
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            if last {
                break;
            }
        } else {
            stats.steps_rejected += 1;
            last_rejected = true;
        }
        h *= fac;
    }
    Ok((y, stats))
}
