use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, AdamConfig, AdamState, MlpSpec, ParamVector, Tape, Var};
use crate::error::{Error, Result};

/// `u(x, t) = 2x·eᵗ / (2eᵗ + 1)`, the solution of `u·u_x + u_t = u`.
pub fn analytic_u(x: f64, t: f64) -> f64 {
    let e = t.exp();
    2.0 * x * e / (2.0 * e + 1.0)
}

/// Mean of `|pred − truth| / |truth|`, in percent.
pub fn percent_deviation(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs() / t.abs())
        .sum();
    100.0 * total / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdePoint {
    pub x: f64,
    pub t: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeRegressionTask {
    pub train: Vec<PdePoint>,
    pub test: Vec<PdePoint>,
    pub seed: u64,
}

impl PdeRegressionTask {
    pub fn write_csv(points: &[PdePoint], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform points on `[1, 2] × [0, 1]` labelled with [`analytic_u`].
pub fn gen_pde_dataset(n_train: usize, n_test: usize, seed: u64) -> PdeRegressionTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Vec<PdePoint> {
        (0..count)
            .map(|_| {
                let x = rng.random_range(1.0..=2.0);
                let t = rng.random_range(0.0..=1.0);
                PdePoint {
                    x,
                    t,
                    u: analytic_u(x, t),
                }
            })
            .collect()
    };
    let train = draw(n_train);
    let test = draw(n_test);
    PdeRegressionTask { train, test, seed }
}

/// Networks of the characteristic PDE regressor.
///
/// `nn1(x, t) ≈ ∂u/∂x`, `nn2(x, t) ≈ ∂u/∂t`, `nn3(c)` gives the
/// characteristic speeds for boundary value `c`, and `nn4(x)` is the
/// boundary profile `u(x, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeModel {
    pub nn1: MlpSpec,
    pub nn2: MlpSpec,
    pub nn3: MlpSpec,
    pub nn4: MlpSpec,
}

impl Default for PdeModel {
    /// Hidden width 12, two hidden layers: 809 parameters.
    fn default() -> Self {
        Self {
            nn1: MlpSpec::tanh(vec![2, 12, 12, 1]),
            nn2: MlpSpec::tanh(vec![2, 12, 12, 1]),
            nn3: MlpSpec::tanh(vec![1, 12, 12, 2]),
            nn4: MlpSpec::tanh(vec![1, 12, 12, 1]),
        }
    }
}

impl PdeModel {
    fn nets(&self) -> [(&'static str, &MlpSpec); 4] {
        [
            ("nn1", &self.nn1),
            ("nn2", &self.nn2),
            ("nn3", &self.nn3),
            ("nn4", &self.nn4),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|(_, n)| n.param_count()).sum()
    }

    /// Glorot initialisation with the output layer of `nn3` zeroed, so every
    /// characteristic starts vertical and the root iteration starts contractive.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let parts = self
            .nets()
            .iter()
            .enumerate()
            .map(|(i, (name, net))| (*name, net.init_params(seed.wrapping_add(i as u64))))
            .collect();
        let mut params = ParamVector::from_parts(parts).expect("distinct names");
        let widths = &self.nn3.layer_widths;
        let last = widths[widths.len() - 2] * widths[widths.len() - 1] + widths[widths.len() - 1];
        let seg = params.segment_mut("nn3").expect("nn3 segment");
        let n = seg.len();
        seg[n - last..].iter_mut().for_each(|v| *v = 0.0);
        params
    }

    fn offset(&self, params: &ParamVector, name: &str) -> Result<usize> {
        params
            .find(name)
            .map(|s| s.offset)
            .ok_or_else(|| Error::Contract(format!("missing parameter segment `{name}`")))
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        for (name, net) in self.nets() {
            crate::error::check_len(name, net.param_count(), params.segment(name)?.len())?;
        }
        Ok(())
    }

    /// `nn3(nn4(ι))[0]`, the `x`-speed of the characteristic through `ι`.
    fn x_speed(&self, params: &ParamVector, iota: f64) -> Result<f64> {
        let c = self.nn4.forward(params.segment("nn4")?, &[iota])?;
        Ok(self.nn3.forward(params.segment("nn3")?, &c)?[0])
    }

    /// Solves `ι = x − nn3(nn4(ι))[0]·t` by fixed-point iteration from `ι = x`.
    ///
    /// Returns the root and the number of updates taken, or `None` if the
    /// iteration did not settle within `max_iter` updates.
    pub fn solve_iota(
        &self,
        params: &ParamVector,
        x: f64,
        t: f64,
        tol: f64,
        max_iter: usize,
    ) -> Result<(Option<f64>, usize)> {
        let mut iota = x;
        for it in 1..=max_iter {
            let next = x - self.x_speed(params, iota)? * t;
            if !next.is_finite() {
                return Ok((None, it));
            }
            let done = (next - iota).abs() < tol;
            iota = next;
            if done {
                return Ok((Some(iota), it));
            }
        }
        Ok((None, max_iter))
    }

    /// Records `(prediction, x-speed)` for a point with root `iota`.
    fn record(
        &self,
        tape: &mut Tape,
        p: Var,
        params: &ParamVector,
        iota: Var,
        t: f64,
        steps: usize,
    ) -> Result<(Var, Var)> {
        let (o1, o2) = (self.offset(params, "nn1")?, self.offset(params, "nn2")?);
        let (o3, o4) = (self.offset(params, "nn3")?, self.offset(params, "nn4")?);
        let c = self.nn4.record(tape, p, o4, iota)?;
        let speeds = self.nn3.record(tape, p, o3, c)?;
        let vx = tape.slice(speeds, 0, 1);
        let vt = tape.slice(speeds, 1, 1);
        let delta = simpson(tape, t, steps, |tape, s| {
            let shift = tape.scale(vx, s);
            let xs = tape.add(iota, shift);
            let ts = tape.constant(&[s]);
            let input = tape.concat(&[xs, ts]);
            let ux = self.nn1.record(tape, p, o1, input)?;
            let ut = self.nn2.record(tape, p, o2, input)?;
            let a = tape.mul(ux, vx);
            let b = tape.mul(ut, vt);
            Ok(tape.add(a, b))
        })?;
        let pred = match delta {
            Some(d) => tape.add(d, c),
            None => c,
        };
        Ok((pred, vx))
    }

    /// Prediction at `(x, t)`, or `None` when the fixed point is not found.
    pub fn predict(&self, params: &ParamVector, x: f64, t: f64, cfg: &PdeFitConfig) -> Result<Option<f64>> {
        self.check(params)?;
        let (root, _) = self.solve_iota(params, x, t, cfg.fp_tol, cfg.fp_max_iter)?;
        let Some(root) = root else { return Ok(None) };
        let mut tape = Tape::new();
        let p = tape.constant(params.values());
        let iota = tape.constant(&[root]);
        let (pred, _) = self.record(&mut tape, p, params, iota, t, cfg.quad_steps)?;
        Ok(Some(tape.scalar(pred)))
    }

    /// Squared error and its parameter gradient; the dependence of `ι` on the
    /// parameters enters through implicit differentiation of the root equation.
    fn loss_grad(&self, params: &ParamVector, pt: &PdePoint, cfg: &PdeFitConfig) -> Result<Option<(f64, Vec<f64>, usize)>> {
        let (root, iters) = self.solve_iota(params, pt.x, pt.t, cfg.fp_tol, cfg.fp_max_iter)?;
        let Some(root) = root else { return Ok(None) };
        let mut tape = Tape::new();
        let p = tape.leaf(params.values());
        let iota = tape.leaf(&[root]);
        let (pred, vx) = self.record(&mut tape, p, params, iota, pt.t, cfg.quad_steps)?;
        let r = tape.scalar(pred) - pt.u;
        tape.backward_with(pred, &[2.0 * r])?;
        let mut grad = tape.grad(p).to_vec();
        let iota_bar = tape.grad(iota)[0];
        if iota_bar != 0.0 && pt.t != 0.0 {
            // F(ι, θ) = ι + vx(ι, θ)·t − x = 0.
            tape.backward(vx)?;
            let df_diota = 1.0 + pt.t * tape.grad(iota)[0];
            if df_diota.abs() < 1e-8 {
                return Ok(None);
            }
            let k = -iota_bar * pt.t / df_diota;
            for (g, d) in grad.iter_mut().zip(tape.grad(p)) {
                *g += k * d;
            }
        }
        Ok(Some((r * r, grad, iters)))
    }
}

/// Simpson's rule for `∫₀ᵗ f(s) ds` on `steps` panels, recorded on the tape.
/// This is what classical RK4 reduces to when the integrand ignores the state.
pub(super) fn simpson(
    tape: &mut Tape,
    t: f64,
    steps: usize,
    mut f: impl FnMut(&mut Tape, f64) -> Result<Var>,
) -> Result<Option<Var>> {
    if t == 0.0 {
        return Ok(None);
    }
    let h = t / steps as f64;
    let mut terms = Vec::with_capacity(2 * steps + 1);
    for j in 0..=2 * steps {
        let w = if j == 0 || j == 2 * steps {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let v = f(tape, 0.5 * h * j as f64)?;
        terms.push(tape.scale(v, w * h / 6.0));
    }
    let stacked = tape.concat(&terms);
    Ok(Some(tape.sum(stacked)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Simpson panels along each characteristic.
    pub quad_steps: usize,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub seed: u64,
}

impl Default for PdeFitConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 20,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            quad_steps: 4,
            fp_tol: 1e-8,
            fp_max_iter: 100,
            seed: 0,
        }
    }
}

/// Outcome of a PDE regression run.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeFit {
    pub params: ParamVector,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    pub test_deviation: f64,
    /// Samples skipped because the fixed point was not found, over all epochs.
    pub flagged: usize,
    pub max_fp_iterations: usize,
}

type SampleFn<'a> = dyn Fn(&ParamVector, &PdePoint) -> Result<Option<(f64, Vec<f64>, usize)>> + Sync + 'a;

fn fit_loop(
    mut params: ParamVector,
    data: &[PdePoint],
    cfg: &PdeFitConfig,
    per_sample: &SampleFn<'_>,
) -> Result<(ParamVector, Vec<f64>, usize, usize)> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Contract("fit needs data and a positive batch size".into()));
    }
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut flagged_total, mut max_iter) = (0, 0);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used, mut flagged) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let mut count = 0;
            for &i in batch {
                match per_sample(&params, &data[i])? {
                    Some((l, g, it)) => {
                        loss_sum += l;
                        count += 1;
                        max_iter = max_iter.max(it);
                        for (a, b) in grad.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => flagged += 1,
                }
            }
            if count == 0 {
                continue;
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_good: Box::new(params),
                });
            }
            used += count;
            grad.iter_mut().for_each(|g| *g /= count as f64);
            adam_step(&mut params, &grad, &mut state, &cfg.adam)?;
        }
        flagged_total += flagged;
        history.push(loss_sum / used.max(1) as f64);
    }
    let seen = cfg.epochs * data.len();
    if flagged_total * 20 > seen {
        return Err(Error::FixedPoint {
            flagged: flagged_total,
            total: seen,
        });
    }
    Ok((params, history, flagged_total, max_iter))
}

/// Trains the characteristic regressor by mean squared error and reports the
/// test deviation in percent.
pub fn pde_fit(task: &PdeRegressionTask, model: &PdeModel, cfg: &PdeFitConfig) -> Result<PdeFit> {
    let params = model.init_params(cfg.seed);
    model.check(&params)?;
    let per_sample = |p: &ParamVector, pt: &PdePoint| model.loss_grad(p, pt, cfg);
    let (params, history, flagged, max_fp_iterations) = fit_loop(params, &task.train, cfg, &per_sample)?;
    let mut pred = Vec::with_capacity(task.test.len());
    let mut truth = Vec::with_capacity(task.test.len());
    let mut missed = 0;
    for pt in &task.test {
        match model.predict(&params, pt.x, pt.t, cfg)? {
            Some(v) => {
                pred.push(v);
                truth.push(pt.u);
            }
            None => missed += 1,
        }
    }
    if missed * 20 > task.test.len() {
        return Err(Error::FixedPoint {
            flagged: missed,
            total: task.test.len(),
        });
    }
    Ok(PdeFit {
        params,
        history,
        test_deviation: percent_deviation(&pred, &truth),
        flagged: flagged + missed,
        max_fp_iterations,
    })
}

/// The time-only baseline `u(x, t) = ∫₀ᵗ nn(x, τ) dτ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePdeModel {
    pub nn: MlpSpec,
}

impl Default for NodePdeModel {
    /// Hidden width 32, two hidden layers: 1185 parameters.
    fn default() -> Self {
        Self {
            nn: MlpSpec::tanh(vec![2, 32, 32, 1]),
        }
    }
}

impl NodePdeModel {
    pub fn param_count(&self) -> usize {
        self.nn.param_count()
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::from_parts(vec![("nn1", self.nn.init_params(seed))]).expect("one segment")
    }

    fn record(&self, tape: &mut Tape, p: Var, x: f64, t: f64, steps: usize) -> Result<Var> {
        let integral = simpson(tape, t, steps, |tape, s| {
            let input = tape.constant(&[x, s]);
            self.nn.record(tape, p, 0, input)
        })?;
        Ok(integral.unwrap_or_else(|| tape.constant(&[0.0])))
    }

    pub fn predict(&self, params: &ParamVector, x: f64, t: f64, steps: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(params.segment("nn1")?);
        let out = self.record(&mut tape, p, x, t, steps)?;
        Ok(tape.scalar(out))
    }

    fn loss_grad(&self, params: &ParamVector, pt: &PdePoint, steps: usize) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = tape.leaf(params.segment("nn1")?);
        let out = self.record(&mut tape, p, pt.x, pt.t, steps)?;
        let r = tape.scalar(out) - pt.u;
        tape.backward_with(out, &[2.0 * r])?;
        Ok((r * r, tape.grad(p).to_vec()))
    }
}

/// Trains the time-only baseline with the same loop and reports its test deviation.
pub fn node_pde_baseline(task: &PdeRegressionTask, model: &NodePdeModel, cfg: &PdeFitConfig) -> Result<PdeFit> {
    let params = model.init_params(cfg.seed);
    let per_sample = |p: &ParamVector, pt: &PdePoint| {
        model
            .loss_grad(p, pt, cfg.quad_steps)
            .map(|(l, g)| Some((l, g, 0)))
    };
    let (params, history, _, _) = fit_loop(params, &task.train, cfg, &per_sample)?;
    let pred = task
        .test
        .iter()
        .map(|pt| model.predict(&params, pt.x, pt.t, cfg.quad_steps))
        .collect::<Result<Vec<f64>>>()?;
    let truth: Vec<f64> = task.test.iter().map(|pt| pt.u).collect();
    Ok(PdeFit {
        params,
        history,
        test_deviation: percent_deviation(&pred, &truth),
        flagged: 0,
        max_fp_iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values() {
        assert!((analytic_u(1.0, 0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((analytic_u(2.0, 0.0) - 4.0 / 3.0).abs() < 1e-15);
        assert!((analytic_u(1.0, 1.0) - 0.844637).abs() < 1e-6);
    }

    #[test]
    fn analytic_solution_satisfies_pde() {
        let h = 1e-5;
        for (x, t) in [(1.2, 0.3), (1.9, 0.8), (1.5, 0.0)] {
            let u = analytic_u(x, t);
            let ux = (analytic_u(x + h, t) - analytic_u(x - h, t)) / (2.0 * h);
            let ut = (analytic_u(x, t + h) - analytic_u(x, t - h)) / (2.0 * h);
            assert!((u * ux + ut - u).abs() < 1e-8);
        }
    }

    #[test]
    fn dataset_is_seeded_and_in_range() {
        let a = gen_pde_dataset(200, 200, 5);
        assert_eq!(a, gen_pde_dataset(200, 200, 5));
        assert_ne!(a, gen_pde_dataset(200, 200, 6));
        let hi = 4.0 * std::f64::consts::E / (2.0 * std::f64::consts::E + 1.0);
        for p in a.train.iter().chain(&a.test) {
            assert!(p.u > 0.0 && p.u <= hi);
            assert_eq!(p.u, analytic_u(p.x, p.t));
        }
    }

    #[test]
    fn sampled_x_is_centred() {
        let task = gen_pde_dataset(10_000, 0, 9);
        let n = task.train.len() as f64;
        let mean = task.train.iter().map(|p| p.x).sum::<f64>() / n;
        let sigma = (1.0f64 / 12.0).sqrt() / n.sqrt();
        assert!((mean - 1.5).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn deviation_on_fixtures() {
        assert!((percent_deviation(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).abs() < 1e-15);
        assert!((percent_deviation(&[1.1, 1.8, 0.0], &[1.0, 2.0, 3.0]) - 40.0).abs() < 1e-12);
        assert!((percent_deviation(&[-1.0, 2.0, 4.5], &[1.0, 4.0, 3.0]) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(PdeModel::default().param_count(), 809);
        assert_eq!(NodePdeModel::default().param_count(), 1185);
    }

    #[test]
    fn zero_time_fixed_point_is_immediate() {
        let model = PdeModel::default();
        let params = model.init_params(1);
        let (root, iters) = model.solve_iota(&params, 1.4, 0.0, 1e-8, 100).unwrap();
        assert_eq!(root, Some(1.4));
        assert_eq!(iters, 1);
    }

    #[test]
    fn unit_speed_fixed_point_is_x_minus_t() {
        let model = PdeModel::default();
        let mut params = model.init_params(2);
        // Zero every nn3 weight and set the first output bias to one.
        let seg = params.segment_mut("nn3").unwrap();
        seg.iter_mut().for_each(|v| *v = 0.0);
        let n = seg.len();
        seg[n - 2] = 1.0;
        let (root, iters) = model.solve_iota(&params, 1.7, 0.4, 1e-8, 100).unwrap();
        assert_eq!(root, Some(1.7 - 0.4));
        assert!(iters <= 2);
    }

    #[test]
    fn zero_network_baseline_predicts_zero() {
        let model = NodePdeModel::default();
        let params = ParamVector::from_parts(vec![("nn1", vec![0.0; 1185])]).unwrap();
        let task = gen_pde_dataset(0, 20, 1);
        let pred: Vec<f64> = task
            .test
            .iter()
            .map(|p| model.predict(&params, p.x, p.t, 4).unwrap())
            .collect();
        assert!(pred.iter().all(|&v| v == 0.0));
        let truth: Vec<f64> = task.test.iter().map(|p| p.u).collect();
        assert!((percent_deviation(&pred, &truth) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let model = PdeModel::default();
        let params = model.init_params(3);
        let cfg = PdeFitConfig {
            fp_tol: 1e-13,
            fp_max_iter: 500,
            ..PdeFitConfig::default()
        };
        let pt = PdePoint { x: 1.6, t: 0.7, u: analytic_u(1.6, 0.7) };
        let (_, grad, _) = model.loss_grad(&params, &pt, &cfg).unwrap().unwrap();
        let loss = |v: Vec<f64>| {
            let p = params.with_values(v).unwrap();
            let y = model.predict(&p, pt.x, pt.t, &cfg).unwrap().unwrap();
            (y - pt.u).powi(2)
        };
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let h = 1e-6;
        for i in (0..params.len()).step_by(13) {
            let (mut a, mut b) = (params.values().to_vec(), params.values().to_vec());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(a) - loss(b)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5 * scale, "{i}: {fd} vs {}", grad[i]);
        }
    }
}
