use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::CnodeModel;
use crate::diffcore::{
    adam_step, AdamConfig, AdamState, ParamVector, Tape, FEATURE_SEGMENT, HEAD_SEGMENT,
};
use crate::error::{check_len, Error, Result};
use crate::solver::{
    backprop_through_solver, integrate, integrate_adjoint, OdeProblem, SolverConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    /// Targets are class probabilities (usually one-hot); the head emits logits.
    CrossEntropy,
}

/// How parameter gradients are obtained from a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Adjoint,
    Discrete,
}

impl std::str::FromStr for GradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjoint" => Ok(GradMode::Adjoint),
            "discrete" => Ok(GradMode::Discrete),
            other => Err(Error::Contract(format!("unknown grad mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for GradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradMode::Adjoint => "adjoint",
            GradMode::Discrete => "discrete",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub solver: SolverConfig,
    pub loss: Loss,
    pub grad_mode: GradMode,
    pub seed: u64,
    /// Run per-sample solves of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            adam: AdamConfig::default(),
            solver: SolverConfig::default(),
            loss: Loss::Mse,
            grad_mode: GradMode::Adjoint,
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be positive".into()));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0) {
            return Err(Error::Contract(format!(
                "bad learning rate {}",
                self.adam.lr
            )));
        }
        if self.grad_mode == GradMode::Discrete && !self.solver.method.is_fixed_step() {
            return Err(Error::UnsupportedMethod(format!(
                "{} with discrete gradients",
                self.solver.method
            )));
        }
        self.solver.validate()
    }
}

/// One input/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z: Vec<f64>,
    pub target: Vec<f64>,
}

impl Sample {
    pub fn new(z: Vec<f64>, target: Vec<f64>) -> Self {
        Self { z, target }
    }
}

/// Per-epoch training record. NFE values are means per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean squared error for regression, accuracy for classification.
    pub metric: f64,
    pub nfe_forward: f64,
    pub nfe_backward: f64,
}

/// Loss, gradient and solver cost for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    pub loss: f64,
    pub metric: f64,
    pub grads: Vec<f64>,
    pub nfe_forward: usize,
    pub nfe_backward: usize,
}

/// Loss value, metric contribution and `∂loss/∂output` for raw head outputs.
pub(crate) fn loss_and_grad(loss: Loss, out: &[f64], target: &[f64]) -> (f64, f64, Vec<f64>) {
    match loss {
        Loss::Mse => {
            let m = out.len() as f64;
            let l = out
                .iter()
                .zip(target)
                .map(|(o, t)| (o - t).powi(2))
                .sum::<f64>()
                / m;
            let g = out
                .iter()
                .zip(target)
                .map(|(o, t)| 2.0 * (o - t) / m)
                .collect();
            (l, l, g)
        }
        Loss::CrossEntropy => {
            let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + out.iter().map(|o| (o - mx).exp()).sum::<f64>().ln();
            let mass: f64 = target.iter().sum();
            let l = -out
                .iter()
                .zip(target)
                .map(|(o, t)| t * (o - lse))
                .sum::<f64>();
            let g = out
                .iter()
                .zip(target)
                .map(|(o, t)| mass * (o - lse).exp() - t)
                .collect();
            let hit = (argmax(out) == argmax(target)) as usize as f64;
            (l, hit, g)
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Gradient of the per-sample loss with respect to every parameter segment.
pub fn sample_gradient(
    model: &CnodeModel,
    params: &ParamVector,
    sample: &Sample,
    config: &TrainConfig,
) -> Result<SampleGradient> {
    model.check_params(params)?;
    check_len("target", model.output_dim(), sample.target.len())?;
    let (k, n) = (model.state_offset(), model.field.n);
    let theta1 = params.segment(FEATURE_SEGMENT)?;
    let theta3 = params.segment(HEAD_SEGMENT)?;

    let mut g_tape = Tape::new();
    let feature = match &model.g {
        Some(g) => {
            check_len("model input", g.n_in(), sample.z.len())?;
            let p = g_tape.leaf(theta1);
            let z = g_tape.constant(&sample.z);
            Some((p, g.record(&mut g_tape, p, 0, z)?))
        }
        None => None,
    };
    let u0 = match feature {
        Some((_, out)) => g_tape.value(out).to_vec(),
        None => model.features(params, &sample.z)?,
    };

    let dynamics = model.dynamics(params, &u0)?;
    let y0 = model.initial_state(&u0);
    let (y_t, fwd) = integrate(
        &OdeProblem::new(&dynamics, model.s_span, y0.clone()),
        &config.solver,
    )
    .map_err(|e| e.context("forward solve"))?;

    let mut h_tape = Tape::new();
    let u_t = h_tape.leaf(&y_t[k..]);
    let (logits, head_p) = match model.head_logits_spec() {
        Some(h) => {
            let p = h_tape.leaf(theta3);
            (h.record(&mut h_tape, p, 0, u_t)?, Some(p))
        }
        None => (u_t, None),
    };
    let (loss, metric, g_out) = loss_and_grad(config.loss, h_tape.value(logits), &sample.target);
    h_tape.backward_with(logits, &g_out)?;
    let mut loss_grad = vec![0.0; k];
    loss_grad.extend_from_slice(h_tape.grad(u_t));

    let sens = match config.grad_mode {
        GradMode::Adjoint => {
            integrate_adjoint(&dynamics, &y_t, model.s_span, &config.solver, &loss_grad)
        }
        GradMode::Discrete => {
            backprop_through_solver(&dynamics, &y0, model.s_span, &config.solver, &loss_grad)
                .map(|(_, s)| s)
        }
    }
    .map_err(|e| e.context("gradient solve"))?;

    let p2 = model.field.param_count();
    let mut g_u0 = sens.grad_y0[k..].to_vec();
    if dynamics.cond_len() > 0 {
        for (g, c) in g_u0.iter_mut().zip(&sens.grad_params[p2..]) {
            *g += c;
        }
    }
    debug_assert_eq!(g_u0.len(), n);

    let mut grads = Vec::with_capacity(params.len());
    match feature {
        Some((p, out)) => {
            g_tape.backward_with(out, &g_u0)?;
            grads.extend_from_slice(g_tape.grad(p));
        }
        None => {}
    }
    grads.extend_from_slice(&sens.grad_params[..p2]);
    if let Some(p) = head_p {
        grads.extend_from_slice(h_tape.grad(p));
    }
    Ok(SampleGradient {
        loss,
        metric,
        grads,
        nfe_forward: fwd.nfe,
        nfe_backward: sens.stats.nfe,
    })
}

/// Mean loss and metric over `data` without gradients.
pub fn evaluate(
    model: &CnodeModel,
    params: &ParamVector,
    data: &[Sample],
    solver: &SolverConfig,
    loss: Loss,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let logits_head = model.head_logits_spec();
    let (mut l_sum, mut m_sum) = (0.0, 0.0);
    for s in data {
        let u = model.evolve(params, &s.z, solver)?.u;
        let out = match &logits_head {
            Some(h) => h.forward(params.segment(HEAD_SEGMENT)?, &u)?,
            None => u,
        };
        check_len("target", out.len(), s.target.len())?;
        let (l, m, _) = loss_and_grad(loss, &out, &s.target);
        l_sum += l;
        m_sum += m;
    }
    let n = data.len() as f64;
    Ok((l_sum / n, m_sum / n))
}

/// Minimizes the mean loss over `data` with Adam on shuffled mini-batches.
///
/// A non-finite batch loss stops training with
/// [`Error::NonFiniteLoss`], which carries the parameters from before that batch.
pub fn train(
    model: &CnodeModel,
    params: ParamVector,
    data: &[Sample],
    config: &TrainConfig,
) -> Result<(ParamVector, Vec<EpochRecord>)> {
    config.validate()?;
    model.check_params(&params)?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut params = params;
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut l_sum, mut m_sum, mut nf, mut nb) = (0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let per_sample = |&i: &usize| sample_gradient(model, &params, &data[i], config);
            let results: Vec<Result<SampleGradient>> = if config.parallel {
                batch.par_iter().map(per_sample).collect()
            } else {
                batch.iter().map(per_sample).collect()
            };
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for r in results {
                let r = r.map_err(|e| non_finite_or(e, epoch, &params))?;
                batch_loss += r.loss;
                m_sum += r.metric;
                nf += r.nfe_forward;
                nb += r.nfe_backward;
                for (g, v) in grad.iter_mut().zip(&r.grads) {
                    *g += v;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_good: Box::new(params),
                });
            }
            l_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut params, &grad, &mut state, &config.adam)?;
        }
        let count = data.len() as f64;
        history.push(EpochRecord {
            epoch,
            loss: l_sum / count,
            metric: m_sum / count,
            nfe_forward: nf as f64 / count,
            nfe_backward: nb as f64 / count,
        });
    }
    Ok((params, history))
}

/// Blow-ups inside a solve surface as a non-finite loss.
fn non_finite_or(e: Error, epoch: usize, params: &ParamVector) -> Error {
    match e.root() {
        Error::Instability { .. } => Error::NonFiniteLoss {
            epoch,
            last_good: Box::new(params.clone()),
        },
        _ => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnode::field::{BalanceMode, CharacteristicField};
    use crate::diffcore::MlpSpec;

    fn small_model() -> CnodeModel {
        CnodeModel::new(
            Some(MlpSpec::tanh(vec![2, 4, 2])),
            CharacteristicField::new(2, 2, &[5], &[5], BalanceMode::Full),
            Some(MlpSpec::tanh(vec![2, 4, 1])),
        )
        .unwrap()
    }

    fn data() -> Vec<Sample> {
        (0..6)
            .map(|i| {
                let v = i as f64 / 5.0;
                Sample::new(vec![v, 1.0 - v], vec![v * v])
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let model = small_model();
        let params = model.init_params(1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let (out, hist) = train(&model, params.clone(), &data(), &cfg).unwrap();
        assert_eq!(out, params);
        assert!(hist
            .windows(2)
            .all(|w| (w[0].loss - w[1].loss).abs() < 1e-15));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let model = small_model();
        let params = model.init_params(2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, hist) = train(&model, params.clone(), &data(), &cfg).unwrap();
        assert_eq!(out, params);
        assert!(hist.is_empty());
    }

    fn fd_check(cfg: &TrainConfig, loss: Loss, target: Vec<f64>, head: Option<MlpSpec>, tol: f64) {
        let model = CnodeModel::new(
            Some(MlpSpec::tanh(vec![2, 4, 2])),
            CharacteristicField::new(2, 2, &[5], &[5], BalanceMode::Full),
            head,
        )
        .unwrap();
        let params = model.init_params(3);
        let sample = Sample::new(vec![0.4, -0.9], target);
        let cfg = TrainConfig { loss, ..*cfg };
        let g = sample_gradient(&model, &params, &sample, &cfg).unwrap();
        let h = 1e-6;
        let scale = g.grads.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..params.len() {
            let mut vp = params.values().to_vec();
            let mut vm = vp.clone();
            vp[i] += h;
            vm[i] -= h;
            let lp = sample_gradient(&model, &params.with_values(vp).unwrap(), &sample, &cfg)
                .unwrap()
                .loss;
            let lm = sample_gradient(&model, &params.with_values(vm).unwrap(), &sample, &cfg)
                .unwrap()
                .loss;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g.grads[i]).abs() < tol * scale.max(1e-3),
                "param {i} ({:?}): fd {fd} vs {}",
                params.segment_of(i),
                g.grads[i]
            );
        }
    }

    #[test]
    fn discrete_gradients_match_finite_differences() {
        let cfg = TrainConfig {
            solver: SolverConfig::rk4(0.1),
            grad_mode: GradMode::Discrete,
            ..TrainConfig::default()
        };
        fd_check(
            &cfg,
            Loss::Mse,
            vec![0.3],
            Some(MlpSpec::tanh(vec![2, 3, 1])),
            1e-6,
        );
        fd_check(
            &cfg,
            Loss::CrossEntropy,
            vec![0.0, 1.0, 0.0],
            Some(MlpSpec::tanh(vec![2, 3, 3]).with_softmax()),
            1e-6,
        );
    }

    #[test]
    fn adjoint_gradients_match_finite_differences() {
        let cfg = TrainConfig {
            solver: SolverConfig::dopri5(1e-10, 1e-12),
            ..TrainConfig::default()
        };
        fd_check(&cfg, Loss::Mse, vec![0.3, -0.2], None, 1e-4);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_target() {
        let (l, hit, g) = loss_and_grad(Loss::CrossEntropy, &[0.0, 0.0], &[1.0, 0.0]);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(hit, 1.0);
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parallel_matches_serial_up_to_rounding() {
        let model = small_model();
        let params = model.init_params(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (a, _) = train(&model, params.clone(), &data(), &cfg).unwrap();
        let (b, _) = train(
            &model,
            params,
            &data(),
            &TrainConfig {
                parallel: true,
                ..cfg
            },
        )
        .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_mode_rejects_adaptive_solver() {
        let cfg = TrainConfig {
            grad_mode: GradMode::Discrete,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::UnsupportedMethod(_))));
    }
}
