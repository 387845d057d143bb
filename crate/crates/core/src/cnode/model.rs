use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::field::CharacteristicField;
use crate::diffcore::{
    fnv1a64, MlpSpec, OutputActivation, ParamVector, Tape, FEATURE_SEGMENT, FIELD_SEGMENT,
    HEAD_SEGMENT,
};
use crate::error::{check_len, Error, Result};
use crate::solver::{
    integrate, integrate_with, DiffDynamics, Dynamics, OdeProblem, SolveStats, SolverConfig,
};

/// Feature extractor `g`, characteristic field and output head `Φ`.
///
/// A missing `g` or `Φ` is the identity map; its parameter segment is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnodeModel {
    pub g: Option<MlpSpec>,
    pub field: CharacteristicField,
    pub head: Option<MlpSpec>,
    pub s_span: (f64, f64),
    /// Starting characteristic coordinate shared by every sample.
    pub x0: Vec<f64>,
}

/// Terminal values of one characteristic solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Evolution {
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub stats: SolveStats,
}

impl CnodeModel {
    pub fn new(
        g: Option<MlpSpec>,
        field: CharacteristicField,
        head: Option<MlpSpec>,
    ) -> Result<Self> {
        let model = Self {
            x0: vec![0.0; field.k],
            g,
            field,
            head,
            s_span: (0.0, 1.0),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        check_len("x0", self.field.k, self.x0.len())?;
        if let Some(g) = &self.g {
            g.validate()?;
            check_len("feature extractor output", self.field.n, g.n_out())?;
        }
        if let Some(h) = &self.head {
            h.validate()?;
            check_len("head input", self.field.n, h.n_in())?;
        }
        let (s0, s1) = self.s_span;
        if !(s0.is_finite() && s1.is_finite()) || s0 == s1 {
            return Err(Error::Contract(format!(
                "bad integration span {:?}",
                self.s_span
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.g.as_ref().map_or(self.field.n, MlpSpec::n_in)
    }

    pub fn output_dim(&self) -> usize {
        self.head.as_ref().map_or(self.field.n, MlpSpec::n_out)
    }

    /// Per-segment lengths `(Θ1, Θ2, Θ3)`.
    pub fn segment_lens(&self) -> (usize, usize, usize) {
        (
            self.g.as_ref().map_or(0, MlpSpec::param_count),
            self.field.param_count(),
            self.head.as_ref().map_or(0, MlpSpec::param_count),
        )
    }

    pub fn param_count(&self) -> usize {
        let (a, b, c) = self.segment_lens();
        a + b + c
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        let g = self
            .g
            .as_ref()
            .map_or_else(Vec::new, |g| g.init_params(seed));
        let f = self.field.init_params(seed.wrapping_add(100));
        let h = self
            .head
            .as_ref()
            .map_or_else(Vec::new, |h| h.init_params(seed.wrapping_add(200)));
        self.assemble(g, f, h)
            .expect("segment lengths follow the model")
    }

    /// Builds a parameter vector from explicit `(Θ1, Θ2, Θ3)` values.
    pub fn assemble(
        &self,
        theta1: Vec<f64>,
        theta2: Vec<f64>,
        theta3: Vec<f64>,
    ) -> Result<ParamVector> {
        let (a, b, c) = self.segment_lens();
        check_len("theta1", a, theta1.len())?;
        check_len("theta2", b, theta2.len())?;
        check_len("theta3", c, theta3.len())?;
        ParamVector::from_parts(vec![
            (FEATURE_SEGMENT, theta1),
            (FIELD_SEGMENT, theta2),
            (HEAD_SEGMENT, theta3),
        ])
    }

    /// Hash of the serialized architecture, stored in checkpoints.
    pub fn spec_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("model serializes");
        fnv1a64(text.as_bytes())
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        let (a, b, c) = self.segment_lens();
        check_len("theta1", a, params.segment(FEATURE_SEGMENT)?.len())?;
        check_len("theta2", b, params.segment(FIELD_SEGMENT)?.len())?;
        check_len("theta3", c, params.segment(HEAD_SEGMENT)?.len())
    }

    /// `u0 = g(z)`.
    pub fn features(&self, params: &ParamVector, z: &[f64]) -> Result<Vec<f64>> {
        check_len("model input", self.input_dim(), z.len())?;
        match &self.g {
            Some(g) => g.forward(params.segment(FEATURE_SEGMENT)?, z),
            None => Ok(z.to_vec()),
        }
    }

    /// Number of leading state entries holding `x`: `k` for a learned
    /// direction, zero for a constant one (then `x` is affine in `s`).
    pub fn state_offset(&self) -> usize {
        if self.field.carries_x() {
            self.field.k
        } else {
            0
        }
    }

    /// Initial solver state: `[x0, u0]`, or `u0` for a constant direction.
    pub fn initial_state(&self, u0: &[f64]) -> Vec<f64> {
        let mut y = if self.field.carries_x() {
            self.x0.clone()
        } else {
            Vec::new()
        };
        y.extend_from_slice(u0);
        y
    }

    /// Splits a solver state at `s` into `(x, u)`.
    pub fn split_state(&self, s: f64, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let off = self.state_offset();
        let x = if off > 0 {
            y[..off].to_vec()
        } else {
            self.field.constant_x(&self.x0, s - self.s_span.0)
        };
        (x, y[off..].to_vec())
    }

    pub fn dynamics<'a>(
        &'a self,
        params: &'a ParamVector,
        u0: &[f64],
    ) -> Result<FieldDynamics<'a>> {
        Ok(
            FieldDynamics::new(&self.field, params.segment(FIELD_SEGMENT)?, u0)?
                .with_origin(&self.x0, self.s_span.0),
        )
    }

    /// Integrates `[x, u]` from `[x0, g(z)]` over the model's span.
    pub fn evolve(
        &self,
        params: &ParamVector,
        z: &[f64],
        solver: &SolverConfig,
    ) -> Result<Evolution> {
        self.evolve_observed(params, z, solver, |_, _| {})
    }

    /// As [`CnodeModel::evolve`], calling `observe(s, state)` after each accepted step;
    /// see [`CnodeModel::split_state`].
    pub fn evolve_observed(
        &self,
        params: &ParamVector,
        z: &[f64],
        solver: &SolverConfig,
        observe: impl FnMut(f64, &[f64]),
    ) -> Result<Evolution> {
        self.check_params(params)?;
        let u0 = self.features(params, z)?;
        let dynamics = self.dynamics(params, &u0)?;
        let problem = OdeProblem::new(&dynamics, self.s_span, self.initial_state(&u0));
        let (y, stats) = integrate_with(&problem, solver, observe)
            .map_err(|e| e.context("evolving characteristic model"))?;
        let (x, u) = self.split_state(self.s_span.1, &y);
        Ok(Evolution { x, u, stats })
    }

    /// `Φ(u)`.
    pub fn apply_head(&self, params: &ParamVector, u: &[f64]) -> Result<Vec<f64>> {
        match &self.head {
            Some(h) => h.forward(params.segment(HEAD_SEGMENT)?, u),
            None => Ok(u.to_vec()),
        }
    }

    /// `Φ(u(T))`, softmax-normalized when the head says so.
    pub fn predict(
        &self,
        params: &ParamVector,
        z: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<f64>> {
        let evo = self.evolve(params, z, solver)?;
        self.apply_head(params, &evo.u)
    }

    /// Head logits before any softmax.
    pub(crate) fn head_logits_spec(&self) -> Option<MlpSpec> {
        self.head.clone().map(|mut h| {
            h.output_activation = OutputActivation::Identity;
            h
        })
    }
}

/// The system `d[x, u]/ds` for one sample, with its conditioner fixed.
///
/// Differentiable parameters are Θ2 followed by the conditioner when the
/// direction reads it, so the conditioner's gradient flows back into `u0`.
/// With a constant direction the state is `u` alone and `x` follows
/// `x0 + a·(s − s0)`.
pub struct FieldDynamics<'a> {
    field: &'a CharacteristicField,
    theta: &'a [f64],
    cond: Vec<f64>,
    x0: Vec<f64>,
    s0: f64,
    tape: RefCell<Tape>,
}

impl<'a> FieldDynamics<'a> {
    pub fn new(field: &'a CharacteristicField, theta: &'a [f64], cond: &[f64]) -> Result<Self> {
        check_len("field parameters", field.param_count(), theta.len())?;
        let cond = if field.is_conditioned() {
            check_len("conditioner", field.n, cond.len())?;
            cond.to_vec()
        } else {
            Vec::new()
        };
        Ok(Self {
            field,
            theta,
            cond,
            x0: vec![0.0; field.k],
            s0: 0.0,
            tape: RefCell::new(Tape::new()),
        })
    }

    /// Sets where a constant-direction characteristic starts.
    pub fn with_origin(mut self, x0: &[f64], s0: f64) -> Self {
        self.x0 = x0.to_vec();
        self.s0 = s0;
        self
    }

    pub fn field(&self) -> &CharacteristicField {
        self.field
    }

    /// Number of trailing differentiable parameters that belong to the conditioner.
    pub fn cond_len(&self) -> usize {
        self.cond.len()
    }

    fn offset(&self) -> usize {
        if self.field.carries_x() {
            self.field.k
        } else {
            0
        }
    }

    fn split<'y>(&self, s: f64, y: &'y [f64]) -> (std::borrow::Cow<'y, [f64]>, &'y [f64]) {
        let off = self.offset();
        if off > 0 {
            (y[..off].into(), &y[off..])
        } else {
            (self.field.constant_x(&self.x0, s - self.s0).into(), y)
        }
    }
}

impl Dynamics for FieldDynamics<'_> {
    fn dim(&self) -> usize {
        self.offset() + self.field.n
    }

    fn eval(&self, s: f64, y: &[f64], dy: &mut [f64]) {
        let (x, u) = self.split(s, y);
        let off = self.offset();
        match self.field.eval(self.theta, &x, u, &self.cond) {
            Ok((a, du)) => {
                dy[..off].copy_from_slice(&a[..off]);
                dy[off..].copy_from_slice(&du);
            }
            Err(_) => dy.fill(f64::NAN),
        }
    }
}

impl DiffDynamics for FieldDynamics<'_> {
    fn num_params(&self) -> usize {
        self.theta.len() + self.cond.len()
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
        let off = self.offset();
        let (x_val, u_val) = self.split(s, y);
        let mut tape = self.tape.borrow_mut();
        tape.clear();
        let theta = tape.leaf(self.theta);
        let cond = (!self.cond.is_empty()).then(|| tape.leaf(&self.cond));
        let x = tape.leaf(&x_val);
        let u = tape.leaf(u_val);
        let recorded = self
            .field
            .record(&mut tape, theta, x, u, cond, &[])
            .and_then(|(a, du, _)| {
                let out = if off > 0 { tape.concat(&[a, du]) } else { du };
                tape.backward_with(out, cot).map(|_| out)
            });
        let Ok(out) = recorded else {
            dy.fill(f64::NAN);
            grad_y.fill(f64::NAN);
            grad_p.fill(f64::NAN);
            return;
        };
        dy.copy_from_slice(tape.value(out));
        if off > 0 {
            grad_y[..off].copy_from_slice(tape.grad(x));
        }
        grad_y[off..].copy_from_slice(tape.grad(u));
        let p = self.theta.len();
        grad_p[..p].copy_from_slice(tape.grad(theta));
        if let Some(c) = cond {
            grad_p[p..].copy_from_slice(tape.grad(c));
        }
    }
}

/// Solves the plain system `du/ds = f(u)` with the same solver, for comparisons.
pub fn integrate_node(
    f: &MlpSpec,
    theta: &[f64],
    u0: &[f64],
    s_span: (f64, f64),
    solver: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    let dynamics =
        crate::solver::FnDynamics::new(u0.len(), |_s, u: &[f64], du: &mut [f64]| {
            match f.forward(theta, u) {
                Ok(v) => du.copy_from_slice(&v),
                Err(_) => du.fill(f64::NAN),
            }
        });
    integrate(&OdeProblem::new(dynamics, s_span, u0.to_vec()), solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnode::field::{BalanceMode, DirectionInputs};

    fn sample_model(conditioned: bool) -> CnodeModel {
        let mut field = CharacteristicField::new(2, 2, &[6], &[6], BalanceMode::Full);
        if !conditioned {
            let inputs = DirectionInputs {
                x: true,
                u: true,
                cond: false,
            };
            field = field.with_direction(MlpSpec::tanh(vec![4, 6, 2]), inputs);
        }
        CnodeModel::new(
            Some(MlpSpec::tanh(vec![3, 5, 2])),
            field,
            Some(MlpSpec::tanh(vec![2, 4, 3]).with_softmax()),
        )
        .unwrap()
    }

    #[test]
    fn zero_jacobian_keeps_features() {
        let model = sample_model(true);
        let params = model.init_params(1);
        let mut theta2 = params.segment(FIELD_SEGMENT).unwrap().to_vec();
        let off = model.field.direction_param_count();
        theta2[off..].iter_mut().for_each(|v| *v = 0.0);
        let params = model
            .assemble(
                params.segment(FEATURE_SEGMENT).unwrap().to_vec(),
                theta2,
                params.segment(HEAD_SEGMENT).unwrap().to_vec(),
            )
            .unwrap();
        let z = [0.3, -0.2, 0.9];
        let evo = model.evolve(&params, &z, &SolverConfig::default()).unwrap();
        assert_eq!(evo.u, model.features(&params, &z).unwrap());
    }

    #[test]
    fn softmax_head_sums_to_one() {
        let model = sample_model(true);
        let params = model.init_params(2);
        for z in [[0.0, 0.0, 0.0], [5.0, -3.0, 1.0]] {
            let out = model
                .predict(&params, &z, &SolverConfig::default())
                .unwrap();
            assert!(out.iter().all(|&p| p > 0.0));
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_head_predict_equals_evolve() {
        let field = CharacteristicField::new(2, 2, &[4], &[4], BalanceMode::UOnly);
        let model = CnodeModel::new(None, field, None).unwrap();
        let params = model.init_params(3);
        let z = [0.4, -0.1];
        let cfg = SolverConfig::rk4(0.1);
        let evo = model.evolve(&params, &z, &cfg).unwrap();
        assert_eq!(model.predict(&params, &z, &cfg).unwrap(), evo.u);
    }

    #[test]
    fn node_reduction_matches_direct_integration() {
        let f = MlpSpec::tanh(vec![2, 8, 2]);
        let model = CnodeModel::new(None, CharacteristicField::node(2, f.clone()), None).unwrap();
        let params = model.init_params(4);
        let theta = params.segment(FIELD_SEGMENT).unwrap();
        let u0 = [0.5, -0.7];
        for cfg in [SolverConfig::rk4(0.05), SolverConfig::dopri5(1e-8, 1e-10)] {
            let evo = model.evolve(&params, &u0, &cfg).unwrap();
            let (direct, _) = integrate_node(&f, theta, &u0, (0.0, 1.0), &cfg).unwrap();
            for (a, b) in evo.u.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((evo.x[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioning_changes_characteristics() {
        let model = sample_model(true);
        let params = model.init_params(5);
        let cfg = SolverConfig::default();
        let (z1, z2) = ([1.0, 0.0, 0.0], [-1.0, 0.5, 0.0]);
        assert_ne!(
            model.features(&params, &z1).unwrap(),
            model.features(&params, &z2).unwrap()
        );
        let x1 = model.evolve(&params, &z1, &cfg).unwrap().x;
        let x2 = model.evolve(&params, &z2, &cfg).unwrap().x;
        assert!(x1.iter().zip(&x2).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let model = sample_model(true);
        let params = model.init_params(6);
        let theta = params.segment(FIELD_SEGMENT).unwrap();
        let cond = [0.3, -0.6];
        let dynamics = FieldDynamics::new(&model.field, theta, &cond).unwrap();
        let y = [0.1, 0.2, -0.4, 0.8];
        let cot = [0.5, -1.0, 0.25, 2.0];
        let (mut dy, mut gy, mut gp) =
            (vec![0.0; 4], vec![0.0; 4], vec![0.0; dynamics.num_params()]);
        dynamics.vjp(0.0, &y, &cot, &mut dy, &mut gy, &mut gp);
        let h = 1e-6;
        let value = |theta: &[f64], cond: &[f64], y: &[f64]| {
            let d = FieldDynamics::new(&model.field, theta, cond).unwrap();
            let mut out = vec![0.0; 4];
            d.eval(0.0, y, &mut out);
            out.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..4 {
            let (mut yp, mut ym) = (y, y);
            yp[i] += h;
            ym[i] -= h;
            let fd = (value(theta, &cond, &yp) - value(theta, &cond, &ym)) / (2.0 * h);
            assert!((fd - gy[i]).abs() < 1e-7);
        }
        for i in 0..2 {
            let (mut cp, mut cm) = (cond, cond);
            cp[i] += h;
            cm[i] -= h;
            let fd = (value(theta, &cp, &y) - value(theta, &cm, &y)) / (2.0 * h);
            assert!((fd - gp[theta.len() + i]).abs() < 1e-7);
        }
        for i in (0..theta.len()).step_by(7) {
            let (mut tp, mut tm) = (theta.to_vec(), theta.to_vec());
            tp[i] += h;
            tm[i] -= h;
            let fd = (value(&tp, &cond, &y) - value(&tm, &cond, &y)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-7);
        }
    }
}
