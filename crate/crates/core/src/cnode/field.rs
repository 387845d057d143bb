use serde::{Deserialize, Serialize};

use crate::diffcore::{matvec, MlpSpec, Tape, Var};
use crate::error::{check_len, Error, Result};

/// Which arguments the learned derivative `J_x u` receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// `J` depends on `u` only, so mixed partials in `x` vanish identically.
    UOnly,
    /// `J` depends on `(x, u)`.
    Full,
}

impl std::str::FromStr for BalanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u_only" => Ok(BalanceMode::UOnly),
            "full" => Ok(BalanceMode::Full),
            other => Err(Error::Contract(format!("unknown balance mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BalanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BalanceMode::UOnly => "u_only",
            BalanceMode::Full => "full",
        })
    }
}

/// Arguments fed to the direction network, concatenated in the order `x, u, cond`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionInputs {
    pub x: bool,
    pub u: bool,
    pub cond: bool,
}

impl DirectionInputs {
    pub const ALL: Self = Self {
        x: true,
        u: true,
        cond: true,
    };

    fn width(self, k: usize, n: usize) -> usize {
        k * self.x as usize + n * self.u as usize + n * self.cond as usize
    }
}

/// The characteristic direction `dx/ds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Direction {
    Learned {
        net: MlpSpec,
        inputs: DirectionInputs,
    },
    /// A frozen constant direction with no parameters.
    Constant(Vec<f64>),
}

/// `dx/ds = a(x, u; cond)` and `du/ds = J(x, u) · a` with `J` an `n × k` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicField {
    pub k: usize,
    pub n: usize,
    pub direction: Direction,
    pub jac_net: MlpSpec,
    pub balance_mode: BalanceMode,
}

impl CharacteristicField {
    /// A learned field with tanh networks of the given hidden widths. The
    /// direction network sees `(x, u, cond)`.
    pub fn new(
        k: usize,
        n: usize,
        a_hidden: &[usize],
        jac_hidden: &[usize],
        mode: BalanceMode,
    ) -> Self {
        let inputs = DirectionInputs::ALL;
        let widths = |n_in: usize, hidden: &[usize], n_out: usize| {
            let mut w = vec![n_in];
            w.extend_from_slice(hidden);
            w.push(n_out);
            MlpSpec::tanh(w)
        };
        let jac_in = match mode {
            BalanceMode::UOnly => n,
            BalanceMode::Full => k + n,
        };
        Self {
            k,
            n,
            direction: Direction::Learned {
                net: widths(inputs.width(k, n), a_hidden, k),
                inputs,
            },
            jac_net: widths(jac_in, jac_hidden, n * k),
            balance_mode: mode,
        }
    }

    /// The plain neural ODE `du/ds = f(u)`: `k = 1` and `a ≡ 1`.
    pub fn node(n: usize, jac_net: MlpSpec) -> Self {
        Self {
            k: 1,
            n,
            direction: Direction::Constant(vec![1.0]),
            jac_net,
            balance_mode: BalanceMode::UOnly,
        }
    }

    pub fn with_direction(mut self, net: MlpSpec, inputs: DirectionInputs) -> Self {
        self.direction = Direction::Learned { net, inputs };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::Contract(format!(
                "field needs k ≥ 1 and n ≥ 1, got k={} n={}",
                self.k, self.n
            )));
        }
        match &self.direction {
            Direction::Learned { net, inputs } => {
                net.validate()?;
                check_len(
                    "direction net input",
                    inputs.width(self.k, self.n),
                    net.n_in(),
                )?;
                check_len("direction net output", self.k, net.n_out())?;
            }
            Direction::Constant(a) => check_len("constant direction", self.k, a.len())?,
        }
        self.jac_net.validate()?;
        check_len(
            "jacobian net input",
            self.jac_in_width(),
            self.jac_net.n_in(),
        )?;
        check_len("jacobian net output", self.n * self.k, self.jac_net.n_out())
    }

    fn jac_in_width(&self) -> usize {
        match self.balance_mode {
            BalanceMode::UOnly => self.n,
            BalanceMode::Full => self.k + self.n,
        }
    }

    pub fn direction_param_count(&self) -> usize {
        match &self.direction {
            Direction::Learned { net, .. } => net.param_count(),
            Direction::Constant(_) => 0,
        }
    }

    /// Length of Θ2: direction parameters followed by Jacobian parameters.
    pub fn param_count(&self) -> usize {
        self.direction_param_count() + self.jac_net.param_count()
    }

    /// Whether the direction reads the conditioner.
    pub fn is_conditioned(&self) -> bool {
        matches!(&self.direction, Direction::Learned { inputs, .. } if inputs.cond)
    }

    /// Whether any part of the field reads `x` or `cond`.
    pub fn is_autonomous_in_u(&self) -> bool {
        let dir = match &self.direction {
            Direction::Learned { inputs, .. } => !inputs.x && !inputs.cond,
            Direction::Constant(_) => true,
        };
        dir && self.balance_mode == BalanceMode::UOnly
    }

    /// Whether `x` must be integrated: false for a constant direction.
    pub fn carries_x(&self) -> bool {
        matches!(self.direction, Direction::Learned { .. })
    }

    /// `x0 + a·Δs` for a constant direction; `x0` otherwise.
    pub fn constant_x(&self, x0: &[f64], ds: f64) -> Vec<f64> {
        match &self.direction {
            Direction::Constant(a) => x0.iter().zip(a).map(|(x, a)| x + a * ds).collect(),
            Direction::Learned { .. } => x0.to_vec(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut out = match &self.direction {
            Direction::Learned { net, .. } => net.init_params(seed),
            Direction::Constant(_) => Vec::new(),
        };
        out.extend(self.jac_net.init_params(seed.wrapping_add(1)));
        out
    }

    fn direction_input(inputs: DirectionInputs, x: &[f64], u: &[f64], cond: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + 2 * u.len());
        if inputs.x {
            v.extend_from_slice(x);
        }
        if inputs.u {
            v.extend_from_slice(u);
        }
        if inputs.cond {
            v.extend_from_slice(cond);
        }
        v
    }

    fn check_args(&self, theta: &[f64], x: &[f64], u: &[f64], cond: &[f64]) -> Result<()> {
        check_len("field parameters", self.param_count(), theta.len())?;
        check_len("characteristic coordinate x", self.k, x.len())?;
        check_len("latent state u", self.n, u.len())?;
        if self.is_conditioned() {
            check_len("conditioner", self.n, cond.len())?;
        }
        Ok(())
    }

    /// `dx/ds`.
    pub fn direction_at(
        &self,
        theta: &[f64],
        x: &[f64],
        u: &[f64],
        cond: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_args(theta, x, u, cond)?;
        match &self.direction {
            Direction::Learned { net, inputs } => {
                let p = &theta[..net.param_count()];
                net.forward(p, &Self::direction_input(*inputs, x, u, cond))
            }
            Direction::Constant(a) => Ok(a.clone()),
        }
    }

    /// The `n × k` matrix `J_x u`, row-major.
    pub fn jacobian_at(&self, theta: &[f64], x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let p = &theta[self.direction_param_count()..];
        match self.balance_mode {
            BalanceMode::UOnly => self.jac_net.forward(p, u),
            BalanceMode::Full => {
                let mut input = x.to_vec();
                input.extend_from_slice(u);
                self.jac_net.forward(p, &input)
            }
        }
    }

    /// Evaluates `(dx/ds, du/ds)`.
    pub fn eval(
        &self,
        theta: &[f64],
        x: &[f64],
        u: &[f64],
        cond: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = self.direction_at(theta, x, u, cond)?;
        let j = self.jacobian_at(theta, x, u)?;
        let mut du = vec![0.0; self.n];
        matvec(&j, self.n, self.k, &a, &mut du);
        Ok((a, du))
    }

    /// Records `(dx/ds, du/ds)` on `tape`, with `theta` holding Θ2.
    ///
    /// `u_tangents` are directions in `u`; for each one the directional
    /// derivative of `du/ds` with `x` and `cond` held fixed is returned too.
    pub(crate) fn record(
        &self,
        tape: &mut Tape,
        theta: Var,
        x: Var,
        u: Var,
        cond: Option<Var>,
        u_tangents: &[Var],
    ) -> Result<(Var, Var, Vec<Var>)> {
        let (k, n) = (self.k, self.n);
        let zeros_x = (!u_tangents.is_empty()).then(|| tape.constant(&vec![0.0; k]));
        let zeros_c = (!u_tangents.is_empty()).then(|| tape.constant(&vec![0.0; n]));
        let (a, da): (Var, Vec<Var>) = match &self.direction {
            Direction::Learned { net, inputs } => {
                let mut parts = Vec::new();
                if inputs.x {
                    parts.push(x);
                }
                if inputs.u {
                    parts.push(u);
                }
                if inputs.cond {
                    let c = cond.ok_or_else(|| {
                        Error::Contract("conditioned field evaluated without a conditioner".into())
                    })?;
                    parts.push(c);
                }
                let input = tape.concat(&parts);
                let tangents: Vec<Var> = u_tangents
                    .iter()
                    .map(|&t| {
                        let mut tp = Vec::new();
                        if inputs.x {
                            tp.push(zeros_x.unwrap());
                        }
                        if inputs.u {
                            tp.push(t);
                        }
                        if inputs.cond {
                            tp.push(zeros_c.unwrap());
                        }
                        tape.concat(&tp)
                    })
                    .collect();
                net.record_with_tangents(tape, theta, 0, input, &tangents)?
            }
            Direction::Constant(a) => {
                let v = tape.constant(a);
                let z = vec![0.0; k];
                let da = u_tangents.iter().map(|_| tape.constant(&z)).collect();
                (v, da)
            }
        };
        let off = self.direction_param_count();
        let (jac_input, jac_tangents) = match self.balance_mode {
            BalanceMode::UOnly => (u, u_tangents.to_vec()),
            BalanceMode::Full => {
                let input = tape.concat(&[x, u]);
                let ts = u_tangents
                    .iter()
                    .map(|&t| tape.concat(&[zeros_x.unwrap(), t]))
                    .collect();
                (input, ts)
            }
        };
        let (j, dj) =
            self.jac_net
                .record_with_tangents(tape, theta, off, jac_input, &jac_tangents)?;
        let du = tape.matvec(j, a, n, k);
        let d_du = dj
            .into_iter()
            .zip(da)
            .map(|(dj, da)| {
                let l = tape.matvec(dj, a, n, k);
                let r = tape.matvec(j, da, n, k);
                tape.add(l, r)
            })
            .collect();
        Ok((a, du, d_du))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_with(n_in: usize, n_out: usize, w: &[f64], b: &[f64]) -> (MlpSpec, Vec<f64>) {
        let spec = MlpSpec::linear(n_in, n_out);
        let mut p = w.to_vec();
        p.extend_from_slice(b);
        (spec, p)
    }

    #[test]
    fn node_reduction_returns_jacobian_net() {
        let f = MlpSpec::tanh(vec![2, 5, 2]);
        let field = CharacteristicField::node(2, f.clone());
        field.validate().unwrap();
        let theta = f.init_params(3);
        let u = [0.3, -0.8];
        let (a, du) = field.eval(&theta, &[0.0], &u, &[]).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(du, f.forward(&theta, &u).unwrap());
    }

    #[test]
    fn frozen_jacobian_gives_one_minus_two_u0() {
        let (a_net, mut theta) = linear_with(1, 2, &[0.0, 1.0], &[1.0, 0.0]);
        let (jac, jp) = linear_with(1, 2, &[0.0, 0.0], &[1.0, -2.0]);
        theta.extend(jp);
        let field = CharacteristicField {
            k: 2,
            n: 1,
            direction: Direction::Learned {
                net: a_net,
                inputs: DirectionInputs {
                    x: false,
                    u: false,
                    cond: true,
                },
            },
            jac_net: jac,
            balance_mode: BalanceMode::UOnly,
        };
        field.validate().unwrap();
        for u0 in [0.0, 1.0, 0.25] {
            let (_, du) = field.eval(&theta, &[0.0, 0.0], &[u0], &[u0]).unwrap();
            assert!((du[0] - (1.0 - 2.0 * u0)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_jacobian_net_gives_zero() {
        let field = CharacteristicField::new(2, 3, &[4], &[4], BalanceMode::Full);
        let mut theta = field.init_params(0);
        let off = field.direction_param_count();
        theta[off..].iter_mut().for_each(|v| *v = 0.0);
        let (_, du) = field
            .eval(&theta, &[0.4, 1.0], &[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3])
            .unwrap();
        assert_eq!(du, vec![0.0; 3]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let field = CharacteristicField::new(2, 3, &[4], &[4], BalanceMode::UOnly);
        let theta = field.init_params(0);
        let err = field
            .eval(&theta, &[0.0, 0.0], &[1.0, 2.0], &[0.0; 3])
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn recorded_field_matches_plain_evaluation() {
        let field = CharacteristicField::new(2, 3, &[5], &[6], BalanceMode::Full);
        let theta = field.init_params(7);
        let (x, u, c) = ([0.2, -0.4], [0.5, 0.1, -0.3], [1.0, -1.0, 0.5]);
        let (a, du) = field.eval(&theta, &x, &u, &c).unwrap();
        let mut tape = Tape::new();
        let (tv, xv, uv, cv) = (
            tape.leaf(&theta),
            tape.leaf(&x),
            tape.leaf(&u),
            tape.leaf(&c),
        );
        let (av, duv, _) = field.record(&mut tape, tv, xv, uv, Some(cv), &[]).unwrap();
        for (p, q) in tape.value(av).iter().zip(&a) {
            assert!((p - q).abs() < 1e-14);
        }
        for (p, q) in tape.value(duv).iter().zip(&du) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn u_tangents_match_finite_differences() {
        let field = CharacteristicField::new(2, 3, &[5], &[6], BalanceMode::Full);
        let theta = field.init_params(11);
        let (x, u, c) = ([0.2, -0.4], [0.5, 0.1, -0.3], [1.0, -1.0, 0.5]);
        let mut tape = Tape::new();
        let (tv, xv, uv, cv) = (
            tape.leaf(&theta),
            tape.leaf(&x),
            tape.leaf(&u),
            tape.leaf(&c),
        );
        let dirs: Vec<Var> = (0..3)
            .map(|i| {
                let mut e = [0.0; 3];
                e[i] = 1.0;
                tape.constant(&e)
            })
            .collect();
        let (_, _, tangents) = field
            .record(&mut tape, tv, xv, uv, Some(cv), &dirs)
            .unwrap();
        let h = 1e-6;
        for (i, t) in tangents.iter().enumerate() {
            let (mut up, mut um) = (u, u);
            up[i] += h;
            um[i] -= h;
            let fp = field.eval(&theta, &x, &up, &c).unwrap().1;
            let fm = field.eval(&theta, &x, &um, &c).unwrap().1;
            for r in 0..3 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((fd - tape.value(*t)[r]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn u_only_cross_derivatives_vanish() {
        // With J independent of x, ∂J_{ri}/∂x_j = 0 at every point.
        use rand::{Rng, SeedableRng};
        let field = CharacteristicField::new(3, 2, &[4], &[6], BalanceMode::UOnly);
        let theta = field.init_params(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            for j in 0..3 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let jp = field.jacobian_at(&theta, &xp, &u).unwrap();
                let jm = field.jacobian_at(&theta, &xm, &u).unwrap();
                assert!(jp
                    .iter()
                    .zip(&jm)
                    .all(|(p, m)| ((p - m) / (2.0 * h)).abs() == 0.0));
            }
        }
    }
}
