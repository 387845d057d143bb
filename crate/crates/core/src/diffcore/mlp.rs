use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::{dot, Tensor};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Fully connected network. Parameters are laid out layer by layer as a
/// row-major weight matrix `(out × in)` followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            output_activation: OutputActivation::Identity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn tanh(layer_widths: Vec<usize>) -> Self {
        Self::new(layer_widths, Activation::Tanh).expect("invalid layer widths")
    }

    /// Single affine layer with no nonlinearity.
    pub fn linear(n_in: usize, n_out: usize) -> Self {
        Self::new(vec![n_in, n_out], Activation::Identity).expect("invalid layer widths")
    }

    pub fn with_softmax(mut self) -> Self {
        self.output_activation = OutputActivation::Softmax;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract(format!(
                "mlp needs at least two positive layer widths, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_out(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out)
        let mut off = 0;
        self.layer_widths.windows(2).map(move |w| {
            let here = off;
            off += w[0] * w[1] + w[1];
            (here, w[0], w[1])
        })
    }

    fn check(&self, params: &[f64], input_len: usize) -> Result<()> {
        check_len("mlp parameters", self.param_count(), params.len())?;
        check_len("mlp input", self.n_in(), input_len)
    }

    /// Plain evaluation without recording.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check(params, input.len())?;
        let n_layers = self.layer_widths.len() - 1;
        let mut h = input.to_vec();
        let mut next = Vec::new();
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            next.clear();
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            for r in 0..fan_out {
                next.push(dot(&w[r * fan_in..(r + 1) * fan_in], &h) + b[r]);
            }
            if l + 1 < n_layers {
                match self.activation {
                    Activation::Tanh => next.iter_mut().for_each(|z| *z = z.tanh()),
                    Activation::Relu => next.iter_mut().for_each(|z| *z = z.max(0.0)),
                    Activation::Identity => {}
                }
            }
            std::mem::swap(&mut h, &mut next);
        }
        if self.output_activation == OutputActivation::Softmax {
            softmax_in_place(&mut h);
        }
        Ok(h)
    }

    pub fn forward_tensor(&self, params: &[f64], input: &Tensor) -> Result<Tensor> {
        Ok(Tensor::vector(self.forward(params, input.data())?))
    }

    /// Records the forward pass on `tape`. The parameters occupy
    /// `p[offset..offset + param_count]`.
    pub fn record(&self, tape: &mut Tape, p: Var, offset: usize, input: Var) -> Result<Var> {
        Ok(self.record_with_tangents(tape, p, offset, input, &[])?.0)
    }

    /// Records the forward pass together with forward-mode tangents of the
    /// output along each input direction in `tangents`. Tangents are built
    /// from ordinary tape ops, so they can be differentiated again by
    /// [`Tape::backward`].
    pub fn record_with_tangents(
        &self,
        tape: &mut Tape,
        p: Var,
        offset: usize,
        input: Var,
        tangents: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        check_len("mlp input", self.n_in(), tape.width(input))?;
        if tape.width(p) < offset + self.param_count() {
            return Err(Error::dim(
                "mlp parameters",
                offset + self.param_count(),
                tape.width(p),
            ));
        }
        for &t in tangents {
            check_len("mlp input tangent", self.n_in(), tape.width(t))?;
        }
        if !tangents.is_empty() && self.output_activation != OutputActivation::Identity {
            return Err(Error::Contract(
                "tangents are only propagated through identity output layers".into(),
            ));
        }
        let n_layers = self.layer_widths.len() - 1;
        let mut h = input;
        let mut dh: Vec<Var> = tangents.to_vec();
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let w_off = offset + off;
            let b_off = w_off + fan_in * fan_out;
            let z = tape.affine(p, w_off, Some(b_off), fan_out, fan_in, h);
            let mut dz: Vec<Var> = dh
                .iter()
                .map(|&t| tape.affine(p, w_off, None, fan_out, fan_in, t))
                .collect();
            if l + 1 < n_layers {
                match self.activation {
                    Activation::Tanh => {
                        let y = tape.tanh(z);
                        dz = dz.into_iter().map(|t| tape.tanh_tangent(y, t)).collect();
                        h = y;
                    }
                    Activation::Relu => {
                        let y = tape.relu(z);
                        dz = dz.into_iter().map(|t| tape.relu_tangent(z, t)).collect();
                        h = y;
                    }
                    Activation::Identity => h = z,
                }
            } else {
                h = z;
            }
            dh = dz;
        }
        if self.output_activation == OutputActivation::Softmax {
            h = tape.softmax(h);
        }
        Ok((h, dh))
    }

    /// `∂output/∂input` as an `n_out × n_in` tensor, one reverse pass per output.
    pub fn jacobian(&self, params: &[f64], input: &[f64]) -> Result<Tensor> {
        self.check(params, input.len())?;
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let mut tape = Tape::new();
        let p = tape.constant(params);
        let x = tape.leaf(input);
        let y = self.record(&mut tape, p, 0, x)?;
        let mut rows = Vec::with_capacity(n_in * n_out);
        let mut seed = vec![0.0; n_out];
        for i in 0..n_out {
            seed.iter_mut().for_each(|s| *s = 0.0);
            seed[i] = 1.0;
            tape.backward_with(y, &seed)?;
            rows.extend_from_slice(tape.grad(x));
        }
        Tensor::matrix(n_out, n_in, rows)
    }

    /// Glorot-uniform weights, zero biases; reproducible for a fixed seed.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_params_with(&mut rng)
    }

    pub fn init_params_with<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, fan_in, fan_out) in self.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                out.push(rng.random_range(-bound..bound));
            }
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}
