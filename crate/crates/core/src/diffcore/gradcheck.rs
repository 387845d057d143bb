//! Finite-difference verification of every differentiable tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::mlp::MlpSpec;
use crate::diffcore::tape::{Tape, Var};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that vanishing
/// derivatives are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Builder = fn(&mut Tape, &[Var]) -> Var;

struct Case {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Vec<f64>>,
    build: Builder,
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Values bounded away from zero so relu kinks stay outside the stencil.
fn randv_nonzero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            inputs: |r| vec![randv(r, 4), randv(r, 4)],
            build: |t, v| t.add(v[0], v[1]),
        },
        Case {
            name: "sub",
            inputs: |r| vec![randv(r, 4), randv(r, 4)],
            build: |t, v| t.sub(v[0], v[1]),
        },
        Case {
            name: "mul",
            inputs: |r| vec![randv(r, 4), randv(r, 4)],
            build: |t, v| t.mul(v[0], v[1]),
        },
        Case {
            name: "scale",
            inputs: |r| vec![randv(r, 3)],
            build: |t, v| t.scale(v[0], -1.7),
        },
        Case {
            name: "affine",
            // 3x4 weights + 3 bias, input 4
            inputs: |r| vec![randv(r, 15), randv(r, 4)],
            build: |t, v| t.affine(v[0], 0, Some(12), 3, 4, v[1]),
        },
        Case {
            name: "matvec",
            inputs: |r| vec![randv(r, 6), randv(r, 3)],
            build: |t, v| t.matvec(v[0], v[1], 2, 3),
        },
        Case {
            name: "tanh",
            inputs: |r| vec![randv(r, 5)],
            build: |t, v| t.tanh(v[0]),
        },
        Case {
            name: "relu",
            inputs: |r| vec![randv_nonzero(r, 5)],
            build: |t, v| t.relu(v[0]),
        },
        Case {
            name: "exp",
            inputs: |r| vec![randv(r, 4)],
            build: |t, v| t.exp(v[0]),
        },
        Case {
            name: "tanh_tangent",
            inputs: |r| vec![randv(r, 4), randv(r, 4)],
            build: |t, v| t.tanh_tangent(v[0], v[1]),
        },
        Case {
            name: "relu_tangent",
            inputs: |r| vec![randv_nonzero(r, 4), randv(r, 4)],
            build: |t, v| t.relu_tangent(v[0], v[1]),
        },
        Case {
            name: "sum",
            inputs: |r| vec![randv(r, 5)],
            build: |t, v| t.sum(v[0]),
        },
        Case {
            name: "dot",
            inputs: |r| vec![randv(r, 5), randv(r, 5)],
            build: |t, v| t.dot(v[0], v[1]),
        },
        Case {
            name: "slice",
            inputs: |r| vec![randv(r, 6)],
            build: |t, v| t.slice(v[0], 2, 3),
        },
        Case {
            name: "concat",
            inputs: |r| vec![randv(r, 2), randv(r, 3)],
            build: |t, v| t.concat(&[v[0], v[1]]),
        },
        Case {
            name: "softmax",
            inputs: |r| vec![randv(r, 4)],
            build: |t, v| t.softmax(v[0]),
        },
        Case {
            name: "log_softmax",
            inputs: |r| vec![randv(r, 4)],
            build: |t, v| t.log_softmax(v[0]),
        },
        Case {
            name: "mlp_tanh",
            inputs: |r| {
                let spec = MlpSpec::tanh(vec![3, 5, 2]);
                vec![randv(r, spec.param_count()), randv(r, 3)]
            },
            build: |t, v| {
                MlpSpec::tanh(vec![3, 5, 2])
                    .record(t, v[0], 0, v[1])
                    .expect("static shapes")
            },
        },
    ]
}

/// Scalarizes an op's output with a fixed random cotangent and evaluates it.
fn eval(case: &Case, inputs: &[Vec<f64>], cot: &[f64], grads: Option<&mut Vec<Vec<f64>>>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let y = (case.build)(&mut tape, &vars);
    let c = tape.constant(&cot[..tape.width(y)]);
    let f = tape.dot(y, c);
    let out = tape.scalar(f);
    if let Some(g) = grads {
        tape.backward(f).expect("scalar seed");
        *g = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
    }
    out
}

/// Runs `instances` random checks per primitive and reports the worst
/// relative error between tape gradients and central differences.
pub fn check_primitives(instances: usize, seed: u64) -> Vec<PrimitiveReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let inputs = (case.inputs)(&mut rng);
                let cot = randv(&mut rng, 32);
                let mut grads = Vec::new();
                eval(&case, &inputs, &cot, Some(&mut grads));
                for (k, x) in inputs.iter().enumerate() {
                    for j in 0..x.len() {
                        let mut plus = inputs.clone();
                        plus[k][j] += FD_STEP;
                        let mut minus = inputs.clone();
                        minus[k][j] -= FD_STEP;
                        let fd = (eval(&case, &plus, &cot, None) - eval(&case, &minus, &cot, None))
                            / (2.0 * FD_STEP);
                        worst = worst.max(rel_err(grads[k][j], fd));
                    }
                }
            }
            PrimitiveReport {
                name: case.name,
                instances,
                max_rel_err: worst,
            }
        })
        .collect()
}
