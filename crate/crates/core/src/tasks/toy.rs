use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cnode::{BalanceMode, CharacteristicField, CnodeModel, Sample};
use crate::diffcore::MlpSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    AnnuliClassification,
    ReflectionMap,
    GaussianMixtureDensity,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annuli_classification" | "annuli" => Ok(Self::AnnuliClassification),
            "reflection_map" | "reflection" => Ok(Self::ReflectionMap),
            "gaussian_mixture_density" | "mixture" => Ok(Self::GaussianMixtureDensity),
            other => Err(Error::Contract(format!("unknown toy task `{other}`"))),
        }
    }
}

/// Inner ring radius 1 and outer radius 2, separated by a 0.25 gap.
pub const ANNULUS_HALF_WIDTH: f64 = 0.375;
/// Mixture component means `(±2, 0)` with unit covariance.
pub const MIXTURE_MEAN: f64 = 2.0;

/// A synthetic dataset. Classification targets are one-hot; density data
/// has empty targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask2D {
    pub kind: ToyKind,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Serialize)]
struct Row {
    v1: f64,
    v2: f64,
    label: f64,
}

impl ToyTask2D {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(z, t)| Sample {
                z: z.clone(),
                target: t.clone(),
            })
            .collect()
    }

    /// Class index for one-hot targets, the regression target otherwise.
    pub fn label(&self, i: usize) -> f64 {
        match self.kind {
            ToyKind::AnnuliClassification => self.targets[i][1],
            ToyKind::ReflectionMap => self.targets[i][0],
            ToyKind::GaussianMixtureDensity => 0.0,
        }
    }

    /// CSV with columns `v1, v2, label`; 1-D inputs leave `v2` at zero.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (i, z) in self.inputs.iter().enumerate() {
            w.serialize(Row {
                v1: z[0],
                v2: z.get(1).copied().unwrap_or(0.0),
                label: self.label(i),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws `size` points of the chosen task. Rings and mixture components are
/// chosen with equal probability.
pub fn gen_toy2d(kind: ToyKind, size: usize, seed: u64) -> ToyTask2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(size);
    let mut targets = Vec::with_capacity(size);
    for _ in 0..size {
        match kind {
            ToyKind::AnnuliClassification => {
                let outer = rng.random::<bool>();
                let centre = if outer { 2.0 } else { 1.0 };
                let r = centre + rng.random_range(-ANNULUS_HALF_WIDTH..=ANNULUS_HALF_WIDTH);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                inputs.push(vec![r * phi.cos(), r * phi.sin()]);
                targets.push(if outer { vec![0.0, 1.0] } else { vec![1.0, 0.0] });
            }
            ToyKind::ReflectionMap => {
                let v = rng.random_range(-1.0..=1.0);
                inputs.push(vec![v]);
                targets.push(vec![-v]);
            }
            ToyKind::GaussianMixtureDensity => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                inputs.push(vec![sign * MIXTURE_MEAN + a, b]);
                targets.push(Vec::new());
            }
        }
    }
    ToyTask2D {
        kind,
        inputs,
        targets,
        seed,
    }
}

/// The pair `0 → 1, 1 → 0`.
pub fn two_point_task() -> Vec<Sample> {
    vec![
        Sample {
            z: vec![0.0],
            target: vec![1.0],
        },
        Sample {
            z: vec![1.0],
            target: vec![0.0],
        },
    ]
}

/// A scalar conditioned C-NODE with `k` characteristic dimensions and no
/// feature or head networks.
pub fn scalar_cnode(k: usize, hidden: usize) -> CnodeModel {
    let field = CharacteristicField::new(k, 1, &[hidden], &[hidden], BalanceMode::UOnly);
    CnodeModel::new(None, field, None).expect("valid scalar model")
}

/// The scalar neural ODE `du/ds = f(u)`.
pub fn scalar_node(hidden: usize) -> CnodeModel {
    let field = CharacteristicField::node(1, MlpSpec::tanh(vec![1, hidden, hidden, 1]));
    CnodeModel::new(None, field, None).expect("valid scalar model")
}
