use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

/// How `tr(∂f/∂u)` is computed inside the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEstimator {
    pub mode: TraceMode,
    pub probes: usize,
    pub probe_dist: ProbeDist,
    pub seed: u64,
}

impl TraceEstimator {
    pub fn exact() -> Self {
        Self {
            mode: TraceMode::Exact,
            probes: 1,
            probe_dist: ProbeDist::Rademacher,
            seed: 0,
        }
    }

    pub fn hutchinson(probes: usize, probe_dist: ProbeDist, seed: u64) -> Self {
        Self {
            mode: TraceMode::Hutchinson,
            probes,
            probe_dist,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 {
            return Err(Error::Contract(
                "trace estimator needs at least one probe".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// One probe vector with identity covariance.
pub fn draw_probe<R: Rng>(n: usize, dist: ProbeDist, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| match dist {
            ProbeDist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            ProbeDist::Gaussian => rng.sample(StandardNormal),
        })
        .collect()
}

/// Mean of `εᵀ M ε` over `probes` random probes, with `matvec(ε, out)` writing `M ε`.
pub fn hutchinson_trace<R: Rng>(
    matvec: impl Fn(&[f64], &mut [f64]),
    n: usize,
    probes: usize,
    dist: ProbeDist,
    rng: &mut R,
) -> f64 {
    let mut out = vec![0.0; n];
    let mut total = 0.0;
    for _ in 0..probes {
        let e = draw_probe(n, dist, rng);
        matvec(&e, &mut out);
        total += e.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>();
    }
    total / probes.max(1) as f64
}
