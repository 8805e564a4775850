//! Load fluctuation processes: a clipped Ornstein-Uhlenbeck perturbation of
//! each load admittance plus scheduled step changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    pub t: f64,
    /// Relative change of the load scale (0.05 is +5 %).
    pub delta: f64,
    /// Affected load index; all loads when absent.
    #[serde(default)]
    pub load: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadFluctuation {
    /// Bound on the magnitude of the stochastic part of the scale.
    #[serde(default)]
    pub amplitude: f64,
    /// Diffusion coefficient of the OU process.
    #[serde(default)]
    pub sigma: f64,
    /// Mean-reversion rate (1/s).
    #[serde(default = "default_reversion")]
    pub reversion: f64,
    #[serde(default)]
    pub steps: Vec<LoadStep>,
}

fn default_reversion() -> f64 {
    1.0
}

impl Default for LoadFluctuation {
    fn default() -> Self {
        Self {
            amplitude: 0.0,
            sigma: 0.0,
            reversion: default_reversion(),
            steps: Vec::new(),
        }
    }
}

impl LoadFluctuation {
    pub fn validate(&self, n_loads: usize) -> Result<()> {
        if !(self.amplitude >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "amplitude",
                reason: format!("must be nonnegative, got {}", self.amplitude),
            });
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: format!("must be nonnegative, got {}", self.sigma),
            });
        }
        if !(self.reversion > 0.0) {
            return Err(Error::InvalidParameter {
                name: "reversion",
                reason: format!("must be positive, got {}", self.reversion),
            });
        }
        for s in &self.steps {
            if let Some(l) = s.load {
                if l >= n_loads {
                    return Err(Error::Config(format!(
                        "load step refers to load {l}, only {n_loads} defined"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load scale factors sampled on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadPath {
    /// `ou[l][k]`: clipped stochastic part of load `l` at grid point `k`.
    ou: Vec<Vec<f64>>,
    /// `offset[l][k]`: step offsets active during step `k`.
    offset: Vec<Vec<f64>>,
}

impl LoadPath {
    pub fn n_loads(&self) -> usize {
        self.ou.len()
    }

    /// Scale of load `l` at `t = (k + frac) h`. The stochastic part is
    /// interpolated linearly; steps are constant across a step interval.
    pub fn scale(&self, l: usize, k: usize, frac: f64) -> f64 {
        let ou = &self.ou[l];
        let last = ou.len() - 1;
        let (k0, k1) = (k.min(last), (k + 1).min(last));
        let stochastic = ou[k0] + frac * (ou[k1] - ou[k0]);
        1.0 + stochastic + self.offset[l][k.min(self.offset[l].len() - 1)]
    }

    pub fn scales(&self, k: usize, frac: f64) -> Vec<f64> {
        (0..self.n_loads())
            .map(|l| self.scale(l, k, frac))
            .collect()
    }
}

/// Generate the load path for `n_loads` loads over `n_steps` steps of size `h`.
pub fn load_fluctuation(
    spec: &LoadFluctuation,
    n_loads: usize,
    h: f64,
    n_steps: usize,
    seed: u64,
) -> LoadPath {
    let decay = (-spec.reversion * h).exp();
    let spread = spec.sigma * ((1.0 - decay * decay) / (2.0 * spec.reversion)).sqrt();
    let mut ou = Vec::with_capacity(n_loads);
    let mut offset = Vec::with_capacity(n_loads);
    for l in 0..n_loads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + l as u64);
        let mut x = 0.0f64;
        let mut path = Vec::with_capacity(n_steps + 1);
        for _ in 0..=n_steps {
            path.push(x.clamp(-spec.amplitude, spec.amplitude));
            if spread > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                x = x * decay + spread * n;
            }
        }
        ou.push(path);

        let mut steps = vec![0.0; n_steps + 1];
        for s in spec.steps.iter().filter(|s| s.load.is_none_or(|i| i == l)) {
            let first = (s.t / h - 1e-9).ceil().max(0.0) as usize;
            for v in steps.iter_mut().skip(first) {
                *v += s.delta;
            }
        }
        offset.push(steps);
    }
    LoadPath { ou, offset }
}

impl LoadPath {
    /// Raw stochastic samples of load `l` on the grid (diagnostics).
    pub fn stochastic(&self, l: usize) -> &[f64] {
        &self.ou[l]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_constant() {
        let spec = LoadFluctuation {
            amplitude: 0.0,
            sigma: 0.05,
            ..Default::default()
        };
        let path = load_fluctuation(&spec, 2, 0.01, 500, 3);
        for k in 0..500 {
            assert_eq!(path.scale(0, k, 0.5), 1.0);
            assert_eq!(path.scale(1, k, 0.0), 1.0);
        }
    }

    #[test]
    fn step_changes_exactly_once() {
        let spec = LoadFluctuation {
            steps: vec![LoadStep {
                t: 1.0,
                delta: 0.05,
                load: None,
            }],
            ..Default::default()
        };
        let h = 0.001;
        let path = load_fluctuation(&spec, 1, h, 3000, 0);
        let values: Vec<f64> = (0..3000).map(|k| path.scale(0, k, 0.0)).collect();
        let changes = values.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 1);
        assert_eq!(values[999], 1.0);
        assert_eq!(values[1000], 1.05);
    }

    #[test]
    fn ou_stationary_variance() {
        let spec = LoadFluctuation {
            amplitude: 10.0,
            sigma: 0.02,
            reversion: 1.0,
            steps: vec![],
        };
        let h = 0.01;
        let n = 400_000;
        let path = load_fluctuation(&spec, 1, h, n, 99);
        let burn = 1000;
        let xs = &path.stochastic(0)[burn..];
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let expected = 0.02f64.powi(2) / 2.0;
        assert!(
            (var / expected - 1.0).abs() < 0.2,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn amplitude_bounds_the_perturbation() {
        let spec = LoadFluctuation {
            amplitude: 0.02,
            sigma: 0.1,
            reversion: 0.5,
            steps: vec![],
        };
        let path = load_fluctuation(&spec, 1, 0.01, 10_000, 5);
        assert!(path.stochastic(0).iter().all(|x| x.abs() <= 0.02));
    }

    #[test]
    fn seeded_paths_repeat() {
        let spec = LoadFluctuation {
            amplitude: 1.0,
            sigma: 0.02,
            ..Default::default()
        };
        let a = load_fluctuation(&spec, 2, 0.01, 1000, 42);
        let b = load_fluctuation(&spec, 2, 0.01, 1000, 42);
        let c = load_fluctuation(&spec, 2, 0.01, 1000, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.stochastic(0), a.stochastic(1));
    }
}
