//! Least-squares estimator with forgetting on the extended parameter
//! `[theta1, theta2, G(theta)]`, followed by determinant/adjugate mixing and
//! scalar gradient updates for `theta1` and `theta2`.

use nalgebra::{Matrix4, Matrix5, SymmetricEigen, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::rk4_step;
use crate::regression::{g0_map, RegressorSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub gamma_g: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Inverse of the initial covariance scale, `F(0) = I / f0`.
    pub f0: f64,
    pub chi0: f64,
    /// Covariance norm ceiling for the forgetting factor.
    pub k: f64,
    /// Lower bound on `|theta2_hat|`.
    pub theta2_bound: f64,
    /// Known sign of `theta2` (`+1` or `-1`).
    pub theta2_sign: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gamma_g: 50.0,
            gamma1: 100.0,
            gamma2: 100.0,
            f0: 10.0,
            chi0: 0.5,
            k: 1.0,
            theta2_bound: 0.1,
            theta2_sign: 1.0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma_g", self.gamma_g),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("f0", self.f0),
            ("chi0", self.chi0),
            ("theta2_bound", self.theta2_bound),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if !(self.k >= 1.0 / self.f0) || !self.k.is_finite() {
            return Err(Error::InvalidParameter {
                name: "k",
                reason: format!("must be at least 1/f0 = {}, got {}", 1.0 / self.f0, self.k),
            });
        }
        if self.theta2_sign != 1.0 && self.theta2_sign != -1.0 {
            return Err(Error::InvalidParameter {
                name: "theta2_sign",
                reason: format!("must be +1 or -1, got {}", self.theta2_sign),
            });
        }
        if self.theta2_bound >= 1.0 {
            return Err(Error::InvalidParameter {
                name: "theta2_bound",
                reason: format!("must be below 1, got {}", self.theta2_bound),
            });
        }
        Ok(())
    }

    /// Clip `theta2` onto `{sign * theta2 >= bound}`.
    pub fn project(&self, theta2: f64) -> f64 {
        if self.theta2_sign * theta2 < self.theta2_bound {
            self.theta2_sign * self.theta2_bound
        } else {
            theta2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub g0_hat: Vector5<f64>,
    pub f: Matrix5<f64>,
    pub z: f64,
    pub theta1: f64,
    pub theta2: f64,
    /// Initial extended estimate, used as the mixing anchor.
    pub g0_init: Vector5<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedOutputs {
    pub delta: f64,
    pub mixed: Vector5<f64>,
}

/// Raw parameter estimates; `(theta1, theta2)` is not normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
}

/// Tolerance on the smallest eigenvalue of the symmetrized `F`, relative to
/// its largest.
pub const PD_TOL: f64 = -1e-12;

const DIM: usize = 5 + 25 + 1 + 2;

impl EstimatorState {
    /// Start from an initial guess of `(theta1, theta2)`; the extended
    /// estimate is initialized consistently.
    pub fn new(cfg: &EstimatorConfig, theta1: f64, theta2: f64) -> Result<Self> {
        cfg.validate()?;
        let theta2 = cfg.project(theta2);
        let g0 = g0_map(theta1, theta2);
        Ok(Self {
            g0_hat: g0,
            f: Matrix5::identity() / cfg.f0,
            z: 1.0,
            theta1,
            theta2,
            g0_init: g0,
        })
    }

    pub fn mixed_outputs(&self, cfg: &EstimatorConfig) -> MixedOutputs {
        mix(&self.g0_hat, &self.f, self.z, &self.g0_init, cfg.f0)
    }

    pub fn theta_estimates(&self) -> ThetaEstimate {
        ThetaEstimate {
            theta0: self.theta1.atan2(self.theta2),
            theta1: self.theta1,
            theta2: self.theta2,
        }
    }

    pub fn covariance_norm(&self) -> f64 {
        spectral_norm(&self.f)
    }

    pub fn residual(&self, r: &RegressorSample) -> f64 {
        r.output - r.stacked().dot(&self.g0_hat)
    }

    fn pack(&self) -> [f64; DIM] {
        let mut x = [0.0; DIM];
        x[..5].copy_from_slice(self.g0_hat.as_slice());
        x[5..30].copy_from_slice(self.f.as_slice());
        x[30] = self.z;
        x[31] = self.theta1;
        x[32] = self.theta2;
        x
    }

    fn unpack(&mut self, x: &[f64]) {
        self.g0_hat = Vector5::from_column_slice(&x[..5]);
        let f = Matrix5::from_column_slice(&x[5..30]);
        self.f = 0.5 * (f + f.transpose());
        self.z = x[30];
        self.theta1 = x[31];
        self.theta2 = x[32];
    }

    /// Advance by `dt` with the regressor held constant over the step.
    pub fn step(
        &mut self,
        r: &RegressorSample,
        cfg: &EstimatorConfig,
        dt: f64,
    ) -> Result<MixedOutputs> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be positive, got {dt}"),
            });
        }
        if !r.is_finite() {
            return Err(Error::Diverged {
                t: r.t,
                reason: "non-finite regressor sample".into(),
            });
        }
        let psi = r.stacked();
        let out = r.output;
        let anchor = self.g0_init;
        let mut rhs = |_t: f64, x: &[f64], d: &mut [f64]| -> Result<()> {
            let g = Vector5::from_column_slice(&x[..5]);
            let f = Matrix5::from_column_slice(&x[5..30]);
            let z = x[30];
            let fpsi = f * psi;
            let dg = cfg.gamma_g * fpsi * (out - psi.dot(&g));
            let chi = cfg.chi0 * (1.0 - spectral_norm(&f) / cfg.k);
            let df = -cfg.gamma_g * fpsi * fpsi.transpose() + chi * f;
            let m = mix(&g, &f, z, &anchor, cfg.f0);
            d[..5].copy_from_slice(dg.as_slice());
            d[5..30].copy_from_slice(df.as_slice());
            d[30] = -chi * z;
            d[31] = cfg.gamma1 * m.delta * (m.mixed[0] - m.delta * x[31]);
            d[32] = cfg.gamma2 * m.delta * (m.mixed[1] - m.delta * x[32]);
            Ok(())
        };
        let mut x = self.pack();
        rk4_step(&mut rhs, r.t, &mut x, dt)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                t: r.t,
                reason: "estimator state became non-finite".into(),
            });
        }
        self.unpack(&x);
        self.theta2 = cfg.project(self.theta2);

        let eig = SymmetricEigen::new(self.f).eigenvalues;
        if eig.min() <= PD_TOL * eig.max().abs() || eig.min() <= 0.0 {
            return Err(Error::NotPositiveDefinite(eig.min()));
        }
        Ok(self.mixed_outputs(cfg))
    }
}

fn spectral_norm(f: &Matrix5<f64>) -> f64 {
    let sym = 0.5 * (f + f.transpose());
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, e| m.max(e.abs()))
}

fn mix(
    g0_hat: &Vector5<f64>,
    f: &Matrix5<f64>,
    z: f64,
    anchor: &Vector5<f64>,
    f0: f64,
) -> MixedOutputs {
    let zf = z * f0 * f;
    let a = Matrix5::identity() - zf;
    MixedOutputs {
        delta: a.determinant(),
        mixed: adjugate(&a) * (g0_hat - zf * anchor),
    }
}

/// Adjugate by cofactors: `adj(A)[i][j] = (-1)^(i+j) det(minor(A, j, i))`.
pub fn adjugate(a: &Matrix5<f64>) -> Matrix5<f64> {
    let mut adj = Matrix5::zeros();
    for i in 0..5 {
        for j in 0..5 {
            let minor = Matrix4::from_fn(|r, c| {
                let rr = if r < j { r } else { r + 1 };
                let cc = if c < i { c } else { c + 1 };
                a[(rr, cc)]
            });
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            adj[(i, j)] = sign * minor.determinant();
        }
    }
    adj
}
