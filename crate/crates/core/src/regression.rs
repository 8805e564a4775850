//! Regression for `(theta1, theta2)` built from the squared terminal current
//! magnitude: `Y = psi1' theta + psi2' G(theta)` with
//! `G(theta) = (theta1^2, theta2^2, theta1 theta2)`.

use nalgebra::{Matrix5, SymmetricEigen, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::{rotation, w_matrix};
use crate::model::{GenParams, PmuSample};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressorSample {
    pub t: f64,
    /// Measured output, `I_t^2`.
    pub output: f64,
    pub psi1: [f64; 2],
    pub psi2: [f64; 3],
}

impl RegressorSample {
    /// `psi = [psi1; psi2]`.
    pub fn stacked(&self) -> Vector5<f64> {
        Vector5::new(
            self.psi1[0],
            self.psi1[1],
            self.psi2[0],
            self.psi2[1],
            self.psi2[2],
        )
    }

    pub fn predict(&self, theta: Vector2<f64>) -> f64 {
        let g = g_map(theta[0], theta[1]);
        self.psi1[0] * theta[0]
            + self.psi1[1] * theta[1]
            + self.psi2.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn residual(&self, theta: Vector2<f64>) -> f64 {
        self.output - self.predict(theta)
    }

    pub fn is_finite(&self) -> bool {
        self.stacked().iter().all(|v| v.is_finite()) && self.output.is_finite()
    }
}

pub fn g_map(theta1: f64, theta2: f64) -> [f64; 3] {
    [theta1 * theta1, theta2 * theta2, theta1 * theta2]
}

/// Extended parameter `[theta1, theta2, G(theta)]`.
pub fn g0_map(theta1: f64, theta2: f64) -> Vector5<f64> {
    let g = g_map(theta1, theta2);
    Vector5::new(theta1, theta2, g[0], g[1], g[2])
}

/// Closed-form regressor for a lossless stator.
pub fn regressor_closed_form_r0(v1: f64, y: &PmuSample, p: &GenParams) -> Result<RegressorSample> {
    if p.r != 0.0 {
        return Err(Error::NonzeroResistance(p.r));
    }
    if !(y.v_t > 0.0) {
        return Err(Error::NonPositiveVoltage(y.v_t));
    }
    let (sv, cv) = (v1 - y.theta_t).sin_cos();
    let (xd, xq) = (p.x_dp, p.x_qp);
    let (y2, y5, y6) = (y.v_t, y.p_t, y.q_t);
    let v2 = y2 * y2;

    let a1 = xd * y5 * cv - (xd * y6 + v2) * sv;
    let a2 = xd * y5 * sv + (xd * y6 + v2) * cv;
    let a3 = (xq * y6 + v2) * cv + xq * y5 * sv;
    let a4 = (xq * y6 + v2) * sv - xq * y5 * cv;

    let (kd, kq) = (1.0 / (xd * xd), 1.0 / (xq * xq));
    let psi21 = kd * (a1 * a1 / v2 + sv * sv * v2 + 2.0 * a1 * sv)
        + kq * (a3 * a3 / v2 + cv * cv * v2 - 2.0 * a3 * cv);
    let psi22 = kd * (a2 * a2 / v2 + cv * cv * v2 - 2.0 * a2 * cv)
        + kq * (a4 * a4 / v2 + sv * sv * v2 - 2.0 * a4 * sv);
    let psi23 = 2.0
        * (kd * (-a1 * cv + a2 * sv + a1 * a2 / v2 - cv * sv * v2)
            + kq * (-a4 * cv - a3 * sv + a3 * a4 / v2 + cv * sv * v2));

    Ok(RegressorSample {
        t: y.t,
        output: y.i_t * y.i_t,
        psi1: [0.0, 0.0],
        psi2: [psi21, psi22, psi23],
    })
}

/// `I_q^2 + I_d^2` computed from the stator inversion after substituting
/// `(sin, cos)(delta - theta_t) = exp(-J(v1 - theta_t)) theta` and
/// `(E_q', E_d') = W theta`, as a function of a trial `theta`.
pub fn current_sq_model(theta: Vector2<f64>, v1: f64, y: &PmuSample, p: &GenParams) -> Result<f64> {
    let det = p.stator_det();
    if det.abs() < f64::MIN_POSITIVE {
        return Err(Error::SingularMachine(det));
    }
    let sc = rotation(v1, y.theta_t) * theta;
    let (sin_d, cos_d) = (sc[0], sc[1]);
    let x = w_matrix(v1, y, p)?.apply(theta);
    let alpha = x[0] - y.v_t * cos_d;
    let beta = x[1] - y.v_t * sin_d;
    let iq = p.r * alpha - p.x_dp * beta;
    let id = p.r * beta + p.x_qp * alpha;
    Ok((iq * iq + id * id) / (det * det))
}

/// Bound on the constant term left by the coefficient extraction.
pub const CONSTANT_TOL: f64 = 1e-9;

/// Regressor for any stator resistance, extracted from the quadratic
/// polynomial `current_sq_model` by evaluating it at six points.
pub fn regressor_numeric(v1: f64, y: &PmuSample, p: &GenParams) -> Result<RegressorSample> {
    let q = |t1: f64, t2: f64| current_sq_model(Vector2::new(t1, t2), v1, y, p);
    let c0 = q(0.0, 0.0)?;
    let (qp1, qm1) = (q(1.0, 0.0)?, q(-1.0, 0.0)?);
    let (qp2, qm2) = (q(0.0, 1.0)?, q(0.0, -1.0)?);
    let q11 = q(1.0, 1.0)?;

    let l1 = 0.5 * (qp1 - qm1);
    let l2 = 0.5 * (qp2 - qm2);
    let s11 = 0.5 * (qp1 + qm1) - c0;
    let s22 = 0.5 * (qp2 + qm2) - c0;
    let s12 = q11 - c0 - l1 - l2 - s11 - s22;

    if !(c0.abs() < CONSTANT_TOL) {
        return Err(Error::RegressorConstant(c0));
    }
    Ok(RegressorSample {
        t: y.t,
        output: y.i_t * y.i_t,
        psi1: [l1, l2],
        psi2: [s11, s22, s12],
    })
}

/// Running information integral of the stacked regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationMonitor {
    gram: Matrix5<f64>,
    threshold: f64,
    elapsed: f64,
    min_eig: f64,
    t_c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationStatus {
    pub min_eig: f64,
    pub excited: bool,
    pub rank: usize,
    pub t_c: Option<f64>,
}

/// Relative eigenvalue cutoff for the numerical rank of the Gram matrix.
pub const RANK_TOL: f64 = 1e-9;

impl ExcitationMonitor {
    pub const DEFAULT_THRESHOLD: f64 = 1e-6;

    pub fn new(threshold: f64) -> Self {
        Self {
            gram: Matrix5::zeros(),
            threshold,
            elapsed: 0.0,
            min_eig: 0.0,
            t_c: None,
        }
    }

    pub fn gram(&self) -> &Matrix5<f64> {
        &self.gram
    }

    pub fn t_c(&self) -> Option<f64> {
        self.t_c
    }

    pub fn min_eig(&self) -> f64 {
        self.min_eig
    }

    pub fn rank(&self) -> usize {
        let eig = SymmetricEigen::new(self.gram).eigenvalues;
        let top = eig.max();
        if !(top > 0.0) {
            return 0;
        }
        eig.iter().filter(|&&e| e > RANK_TOL * top).count()
    }

    /// Accumulate `psi psi' dt`.
    pub fn update(&mut self, psi: &Vector5<f64>, dt: f64) -> ExcitationStatus {
        self.gram += psi * psi.transpose() * dt;
        self.gram = 0.5 * (self.gram + self.gram.transpose());
        self.elapsed += dt;
        let eig = SymmetricEigen::new(self.gram).eigenvalues;
        self.min_eig = eig.min().max(0.0);
        if self.t_c.is_none() && self.min_eig > self.threshold {
            self.t_c = Some(self.elapsed);
        }
        ExcitationStatus {
            min_eig: self.min_eig,
            excited: self.t_c.is_some(),
            rank: self.rank(),
            t_c: self.t_c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::sample_params;
    use crate::model::{currents_from_internal, dq_voltages, terminal_sample};
    use proptest::prelude::*;

    fn snapshot(
        p: &GenParams,
        delta: f64,
        eqp: f64,
        edp: f64,
        theta_t: f64,
        v_t: f64,
    ) -> PmuSample {
        let i = currents_from_internal(delta, eqp, edp, theta_t, v_t, p).unwrap();
        terminal_sample(0.0, delta, dq_voltages(delta, theta_t, v_t), i)
    }

    #[test]
    fn closed_form_collapses_at_no_flow() {
        let p = GenParams {
            r: 0.0,
            ..sample_params()
        };
        let y = PmuSample {
            theta_t: 0.3,
            v_t: 1.05,
            ..Default::default()
        };
        let r = regressor_closed_form_r0(0.3, &y, &p).unwrap();
        assert_eq!(r.output, 0.0);
        for v in r.psi2 {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_rejects_resistance() {
        let y = PmuSample {
            v_t: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            regressor_closed_form_r0(0.0, &y, &sample_params()),
            Err(Error::NonzeroResistance(_))
        ));
    }

    #[test]
    fn cross_term_is_odd_in_the_rotation_angle() {
        let p = GenParams {
            r: 0.0,
            ..sample_params()
        };
        let y = PmuSample {
            theta_t: 0.0,
            v_t: 1.02,
            ..Default::default()
        };
        let a = regressor_closed_form_r0(0.4, &y, &p).unwrap();
        let b = regressor_closed_form_r0(-0.4, &y, &p).unwrap();
        assert!((a.psi2[2] + b.psi2[2]).abs() < 1e-15);
    }

    #[test]
    fn numeric_constant_term_vanishes() {
        let p = sample_params();
        let y = snapshot(&p, 0.9, 1.1, 0.3, 0.2, 1.01);
        let c0 = current_sq_model(Vector2::zeros(), 0.4, &y, &p).unwrap();
        assert!(c0.abs() < 1e-15);
    }

    #[test]
    fn monitor_stays_silent_without_excitation() {
        let mut m = ExcitationMonitor::new(1e-6);
        for _ in 0..100 {
            let s = m.update(&Vector5::zeros(), 0.01);
            assert_eq!(s.min_eig, 0.0);
            assert!(!s.excited);
            assert_eq!(s.rank, 0);
        }
    }

    #[test]
    fn monitor_orthonormal_cycle_gives_identity() {
        let mut m = ExcitationMonitor::new(0.5);
        let mut status = None;
        for i in 0..5 {
            let mut e = Vector5::zeros();
            e[i] = 1.0;
            status = Some(m.update(&e, 1.0));
        }
        let s = status.unwrap();
        assert!((m.gram() - Matrix5::identity()).norm() < 1e-15);
        assert!((s.min_eig - 1.0).abs() < 1e-12);
        assert_eq!(s.rank, 5);
        assert_eq!(s.t_c, Some(5.0));
    }

    proptest! {
        #[test]
        fn extraction_is_exact_for_the_quadratic(
            delta in -3.0f64..3.0,
            eqp in 0.7f64..1.4,
            edp in -0.4f64..0.6,
            theta_t in -3.0f64..3.0,
            v_t in 0.8f64..1.2,
            v1 in -5.0f64..5.0,
            trial in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 50),
        ) {
            let p = sample_params();
            let y = snapshot(&p, delta, eqp, edp, theta_t, v_t);
            let r = regressor_numeric(v1, &y, &p).unwrap();
            for (a, b) in trial {
                let th = Vector2::new(a, b);
                let direct = current_sq_model(th, v1, &y, &p).unwrap();
                prop_assert!((r.predict(th) - direct).abs() < 1e-12);
            }
            let truth = Vector2::new((delta - v1).sin(), (delta - v1).cos());
            prop_assert!(r.residual(truth).abs() < 1e-9);
        }

        #[test]
        fn numeric_matches_closed_form_when_lossless(
            delta in -3.0f64..3.0,
            eqp in 0.7f64..1.4,
            edp in -0.4f64..0.6,
            theta_t in -3.0f64..3.0,
            v_t in 0.8f64..1.2,
            v1 in -5.0f64..5.0,
        ) {
            let p = GenParams { r: 0.0, ..sample_params() };
            let y = snapshot(&p, delta, eqp, edp, theta_t, v_t);
            let a = regressor_numeric(v1, &y, &p).unwrap();
            let b = regressor_closed_form_r0(v1, &y, &p).unwrap();
            for (u, v) in a.stacked().iter().zip(b.stacked().iter()) {
                prop_assert!((u - v).abs() < 1e-10, "{} vs {}", u, v);
            }
        }

        #[test]
        fn regressor_reduces_to_apparent_current(
            delta in -3.0f64..3.0,
            eqp in 0.7f64..1.4,
            edp in -0.4f64..0.6,
            theta_t in -3.0f64..3.0,
            v_t in 0.8f64..1.2,
            v1 in -5.0f64..5.0,
            r in 0.0f64..0.05,
        ) {
            // I_t^2 = (P^2 + Q^2) / V^2 and theta is a unit vector, so the
            // quadratic collapses onto theta1^2 + theta2^2.
            let p = GenParams { r, ..sample_params() };
            let y = snapshot(&p, delta, eqp, edp, theta_t, v_t);
            let s = regressor_numeric(v1, &y, &p).unwrap();
            let k = (y.p_t * y.p_t + y.q_t * y.q_t) / (y.v_t * y.v_t);
            let expected = [0.0, 0.0, k, k, 0.0];
            for (u, v) in s.stacked().iter().zip(expected) {
                prop_assert!((u - v).abs() < 1e-10, "{} vs {}", u, v);
            }
        }

        #[test]
        fn monitor_min_eig_is_monotone(rows in proptest::collection::vec(proptest::array::uniform5(-1.0f64..1.0), 1..40)) {
            let mut m = ExcitationMonitor::new(1e-6);
            let mut last = 0.0;
            for r in rows {
                let s = m.update(&Vector5::from_column_slice(&r), 0.1);
                prop_assert!(s.min_eig >= last - 1e-12);
                last = s.min_eig;
            }
        }
    }
}
