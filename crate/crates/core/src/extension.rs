//! Machinery shared by both observers: the open-loop speed/angle extension,
//! the rotation that parameterizes `(sin, cos)(delta - theta_t)` by two
//! constants, the measurable matrix `W` mapping those constants to
//! `(E_q', E_d')`, and the `w` signals used by the partial-input observer.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DerivedConsts, GenParams, PmuSample};

/// State of the extension `v1' = v2`, `v2' = -a0 v2 + b0 (u1 - P_t) - b3 I_t^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtensionState {
    pub v1: f64,
    pub v2: f64,
}

pub fn extension_rhs(
    v: &ExtensionState,
    u1: f64,
    i_t: f64,
    p_t: f64,
    dc: &DerivedConsts,
) -> ExtensionState {
    ExtensionState {
        v1: v.v2,
        v2: -dc.a0 * v.v2 + dc.b0 * (u1 - p_t) - dc.b3 * i_t * i_t,
    }
}

/// Rotor-angle offset `theta0` and `(theta1, theta2) = (sin, cos)(theta0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaTriple {
    theta0: f64,
    theta1: f64,
    theta2: f64,
}

impl ThetaTriple {
    pub const UNIT_TOL: f64 = 1e-9;

    pub fn from_angle(theta0: f64) -> Self {
        let (s, c) = theta0.sin_cos();
        Self {
            theta0,
            theta1: s,
            theta2: c,
        }
    }

    /// Build from `(theta1, theta2)`; rejects pairs off the unit circle.
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        let n2 = theta1 * theta1 + theta2 * theta2;
        if (n2 - 1.0).abs() > Self::UNIT_TOL {
            return Err(Error::NotUnitNorm(n2));
        }
        Ok(Self {
            theta0: theta1.atan2(theta2),
            theta1,
            theta2,
        })
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn theta1(&self) -> f64 {
        self.theta1
    }

    pub fn theta2(&self) -> f64 {
        self.theta2
    }

    pub fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.theta1, self.theta2)
    }
}

/// `exp(-J alpha)` with `J = [[0, -1], [1, 0]]` and `alpha = v1 - theta_t`.
pub fn rotation(v1: f64, theta_t: f64) -> Matrix2<f64> {
    let (s, c) = (v1 - theta_t).sin_cos();
    Matrix2::new(c, s, -s, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WMatrix(pub Matrix2<f64>);

impl WMatrix {
    /// `[E_q'; E_d']` for a given parameter pair.
    pub fn apply(&self, theta: Vector2<f64>) -> Vector2<f64> {
        self.0 * theta
    }
}

fn check_voltage(y: &PmuSample) -> Result<()> {
    if !(y.v_t > 0.0) {
        return Err(Error::NonPositiveVoltage(y.v_t));
    }
    Ok(())
}

pub fn w_matrix(v1: f64, y: &PmuSample, p: &GenParams) -> Result<WMatrix> {
    check_voltage(y)?;
    let (r, xd, xq) = (p.r, p.x_dp, p.x_qp);
    let (v2, pt, qt) = (y.v_t * y.v_t, y.p_t, y.q_t);
    let pre = Matrix2::new(
        -r * qt + xd * pt,
        r * pt + xd * qt + v2,
        r * pt + xq * qt + v2,
        r * qt - xq * pt,
    ) / y.v_t;
    Ok(WMatrix(pre * rotation(v1, y.theta_t)))
}

/// Matrix multiplying `(sin, cos)(delta - theta_t)` in `W` before rotation.
/// Its determinant decides whether `W` is invertible.
pub fn w_prerotation_det(y: &PmuSample, p: &GenParams) -> f64 {
    let (r, xd, xq) = (p.r, p.x_dp, p.x_qp);
    let (v2, pt, qt) = (y.v_t * y.v_t, y.p_t, y.q_t);
    ((-r * qt + xd * pt) * (r * qt - xq * pt) - (r * pt + xd * qt + v2) * (r * pt + xq * qt + v2))
        / v2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WSignals {
    pub w1: Vector2<f64>,
    pub w2: Vector2<f64>,
    pub w3: Vector2<f64>,
}

pub fn w_signals(v1: f64, y: &PmuSample, p: &GenParams) -> Result<WSignals> {
    check_voltage(y)?;
    let fwd = rotation(v1, y.theta_t).transpose();
    let w1 = fwd * Vector2::new(-y.q_t, y.p_t) / y.v_t;
    let w2 = fwd * Vector2::new(y.p_t, y.q_t) / y.v_t;
    let w3 = fwd * Vector2::new(y.v_t, 0.0) - p.x_qp * w1 + p.r * w2;
    Ok(WSignals { w1, w2, w3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::sample_params;
    use crate::model::{currents_from_internal, derive_consts, dq_voltages};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Consistent snapshot: measurements generated from internal states via
    /// the stator relation.
    fn snapshot(delta: f64, eqp: f64, edp: f64, theta_t: f64, v_t: f64) -> PmuSample {
        let p = sample_params();
        let i = currents_from_internal(delta, eqp, edp, theta_t, v_t, &p).unwrap();
        let v = dq_voltages(delta, theta_t, v_t);
        crate::model::terminal_sample(0.0, delta, v, i)
    }

    #[test]
    fn extension_at_rest() {
        let dc = derive_consts(&sample_params()).unwrap();
        let d = extension_rhs(&ExtensionState::default(), 0.7, 0.0, 0.7, &dc);
        assert_eq!(d, ExtensionState { v1: 0.0, v2: 0.0 });
    }

    #[test]
    fn extension_speed_tends_to_forcing_over_damping() {
        let dc = derive_consts(&sample_params()).unwrap();
        let (u1, pt) = (0.9, 0.8);
        let mut v = ExtensionState::default();
        let h = 1e-3;
        for _ in 0..20_000 {
            let mut x = [v.v1, v.v2];
            let mut f = |_t: f64, s: &[f64], d: &mut [f64]| -> std::result::Result<(), ()> {
                let r = extension_rhs(&ExtensionState { v1: s[0], v2: s[1] }, u1, 0.0, pt, &dc);
                d[0] = r.v1;
                d[1] = r.v2;
                Ok(())
            };
            crate::ode::rk4_step(&mut f, 0.0, &mut x, h).unwrap();
            v = ExtensionState { v1: x[0], v2: x[1] };
        }
        let limit = dc.b0 * (u1 - pt) / dc.a0;
        assert!(
            (v.v2 - limit).abs() < 1e-6 * limit.abs(),
            "{} vs {limit}",
            v.v2
        );
    }

    #[test]
    fn rotation_special_angles() {
        assert_eq!(rotation(0.3, 0.3), Matrix2::identity());
        let r = rotation(FRAC_PI_2, 0.0);
        assert!((r - Matrix2::new(0.0, 1.0, -1.0, 0.0)).norm() < 1e-15);
        let prod = rotation(0.7, 0.0) * rotation(-0.7, 0.0);
        assert!((prod - Matrix2::identity()).norm() < 1e-15);
    }

    #[test]
    fn theta_triple_rejects_off_circle() {
        assert!(ThetaTriple::new(0.6, 0.8).is_ok());
        assert!(matches!(
            ThetaTriple::new(0.6, 0.9),
            Err(Error::NotUnitNorm(_))
        ));
        let t = ThetaTriple::from_angle(-2.5);
        assert!((t.theta1().powi(2) + t.theta2().powi(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w_matrix_collapses_at_no_flow() {
        let p = GenParams {
            r: 0.0,
            ..sample_params()
        };
        let y = PmuSample {
            theta_t: 0.4,
            v_t: 1.1,
            ..Default::default()
        };
        let w = w_matrix(0.4, &y, &p).unwrap();
        assert!((w.0 - Matrix2::new(0.0, 1.1, 1.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn w_matrix_rejects_zero_voltage() {
        let y = PmuSample::default();
        assert!(w_matrix(0.0, &y, &sample_params()).is_err());
        assert!(w_signals(0.0, &y, &sample_params()).is_err());
    }

    #[test]
    fn w_signals_at_no_flow() {
        let p = sample_params();
        let y = PmuSample {
            theta_t: -0.2,
            v_t: 0.98,
            ..Default::default()
        };
        let w = w_signals(0.5, &y, &p).unwrap();
        assert_eq!(w.w1, Vector2::zeros());
        assert_eq!(w.w2, Vector2::zeros());
        let expected = rotation(0.5, -0.2).transpose() * Vector2::new(0.98, 0.0);
        assert!((w.w3 - expected).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_parameterizes_shifted_sin_cos(alpha in -2.0 * PI..2.0 * PI, theta0 in -2.0 * PI..2.0 * PI) {
            let lhs = Vector2::new((alpha + theta0).sin(), (alpha + theta0).cos());
            let rhs = rotation(alpha, 0.0) * Vector2::new(theta0.sin(), theta0.cos());
            prop_assert!((lhs - rhs).norm() < 1e-14);
        }

        #[test]
        fn w_identities_on_consistent_snapshots(
            delta in -3.0f64..3.0,
            eqp in 0.7f64..1.4,
            edp in -0.4f64..0.6,
            theta_t in -3.0f64..3.0,
            v_t in 0.8f64..1.2,
            v1 in -10.0f64..10.0,
        ) {
            let p = sample_params();
            let y = snapshot(delta, eqp, edp, theta_t, v_t);
            let theta = ThetaTriple::from_angle(delta - v1);
            let w = w_matrix(v1, &y, &p).unwrap();
            let x = w.apply(theta.vector());
            prop_assert!((x[0] - eqp).abs() < 1e-10 && (x[1] - edp).abs() < 1e-10);

            let shifted = w_matrix(v1 + 2.0 * PI, &y, &p).unwrap();
            prop_assert!((shifted.0 - w.0).norm() < 1e-13);

            let i = currents_from_internal(delta, eqp, edp, y.theta_t, y.v_t, &p).unwrap();
            let s = w_signals(v1, &y, &p).unwrap();
            prop_assert!((s.w1.dot(&theta.vector()) - i.q).abs() < 1e-10);
            prop_assert!((s.w2.dot(&theta.vector()) - i.d).abs() < 1e-10);
            prop_assert!((s.w3.dot(&theta.vector()) - edp).abs() < 1e-10);
        }
    }
}
