//! Two-axis synchronous generator with AVR and PSS, and the algebraic
//! relations linking its internal states to terminal phasor measurements.
//!
//! Conventions: electrical quantities in per unit, angles in rad (unwrapped),
//! speed deviation in rad/s, time in s. The machine frame is oriented so
//! that `V_q = V_t cos(delta - theta_t)` and `V_d = V_t sin(delta - theta_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and control constants of one generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    /// Inertia constant (s).
    pub h: f64,
    /// Damping, per unit power per rad/s of speed deviation.
    pub d: f64,
    pub t_d0p: f64,
    pub t_q0p: f64,
    pub x_d: f64,
    pub x_dp: f64,
    pub x_q: f64,
    pub x_qp: f64,
    /// Stator resistance.
    pub r: f64,
    /// Synchronous speed (rad/s).
    pub omega0: f64,
    pub k_a: f64,
    pub t_a: f64,
    pub t_b: f64,
    pub t_c: f64,
    /// Voltage reference. Overwritten by equilibrium initialization.
    #[serde(default = "default_v_ref")]
    pub v_ref: f64,
    pub k_p: f64,
    pub t_w: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
}

fn default_v_ref() -> f64 {
    1.0
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("omega0", self.omega0),
            ("t_d0p", self.t_d0p),
            ("t_q0p", self.t_q0p),
            ("t_a", self.t_a),
            ("t_b", self.t_b),
            ("t_w", self.t_w),
            ("t2", self.t2),
            ("t4", self.t4),
            ("x_dp", self.x_dp),
            ("x_qp", self.x_qp),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be strictly positive, got {value}"),
                });
            }
        }
        let nonneg = [
            ("r", self.r),
            ("d", self.d),
            ("t_c", self.t_c),
            ("t1", self.t1),
            ("t3", self.t3),
        ];
        for (name, value) in nonneg {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be nonnegative, got {value}"),
                });
            }
        }
        if self.x_d < self.x_dp {
            return Err(Error::InvalidParameter {
                name: "x_d",
                reason: format!("x_d = {} < x_dp = {}", self.x_d, self.x_dp),
            });
        }
        if self.x_q < self.x_qp {
            return Err(Error::InvalidParameter {
                name: "x_q",
                reason: format!("x_q = {} < x_qp = {}", self.x_q, self.x_qp),
            });
        }
        for (name, value) in [("k_a", self.k_a), ("k_p", self.k_p), ("v_ref", self.v_ref)] {
            if !value.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(())
    }

    /// `R^2 + X_d' X_q'`, the determinant of the stator impedance matrix.
    pub fn stator_det(&self) -> f64 {
        self.r * self.r + self.x_dp * self.x_qp
    }
}

/// Rate constants of the reduced model and the PSS realization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConsts {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    /// Constant term `1/(T_w T_2 T_4)` of the PSS denominator.
    pub c6: f64,
}

pub fn derive_consts(p: &GenParams) -> Result<DerivedConsts> {
    for (name, value) in [
        ("h", p.h),
        ("t_d0p", p.t_d0p),
        ("t_q0p", p.t_q0p),
        ("omega0", p.omega0),
    ] {
        if !(value > 0.0) {
            return Err(Error::InvalidParameter {
                name,
                reason: format!("must be strictly positive, got {value}"),
            });
        }
    }
    let two_h = 2.0 * p.h;
    let (tw, t2, t4) = (p.t_w, p.t2, p.t4);
    let den = tw * t4 * t2;
    Ok(DerivedConsts {
        a0: p.d * p.omega0 / two_h,
        a1: 1.0 / p.t_d0p,
        a2: 1.0 / p.t_q0p,
        b0: p.omega0 / two_h,
        b1: (p.x_d - p.x_dp) / p.t_d0p,
        b2: (p.x_q - p.x_qp) / p.t_q0p,
        b3: p.omega0 * p.r / two_h,
        c1: (t4 * tw + t4 * t2 + t2 * tw) / den,
        c2: (tw + t4 + t2) / den,
        c3: p.k_p * p.t1 * p.t3 / (t2 * t4),
        c4: p.k_p * (p.t1 + p.t3) / (t2 * t4),
        c5: p.k_p / (t2 * t4),
        c6: 1.0 / den,
    })
}

/// Full simulated generator state: mechanical and electrical states plus
/// AVR (`q`, `ef`) and PSS (`p1..p3`) auxiliaries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub delta: f64,
    pub omega: f64,
    pub eqp: f64,
    pub edp: f64,
    pub q: f64,
    pub ef: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

impl PlantState {
    pub const DIM: usize = 9;

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.delta, self.omega, self.eqp, self.edp, self.q, self.ef, self.p1, self.p2, self.p3,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            delta: x[0],
            omega: x[1],
            eqp: x[2],
            edp: x[3],
            q: x[4],
            ef: x[5],
            p1: x[6],
            p2: x[7],
            p3: x[8],
        }
    }

    /// The four machine states `(delta, omega, E_q', E_d')`.
    pub fn machine(&self) -> [f64; 4] {
        [self.delta, self.omega, self.eqp, self.edp]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// One PMU frame `y = (theta_t, V_t, phi_t, I_t, P_t, Q_t)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PmuSample {
    pub t: f64,
    pub theta_t: f64,
    pub v_t: f64,
    pub phi_t: f64,
    pub i_t: f64,
    pub p_t: f64,
    pub q_t: f64,
}

impl PmuSample {
    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.theta_t,
            self.v_t,
            self.phi_t,
            self.i_t,
            self.p_t,
            self.q_t,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// A (q, d) pair of machine-frame components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DqPair {
    pub q: f64,
    pub d: f64,
}

impl DqPair {
    pub fn new(q: f64, d: f64) -> Self {
        Self { q, d }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.q * self.q + self.d * self.d
    }
}

pub fn dq_voltages(delta: f64, theta_t: f64, v_t: f64) -> DqPair {
    let (s, c) = (delta - theta_t).sin_cos();
    DqPair::new(v_t * c, v_t * s)
}

/// Stator currents from the internal voltages by inverting
/// `V = E' - [[R, X_d'], [-X_q', R]] I`.
pub fn currents_from_internal(
    delta: f64,
    eqp: f64,
    edp: f64,
    theta_t: f64,
    v_t: f64,
    p: &GenParams,
) -> Result<DqPair> {
    let det = p.stator_det();
    if det.abs() < f64::MIN_POSITIVE || !det.is_finite() {
        return Err(Error::SingularMachine(det));
    }
    let v = dq_voltages(delta, theta_t, v_t);
    let (alpha, beta) = (eqp - v.q, edp - v.d);
    Ok(DqPair::new(
        (p.r * alpha - p.x_dp * beta) / det,
        (p.x_qp * alpha + p.r * beta) / det,
    ))
}

/// Stator currents from measured active and reactive power.
pub fn currents_from_power(delta: f64, y: &PmuSample) -> Result<DqPair> {
    if !(y.v_t > 0.0) {
        return Err(Error::NonPositiveVoltage(y.v_t));
    }
    let (s, c) = (delta - y.theta_t).sin_cos();
    Ok(DqPair::new(
        (c * y.p_t - s * y.q_t) / y.v_t,
        (s * y.p_t + c * y.q_t) / y.v_t,
    ))
}

pub fn air_gap_power(eqp: f64, edp: f64, i: DqPair, p: &GenParams) -> f64 {
    eqp * i.q + edp * i.d + (p.x_qp - p.x_dp) * i.d * i.q
}

/// Assemble the PMU frame seen at the terminal from machine-frame voltages
/// and currents. `theta_t` is chosen on the branch continuous with `delta`.
pub fn terminal_sample(t: f64, delta: f64, v: DqPair, i: DqPair) -> PmuSample {
    let theta_t = delta - v.d.atan2(v.q);
    let p_t = v.q * i.q + v.d * i.d;
    let q_t = v.q * i.d - v.d * i.q;
    PmuSample {
        t,
        theta_t,
        v_t: v.norm_sqr().sqrt(),
        phi_t: theta_t - q_t.atan2(p_t),
        i_t: i.norm_sqr().sqrt(),
        p_t,
        q_t,
    }
}

/// Time derivative of the nine-state generator driven by mechanical power
/// `u1` and the terminal measurement `y`. The field voltage is the AVR
/// state `ef`; the AVR senses `V_f = V_t`.
pub fn plant_rhs(
    s: &PlantState,
    u1: f64,
    y: &PmuSample,
    p: &GenParams,
    dc: &DerivedConsts,
) -> PlantState {
    let (sn, cs) = (s.delta - y.theta_t).sin_cos();
    let i_q = (cs * y.p_t - sn * y.q_t) / y.v_t;
    let i_d = (sn * y.p_t + cs * y.q_t) / y.v_t;

    let v_pss = s.p1 + dc.c3 * s.omega;
    let err = p.v_ref - y.v_t + v_pss;
    let lead = p.t_c / p.t_b;

    PlantState {
        delta: s.omega,
        omega: -dc.a0 * s.omega + dc.b0 * (u1 - y.p_t) - dc.b3 * y.i_t * y.i_t,
        eqp: -dc.a1 * s.eqp - dc.b1 * i_d + dc.a1 * s.ef,
        edp: -dc.a2 * s.edp + dc.b2 * i_q,
        q: ((1.0 - lead) * err - s.q) / p.t_b,
        ef: (p.k_a * (s.q + lead * err) - s.ef) / p.t_a,
        p1: -dc.c1 * s.p1 + s.p2 + (dc.c4 - dc.c1 * dc.c3) * s.omega,
        p2: -dc.c2 * s.p1 + s.p3 + (dc.c5 - dc.c2 * dc.c3) * s.omega,
        p3: -dc.c6 * s.p1 - dc.c6 * dc.c3 * s.omega,
    }
}
