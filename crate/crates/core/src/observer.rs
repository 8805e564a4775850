//! End-to-end state observers driven by PMU frames.
//!
//! Both observers are causal at sample instants: on receiving frame `k` they
//! integrate their internal dynamics over `[t_{k-1}, t_k]` and then report an
//! estimate at `t_k`. Between frames the inputs are either held at the older
//! frame or interpolated linearly between the two.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::drem::{EstimatorConfig, EstimatorState, ThetaEstimate};
use crate::error::{Error, Result};
use crate::extension::{extension_rhs, w_matrix, w_signals, ExtensionState};
use crate::metrics::EstimateRecord;
use crate::model::{derive_consts, DerivedConsts, GenParams, PmuSample};
use crate::ode::rk4_step;
use crate::regression::{
    regressor_closed_form_r0, regressor_numeric, ExcitationMonitor, RegressorSample,
};
use crate::sim::PmuFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hold {
    /// Inputs held at the older frame over each interval.
    Zoh,
    /// Inputs interpolated between consecutive frames.
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverSettings {
    /// Upper bound on the internal integration step (s).
    pub step: f64,
    pub hold: Hold,
    /// An interval longer than this multiple of the nominal period is a gap.
    pub gap_factor: f64,
    /// Ceiling on the magnitude of every internal signal.
    pub signal_bound: f64,
    /// Initial angle guess for the full observer's parameter estimate.
    pub theta0_init: f64,
    pub excitation_threshold: f64,
}

impl Default for ObserverSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            hold: Hold::default(),
            gap_factor: 1.5,
            signal_bound: 1e6,
            theta0_init: 0.0,
            excitation_threshold: ExcitationMonitor::DEFAULT_THRESHOLD,
        }
    }
}

impl ObserverSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("step", self.step),
            ("gap_factor", self.gap_factor),
            ("signal_bound", self.signal_bound),
            ("excitation_threshold", self.excitation_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if self.gap_factor <= 1.0 {
            return Err(Error::InvalidParameter {
                name: "gap_factor",
                reason: format!("must exceed 1, got {}", self.gap_factor),
            });
        }
        if !self.theta0_init.is_finite() {
            return Err(Error::InvalidParameter {
                name: "theta0_init",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Input {
    y: PmuSample,
    u1: f64,
}

/// Branch of `angle + 2 pi k` closest to `reference`.
pub fn unwrap_near(angle: f64, reference: f64) -> f64 {
    angle - 2.0 * PI * ((angle - reference) / (2.0 * PI)).round()
}

fn lerp_sample(a: &PmuSample, b: &PmuSample, s: f64) -> PmuSample {
    let l = |x: f64, y: f64| x + s * (y - x);
    PmuSample {
        t: l(a.t, b.t),
        theta_t: l(a.theta_t, unwrap_near(b.theta_t, a.theta_t)),
        v_t: l(a.v_t, b.v_t),
        phi_t: l(a.phi_t, unwrap_near(b.phi_t, a.phi_t)),
        i_t: l(a.i_t, b.i_t),
        p_t: l(a.p_t, b.p_t),
        q_t: l(a.q_t, b.q_t),
    }
}

/// Input profile over one inter-frame interval.
#[derive(Debug, Clone, Copy)]
struct Interval {
    a: Input,
    b: Input,
    linear: bool,
}

impl Interval {
    fn at(&self, t: f64) -> Input {
        if !self.linear {
            return self.a;
        }
        let span = self.b.y.t - self.a.y.t;
        let s = ((t - self.a.y.t) / span).clamp(0.0, 1.0);
        Input {
            y: lerp_sample(&self.a.y, &self.b.y, s),
            u1: self.a.u1 + s * (self.b.u1 - self.a.u1),
        }
    }

    fn substeps(&self, max_step: f64) -> (usize, f64) {
        let span = self.b.y.t - self.a.y.t;
        let n = (span / max_step - 1e-9).ceil().max(1.0) as usize;
        (n, span / n as f64)
    }
}

/// Bookkeeping shared by both observers: previous frame, sampling period and
/// gap detection.
#[derive(Debug, Clone)]
struct FrameClock {
    settings: ObserverSettings,
    period: f64,
    last: Option<Input>,
}

impl FrameClock {
    fn new(settings: ObserverSettings, rate: f64) -> Result<Self> {
        settings.validate()?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "rate",
                reason: format!("must be positive, got {rate}"),
            });
        }
        Ok(Self {
            settings,
            period: 1.0 / rate,
            last: None,
        })
    }

    /// Register a new frame; returns the interval to integrate (if any) and
    /// whether it spans a gap.
    fn advance(&mut self, y: &PmuSample, u1: f64) -> Result<(Option<Interval>, bool)> {
        if !y.is_finite() || !u1.is_finite() {
            return Err(Error::Diverged {
                t: y.t,
                reason: "non-finite measurement".into(),
            });
        }
        if !(y.v_t > 0.0) {
            return Err(Error::NonPositiveVoltage(y.v_t));
        }
        let now = Input { y: *y, u1 };
        let prev = self.last.replace(now);
        let Some(a) = prev else {
            return Ok((None, false));
        };
        let span = y.t - a.y.t;
        if !(span > 0.0) {
            return Err(Error::InvalidParameter {
                name: "t",
                reason: format!("frame times must increase ({} after {})", y.t, a.y.t),
            });
        }
        let gap = span > self.settings.gap_factor * self.period;
        let linear = self.settings.hold == Hold::Linear && !gap;
        Ok((Some(Interval { a, b: now, linear }), gap))
    }

    fn check(&self, name: &'static str, value: f64, t: f64) -> Result<()> {
        let bound = self.settings.signal_bound;
        if !(value.abs() <= bound) {
            return Err(Error::SignalBound {
                name,
                value: value.abs(),
                bound,
                t,
            });
        }
        Ok(())
    }
}

/// Observer using only the mechanical power input.
#[derive(Debug, Clone)]
pub struct PartialObserver {
    params: GenParams,
    consts: DerivedConsts,
    clock: FrameClock,
    ext: ExtensionState,
    xi: Vector2<f64>,
    theta0: Option<f64>,
    xhat: [f64; 4],
}

/// Magnitude below which the angle argument is treated as degenerate.
pub const DEGENERATE_ARG: f64 = 1e-12;

impl PartialObserver {
    pub fn new(params: GenParams, settings: ObserverSettings, rate: f64) -> Result<Self> {
        let consts = derive_consts(&params)?;
        Ok(Self {
            params,
            consts,
            clock: FrameClock::new(settings, rate)?,
            ext: ExtensionState::default(),
            xi: Vector2::zeros(),
            theta0: None,
            xhat: [0.0; 4],
        })
    }

    pub fn extension(&self) -> ExtensionState {
        self.ext
    }

    pub fn filter_state(&self) -> Vector2<f64> {
        self.xi
    }

    pub fn theta0(&self) -> Option<f64> {
        self.theta0
    }

    pub fn estimate(&self) -> [f64; 4] {
        self.xhat
    }

    /// Consume one frame and return the estimate at its time stamp, along
    /// with the gap flag.
    pub fn step(&mut self, y: &PmuSample, u1: f64) -> Result<([f64; 4], bool)> {
        let (interval, gap) = self.clock.advance(y, u1)?;
        if let Some(iv) = interval {
            self.integrate(&iv)?;
        }
        self.reconstruct(y)?;
        Ok((self.xhat, gap))
    }

    fn integrate(&mut self, iv: &Interval) -> Result<()> {
        let (n, dt) = iv.substeps(self.clock.settings.step);
        let (p, dc) = (&self.params, &self.consts);
        let mut rhs = |t: f64, x: &[f64], d: &mut [f64]| -> Result<()> {
            let inp = iv.at(t);
            let v = ExtensionState { v1: x[0], v2: x[1] };
            let dv = extension_rhs(&v, inp.u1, inp.y.i_t, inp.y.p_t, dc);
            let w = w_signals(x[0], &inp.y, p)?;
            d[0] = dv.v1;
            d[1] = dv.v2;
            d[2] = -dc.a2 * x[2] + dc.b2 * w.w1[0];
            d[3] = -dc.a2 * x[3] + dc.b2 * w.w1[1];
            Ok(())
        };
        let mut x = [self.ext.v1, self.ext.v2, self.xi[0], self.xi[1]];
        let t0 = iv.a.y.t;
        for k in 0..n {
            rk4_step(&mut rhs, t0 + k as f64 * dt, &mut x, dt)?;
        }
        let t = iv.b.y.t;
        for (name, v) in [("v1", x[0]), ("v2", x[1]), ("xi1", x[2]), ("xi2", x[3])] {
            self.clock.check(name, v, t)?;
        }
        self.ext = ExtensionState { v1: x[0], v2: x[1] };
        self.xi = Vector2::new(x[2], x[3]);
        Ok(())
    }

    fn reconstruct(&mut self, y: &PmuSample) -> Result<()> {
        let w = w_signals(self.ext.v1, y, &self.params)?;
        let num = self.xi[1] - w.w3[1];
        let den = w.w3[0] - self.xi[0];
        let raw = if num.abs() < DEGENERATE_ARG && den.abs() < DEGENERATE_ARG {
            self.theta0
        } else {
            Some(num.atan2(den))
        };
        let theta0 = match (raw, self.theta0) {
            (Some(a), Some(prev)) => unwrap_near(a, prev),
            (Some(a), None) => a,
            (None, _) => 0.0,
        };
        self.theta0 = Some(theta0);
        let theta = Vector2::new(theta0.sin(), theta0.cos());
        let x34 = w_matrix(self.ext.v1, y, &self.params)?.apply(theta);
        self.xhat = [self.ext.v1 + theta0, self.ext.v2, x34[0], x34[1]];
        for (name, v) in [("x3_hat", x34[0]), ("x4_hat", x34[1]), ("theta0", theta0)] {
            self.clock.check(name, v, y.t)?;
        }
        Ok(())
    }
}

/// Per-frame diagnostics of the parameter estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorTrace {
    pub t: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub delta: f64,
    pub z: f64,
    pub f_norm: f64,
    pub residual: f64,
    pub min_eig: f64,
    /// Magnitude of the regressor's linear part.
    pub psi1_norm: f64,
}

/// Observer using both inputs, built on the parameter estimator.
#[derive(Debug, Clone)]
pub struct FullObserver {
    params: GenParams,
    consts: DerivedConsts,
    clock: FrameClock,
    cfg: EstimatorConfig,
    ext: ExtensionState,
    est: EstimatorState,
    monitor: ExcitationMonitor,
    theta: ThetaEstimate,
    theta0: f64,
    xhat: [f64; 4],
    last_u2: f64,
    min_abs_theta2: f64,
}

impl FullObserver {
    pub fn new(
        params: GenParams,
        settings: ObserverSettings,
        cfg: EstimatorConfig,
        rate: f64,
    ) -> Result<Self> {
        let consts = derive_consts(&params)?;
        let (s, c) = settings.theta0_init.sin_cos();
        let est = EstimatorState::new(&cfg, s, c)?;
        let theta = est.theta_estimates();
        Ok(Self {
            params,
            consts,
            cfg,
            ext: ExtensionState::default(),
            monitor: ExcitationMonitor::new(settings.excitation_threshold),
            clock: FrameClock::new(settings, rate)?,
            theta0: theta.theta0,
            theta,
            min_abs_theta2: est.theta2.abs(),
            est,
            xhat: [0.0; 4],
            last_u2: f64::NAN,
        })
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.est
    }

    pub fn monitor(&self) -> &ExcitationMonitor {
        &self.monitor
    }

    pub fn theta(&self) -> ThetaEstimate {
        self.theta
    }

    /// Smallest `|theta2_hat|` seen after any estimator step.
    pub fn min_abs_theta2(&self) -> f64 {
        self.min_abs_theta2
    }

    pub fn extension(&self) -> ExtensionState {
        self.ext
    }

    /// Field voltage of the latest frame. It does not enter the estimator
    /// equations but is part of the measured input set this observer needs.
    pub fn field_voltage(&self) -> f64 {
        self.last_u2
    }

    fn regressor(&self, v1: f64, y: &PmuSample) -> Result<RegressorSample> {
        if self.params.r == 0.0 {
            regressor_closed_form_r0(v1, y, &self.params)
        } else {
            regressor_numeric(v1, y, &self.params)
        }
    }

    pub fn step(
        &mut self,
        y: &PmuSample,
        u1: f64,
        u2: f64,
    ) -> Result<([f64; 4], bool, EstimatorTrace)> {
        if !u2.is_finite() {
            return Err(Error::MissingInput { name: "u2", t: y.t });
        }
        self.last_u2 = u2;
        let (interval, gap) = self.clock.advance(y, u1)?;
        if let Some(iv) = interval {
            self.integrate(&iv)?;
        }
        let r = self.regressor(self.ext.v1, y)?;
        let mixed = self.est.mixed_outputs(&self.cfg);
        if mixed.delta != 0.0 {
            self.theta = self.est.theta_estimates();
        }
        self.theta0 = unwrap_near(self.theta.theta0, self.theta0);
        let x34 = w_matrix(self.ext.v1, y, &self.params)?
            .apply(Vector2::new(self.theta.theta1, self.theta.theta2));
        self.xhat = [self.ext.v1 + self.theta0, self.ext.v2, x34[0], x34[1]];
        for (name, v) in [("x3_hat", x34[0]), ("x4_hat", x34[1])] {
            self.clock.check(name, v, y.t)?;
        }
        let trace = EstimatorTrace {
            t: y.t,
            theta1: self.est.theta1,
            theta2: self.est.theta2,
            delta: mixed.delta,
            z: self.est.z,
            f_norm: self.est.covariance_norm(),
            residual: self.est.residual(&r),
            min_eig: self.monitor.min_eig(),
            psi1_norm: r.psi1[0].hypot(r.psi1[1]),
        };
        Ok((self.xhat, gap, trace))
    }

    fn integrate(&mut self, iv: &Interval) -> Result<()> {
        let (n, dt) = iv.substeps(self.clock.settings.step);
        let t0 = iv.a.y.t;
        for k in 0..n {
            let t = t0 + k as f64 * dt;
            let inp = iv.at(t);
            let r = self.regressor(self.ext.v1, &inp.y)?;
            self.monitor.update(&r.stacked(), dt);
            self.est.step(&r, &self.cfg, dt)?;
            self.min_abs_theta2 = self.min_abs_theta2.min(self.est.theta2.abs());

            let dc = &self.consts;
            let mut rhs = |tau: f64, x: &[f64], d: &mut [f64]| -> Result<()> {
                let i = iv.at(tau);
                let dv = extension_rhs(
                    &ExtensionState { v1: x[0], v2: x[1] },
                    i.u1,
                    i.y.i_t,
                    i.y.p_t,
                    dc,
                );
                d[0] = dv.v1;
                d[1] = dv.v2;
                Ok(())
            };
            let mut x = [self.ext.v1, self.ext.v2];
            rk4_step(&mut rhs, t, &mut x, dt)?;
            self.ext = ExtensionState { v1: x[0], v2: x[1] };
        }
        let t = iv.b.y.t;
        self.clock.check("v1", self.ext.v1, t)?;
        self.clock.check("v2", self.ext.v2, t)?;
        let g: Vector5<f64> = self.est.g0_hat;
        for v in g.iter() {
            self.clock.check("g0_hat", *v, t)?;
        }
        self.clock.check("theta1_hat", self.est.theta1, t)?;
        self.clock.check("theta2_hat", self.est.theta2, t)?;
        Ok(())
    }
}

/// Attach ground truth from a simulated trajectory where the frames carry
/// their source index.
pub fn attach_truth(
    records: &mut [EstimateRecord],
    frames: &[PmuFrame],
    truth: impl Fn(usize) -> Option<[f64; 4]>,
) {
    for (r, f) in records.iter_mut().zip(frames) {
        r.x = f.step.and_then(&truth);
    }
}

pub fn run_partial(
    frames: &[PmuFrame],
    params: &GenParams,
    settings: ObserverSettings,
    rate: f64,
) -> Result<Vec<EstimateRecord>> {
    if frames.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut obs = PartialObserver::new(*params, settings, rate)?;
    frames
        .iter()
        .map(|f| {
            let (xhat, gap) = obs.step(&f.sample, f.u1)?;
            Ok(EstimateRecord {
                t: f.sample.t,
                xhat,
                x: None,
                gap,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FullRun {
    pub records: Vec<EstimateRecord>,
    pub trace: Vec<EstimatorTrace>,
    /// Time after observer start at which the regressor was flagged as
    /// exciting, if ever.
    pub t_c: Option<f64>,
    pub min_abs_theta2: f64,
    /// Numerical rank of the regressor information matrix at the end.
    pub rank: usize,
}

pub fn run_full(
    frames: &[PmuFrame],
    params: &GenParams,
    settings: ObserverSettings,
    cfg: EstimatorConfig,
    rate: f64,
) -> Result<FullRun> {
    if frames.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut obs = FullObserver::new(*params, settings, cfg, rate)?;
    let mut records = Vec::with_capacity(frames.len());
    let mut trace = Vec::with_capacity(frames.len());
    for f in frames {
        let u2 = f.u2.ok_or(Error::MissingInput {
            name: "u2",
            t: f.sample.t,
        })?;
        let (xhat, gap, tr) = obs.step(&f.sample, f.u1, u2)?;
        records.push(EstimateRecord {
            t: f.sample.t,
            xhat,
            x: None,
            gap,
        });
        trace.push(tr);
    }
    Ok(FullRun {
        records,
        trace,
        t_c: obs.monitor().t_c(),
        min_abs_theta2: obs.min_abs_theta2(),
        rank: obs.monitor().rank(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::sample_params;

    fn frame(t: f64, theta_t: f64, v_t: f64, p_t: f64, q_t: f64) -> PmuFrame {
        let i_t = p_t.hypot(q_t) / v_t;
        PmuFrame {
            sample: PmuSample {
                t,
                theta_t,
                v_t,
                phi_t: theta_t - q_t.atan2(p_t),
                i_t,
                p_t,
                q_t,
            },
            u1: p_t + sample_params().r * i_t * i_t,
            u2: Some(1.8),
            step: None,
        }
    }

    #[test]
    fn unwrap_picks_nearest_branch() {
        assert!((unwrap_near(0.1, 2.0 * PI) - (0.1 + 2.0 * PI)).abs() < 1e-12);
        assert_eq!(unwrap_near(0.3, 0.2), 0.3);
        assert!((unwrap_near(-3.0, 3.0) - (2.0 * PI - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn no_flow_partial_estimate_is_closed_form() {
        let p = sample_params();
        let mut obs = PartialObserver::new(p, ObserverSettings::default(), 60.0).unwrap();
        let (th, v) = (0.4, 1.03);
        let mut last = [0.0; 4];
        for k in 0..120 {
            let f = frame(k as f64 / 60.0, th, v, 0.0, 0.0);
            last = obs.step(&f.sample, 0.0).unwrap().0;
        }
        assert_eq!(obs.filter_state(), Vector2::zeros());
        let v1 = obs.extension().v1;
        assert_eq!(v1, 0.0);
        let w3 = crate::extension::rotation(v1, th).transpose() * Vector2::new(v, 0.0);
        let expected = (-w3[1]).atan2(w3[0]);
        assert!((obs.theta0().unwrap() - expected).abs() < 1e-15);
        assert!((last[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn time_must_increase() {
        let p = sample_params();
        let mut obs = PartialObserver::new(p, ObserverSettings::default(), 60.0).unwrap();
        let f = frame(0.0, 0.0, 1.0, 0.5, 0.1);
        obs.step(&f.sample, f.u1).unwrap();
        assert!(obs.step(&f.sample, f.u1).is_err());
    }

    #[test]
    fn gaps_are_flagged() {
        let p = sample_params();
        let frames: Vec<PmuFrame> = [0.0, 1.0, 2.0, 5.0, 6.0]
            .iter()
            .map(|k| frame(k / 60.0, 0.1, 1.0, 0.5, 0.1))
            .collect();
        let recs = run_partial(&frames, &p, ObserverSettings::default(), 60.0).unwrap();
        let gaps: Vec<bool> = recs.iter().map(|r| r.gap).collect();
        assert_eq!(gaps, vec![false, false, false, true, false]);
    }

    #[test]
    fn full_requires_field_voltage() {
        let p = sample_params();
        let mut f = frame(0.0, 0.1, 1.0, 0.5, 0.1);
        f.u2 = None;
        let res = run_full(
            &[f],
            &p,
            ObserverSettings::default(),
            EstimatorConfig::default(),
            60.0,
        );
        assert!(matches!(res, Err(Error::MissingInput { name: "u2", .. })));
    }

    #[test]
    fn empty_streams_rejected() {
        let p = sample_params();
        assert!(matches!(
            run_partial(&[], &p, ObserverSettings::default(), 60.0),
            Err(Error::EmptyStream)
        ));
    }

    #[test]
    fn bound_violation_aborts() {
        let p = sample_params();
        let settings = ObserverSettings {
            signal_bound: 1e-3,
            ..Default::default()
        };
        let frames: Vec<PmuFrame> = (0..3)
            .map(|k| frame(k as f64 / 60.0, 0.1, 1.0, 0.5, 0.1))
            .collect();
        assert!(matches!(
            run_partial(&frames, &p, settings, 60.0),
            Err(Error::SignalBound { .. })
        ));
    }

    #[test]
    fn linear_hold_interpolates_angles_across_the_cut() {
        let a = PmuSample {
            t: 0.0,
            theta_t: PI - 0.05,
            v_t: 1.0,
            ..Default::default()
        };
        let b = PmuSample {
            t: 1.0,
            theta_t: -PI + 0.05,
            v_t: 1.0,
            ..Default::default()
        };
        let m = lerp_sample(&a, &b, 0.5);
        assert!((m.theta_t - PI).abs() < 1e-12);
    }
}
