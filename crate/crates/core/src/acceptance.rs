//! Acceptance checks on the bundled reference scenario. Each check returns a
//! [`CriterionReport`]; numeric failures are reported, not raised.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{Vector2, Vector5};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ScenarioConfig;
use crate::disturbance::LoadFluctuation;
use crate::drem::{EstimatorConfig, EstimatorState};
use crate::error::Result;
use crate::extension::{rotation, w_matrix};
use crate::metrics::{log_linear_fit, EstimateRecord};
use crate::model::{
    air_gap_power, currents_from_internal, currents_from_power, derive_consts, dq_voltages,
    terminal_sample, GenParams, PlantState,
};
use crate::observer::{run_full, run_partial, FullRun};
use crate::regression::{g0_map, regressor_closed_form_r0, regressor_numeric, RegressorSample};
use crate::runner::{run_inline, simulate, simulated_truth, Simulation};
use crate::sim::{find_equilibrium, integrate_from, PmuFrame, Trajectory};

pub const REFERENCE_TOML: &str = include_str!("../../../scenarios/reference_smib.toml");

pub fn reference_config() -> Result<ScenarioConfig> {
    ScenarioConfig::from_toml(REFERENCE_TOML)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{tag}] criterion {} ({}): {}",
            self.id, self.name, self.detail
        )
    }
}

fn report(id: u8, name: &'static str, passed: bool, detail: String) -> CriterionReport {
    CriterionReport {
        id,
        name,
        passed,
        detail,
    }
}

/// Rotor-angle offset `x1 - v1` of generator 0 at a trajectory point.
fn offset(tr: &Trajectory, k: usize) -> f64 {
    tr.points[k].states[0].delta - tr.points[k].extension[0].v1
}

fn theta_at(tr: &Trajectory, k: usize) -> Vector2<f64> {
    let (s, c) = offset(tr, k).sin_cos();
    Vector2::new(s, c)
}

fn max_error_after(records: &[EstimateRecord], t0: f64) -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for e in records
        .iter()
        .filter(|r| r.t >= t0)
        .filter_map(|r| r.error())
    {
        for i in 0..4 {
            worst[i] = worst[i].max(e[i].abs());
        }
    }
    worst
}

fn fmt4(v: &[f64; 4]) -> String {
    format!("[{:.2e}, {:.2e}, {:.2e}, {:.2e}]", v[0], v[1], v[2], v[3])
}

fn with_truth(
    mut records: Vec<EstimateRecord>,
    tr: &Trajectory,
    frames: &[PmuFrame],
) -> Vec<EstimateRecord> {
    for (r, x) in records.iter_mut().zip(simulated_truth(tr, 0, frames)) {
        r.x = x;
    }
    records
}

pub const SETTLE_LOOSE: (f64, f64) = (2.0, 1e-2);
pub const SETTLE_TIGHT: (f64, f64) = (5.0, 1e-3);
pub const RUNTIME_LIMIT_S: f64 = 10.0;

pub fn partial_observer_settling() -> Result<CriterionReport> {
    let cfg = reference_config()?;
    let clock = Instant::now();
    let sim = simulate(&cfg)?;
    let records = run_partial(
        &sim.frames[0],
        &cfg.generators[0].params,
        cfg.observer.settings,
        cfg.pmu.rate,
    )?;
    let wall = clock.elapsed().as_secs_f64();
    let records = with_truth(records, &sim.trajectory, &sim.frames[0]);
    let loose = max_error_after(&records, SETTLE_LOOSE.0);
    let tight = max_error_after(&records, SETTLE_TIGHT.0);
    let passed = loose.iter().all(|e| *e < SETTLE_LOOSE.1)
        && tight.iter().all(|e| *e < SETTLE_TIGHT.1)
        && wall < RUNTIME_LIMIT_S
        && cfg.t_end >= 20.0;
    Ok(report(
        1,
        "partial observer settling",
        passed,
        format!(
            "max |e| after {} s {} (< {:e}), after {} s {} (< {:e}), wall {:.2} s for {} s",
            SETTLE_LOOSE.0,
            fmt4(&loose),
            SETTLE_LOOSE.1,
            SETTLE_TIGHT.0,
            fmt4(&tight),
            SETTLE_TIGHT.1,
            wall,
            cfg.t_end
        ),
    ))
}

pub const REGRESSION_TOL: f64 = 1e-8;
pub const CONSTRUCTION_AGREEMENT_TOL: f64 = 1e-10;

fn worst_residual(sim: &Simulation, p: &GenParams, closed_form: bool) -> Result<(f64, f64)> {
    let tr = &sim.trajectory;
    let (mut res, mut agree) = (0.0f64, 0.0f64);
    for f in &sim.frames[0] {
        let k = f.step.expect("simulated frame");
        let v1 = tr.points[k].extension[0].v1;
        let theta = theta_at(tr, k);
        let num = regressor_numeric(v1, &f.sample, p)?;
        res = res.max(num.residual(theta).abs());
        if closed_form {
            let cf = regressor_closed_form_r0(v1, &f.sample, p)?;
            res = res.max(cf.residual(theta).abs());
            let d = (num.stacked() - cf.stacked())
                .amax()
                .max((num.output - cf.output).abs());
            agree = agree.max(d);
        }
    }
    Ok((res, agree))
}

pub fn regression_residual() -> Result<CriterionReport> {
    let cfg = reference_config()?;
    let sim = simulate(&cfg)?;
    let (res, _) = worst_residual(&sim, &cfg.generators[0].params, false)?;

    let mut lossless = cfg.clone();
    lossless.generators[0].params.r = 0.0;
    let sim0 = simulate(&lossless)?;
    let (res0, agree) = worst_residual(&sim0, &lossless.generators[0].params, true)?;

    let passed =
        res < REGRESSION_TOL && res0 < REGRESSION_TOL && agree < CONSTRUCTION_AGREEMENT_TOL;
    Ok(report(
        2,
        "regression residual",
        passed,
        format!(
            "numeric residual {res:.2e} over {} samples, R = 0 run residual {res0:.2e}, \
             constructions differ by {agree:.2e}",
            sim.frames[0].len()
        ),
    ))
}

pub const MONOTONE_TOL: f64 = 1e-9;
pub const PARAMETER_TOL: f64 = 1e-3;
pub const FIT_R2: f64 = 0.9;

struct FullCase {
    label: &'static str,
    run: FullRun,
    theta: Vector2<f64>,
    bound: f64,
}

fn full_cases() -> Result<Vec<FullCase>> {
    let base = reference_config()?;
    let mut noisy = base.clone();
    noisy.pmu.noise.magnitude_std = 1e-3;
    noisy.pmu.noise.angle_std = 1e-3;
    let mut out = Vec::new();
    for (label, cfg) in [("reference", base), ("noisy reference", noisy)] {
        let sim = simulate(&cfg)?;
        let g = &cfg.generators[0];
        let run = run_full(
            &sim.frames[0],
            &g.params,
            cfg.observer.settings,
            cfg.observer.estimator,
            cfg.pmu.rate,
        )?;
        out.push(FullCase {
            label,
            run,
            theta: theta_at(&sim.trajectory, 0),
            bound: cfg.observer.estimator.theta2_bound,
        });
    }
    Ok(out)
}

pub fn full_observer_convergence() -> Result<CriterionReport> {
    let cases = full_cases()?;
    let Some(case) = cases.iter().find(|c| c.run.t_c.is_some()) else {
        let ranks: Vec<String> = cases
            .iter()
            .map(|c| {
                let last = c.run.trace.last().expect("nonempty run");
                let err = Vector2::new(last.theta1 - c.theta[0], last.theta2 - c.theta[1]).norm();
                format!(
                    "{}: information rank {}/5, final delta {:.1e}, final parameter error {err:.2e}",
                    c.label, c.run.rank, last.delta
                )
            })
            .collect();
        return Ok(report(
            3,
            "full observer convergence",
            false,
            format!(
                "no candidate scenario reaches interval excitation ({}); the regressor stays \
                 on a rank-one subspace, so the estimate never moves",
                ranks.join("; ")
            ),
        ));
    };
    let t_c = case.run.t_c.expect("selected for excitation");
    let mut prev = None::<(f64, f64)>;
    let mut monotone = true;
    let (mut ts, mut es) = (Vec::new(), Vec::new());
    for tr in &case.run.trace {
        let e = (
            (tr.theta1 - case.theta[0]).abs(),
            (tr.theta2 - case.theta[1]).abs(),
        );
        if let Some(p) = prev {
            monotone &= e.0 <= p.0 + MONOTONE_TOL && e.1 <= p.1 + MONOTONE_TOL;
        }
        prev = Some(e);
        if tr.t >= t_c {
            ts.push(tr.t);
            es.push(e.0.hypot(e.1));
        }
    }
    let final_err = es.last().copied().unwrap_or(f64::INFINITY);
    let r2 = log_linear_fit(&ts, &es).map_or(f64::NAN, |f| f.r2);
    let passed = monotone && final_err < PARAMETER_TOL && r2 > FIT_R2;
    Ok(report(
        3,
        "full observer convergence",
        passed,
        format!(
            "{}: excitation at {t_c:.3} s, monotone {monotone}, final error {final_err:.2e}, R^2 {r2:.3}",
            case.label
        ),
    ))
}

fn projected_synthetic_run(cfg: &EstimatorConfig) -> Result<(f64, usize, usize)> {
    // The true second parameter lies below the bound, so the projection
    // has to engage.
    let theta0: f64 = 1.5;
    let truth = g0_map(theta0.sin(), theta0.cos());
    let mut s = EstimatorState::new(cfg, 0.4, 0.3)?;
    let dt = 1e-3;
    let (mut min_abs, mut clipped) = (f64::INFINITY, 0usize);
    let n = 20_000;
    for k in 0..n {
        let t = k as f64 * dt;
        let psi = Vector5::new(
            1.0 + 0.5 * (1.3 * t).sin(),
            (2.1 * t).cos(),
            0.8 * (0.7 * t + 0.4).sin(),
            0.6 * (3.7 * t).sin(),
            0.9 * (5.3 * t + 1.0).cos(),
        );
        let r = RegressorSample {
            t,
            output: psi.dot(&truth),
            psi1: [psi[0], psi[1]],
            psi2: [psi[2], psi[3], psi[4]],
        };
        s.step(&r, cfg, dt)?;
        min_abs = min_abs.min(s.theta2.abs());
        if s.theta2 == cfg.theta2_sign * cfg.theta2_bound {
            clipped += 1;
        }
    }
    Ok((min_abs, clipped, n))
}

pub fn projection_bound() -> Result<CriterionReport> {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in full_cases()? {
        ok &= c.run.min_abs_theta2 >= c.bound;
        parts.push(format!(
            "{}: min |theta2| {:.4}",
            c.label, c.run.min_abs_theta2
        ));
    }
    let cfg = EstimatorConfig::default();
    let (min_abs, clipped, n) = projected_synthetic_run(&cfg)?;
    ok &= min_abs >= cfg.theta2_bound && clipped > 0;
    parts.push(format!(
        "synthetic: min |theta2| {min_abs:.4}, projection active on {clipped}/{n} steps"
    ));
    Ok(report(
        4,
        "projection bound",
        ok,
        format!("bound {}; {}", cfg.theta2_bound, parts.join("; ")),
    ))
}

pub const ROTATION_TOL: f64 = 1e-14;
pub const W_TOL: f64 = 1e-8;
pub const OFFSET_TOL: f64 = 1e-6;
pub const RANDOM_CASES: usize = 10_000;

pub fn extension_identities() -> Result<CriterionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pi = std::f64::consts::PI;
    let mut rot = 0.0f64;
    for _ in 0..RANDOM_CASES {
        let alpha = rng.random_range(-pi..pi);
        let theta0 = rng.random_range(-pi..pi);
        let theta_t = rng.random_range(-pi..pi);
        let lhs = rotation(alpha + theta_t, theta_t) * Vector2::new(theta0.sin(), theta0.cos());
        let (s, c) = (alpha + theta0).sin_cos();
        rot = rot.max((lhs - Vector2::new(s, c)).amax());
    }

    let cfg = reference_config()?;
    let sim = simulate(&cfg)?;
    let tr = &sim.trajectory;
    let mut w_err = 0.0f64;
    for f in &sim.frames[0] {
        let k = f.step.expect("simulated frame");
        let w = w_matrix(tr.points[k].extension[0].v1, &f.sample, &tr.params[0])?;
        let st = &tr.points[k].states[0];
        w_err = w_err.max((w.apply(theta_at(tr, k)) - Vector2::new(st.eqp, st.edp)).amax());
    }

    let a0 = derive_consts(&tr.params[0])?.a0;
    let start = (5.0 / a0 / tr.h).ceil() as usize;
    let anchor = offset(tr, start);
    let drift = (start..tr.points.len())
        .map(|k| (offset(tr, k) - anchor).abs())
        .fold(0.0, f64::max);

    // Off equilibrium the offset approaches x1(0) + x2(0) / a0.
    let sc = cfg.scenario()?;
    let op = find_equilibrium(&sc)?;
    let kick = 0.01;
    let mut init = op.states.clone();
    init[0].omega += kick;
    let kicked = integrate_from(&sc, &op, &init, 10.0, cfg.h)?;
    let analytic = kicked
        .points
        .iter()
        .enumerate()
        .map(|(k, pt)| {
            let model = init[0].delta + kick * (1.0 - (-a0 * pt.t).exp()) / a0;
            (offset(&kicked, k) - model).abs()
        })
        .fold(0.0, f64::max);

    let passed = rot < ROTATION_TOL && w_err < W_TOL && drift < OFFSET_TOL && analytic < OFFSET_TOL;
    Ok(report(
        5,
        "extension identities",
        passed,
        format!(
            "rotation {rot:.1e} over {RANDOM_CASES} cases, W identity {w_err:.1e}, \
             offset drift after {:.2} s {drift:.1e}, kicked-speed offset vs closed form {analytic:.1e}",
            start as f64 * tr.h
        ),
    ))
}

pub const ELECTRICAL_TOL: f64 = 1e-10;

/// Worst residual per relation over random consistent snapshots:
/// voltages, stator equation, active power, reactive power, air-gap power,
/// currents from power.
pub fn electrical_residuals(cases: usize, seed: u64) -> Result<[f64; 6]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = std::f64::consts::PI;
    let j = Complex64::i();
    let mut worst = [0.0f64; 6];
    let base = reference_config()?.generators[0].params;
    for _ in 0..cases {
        let p = GenParams {
            r: rng.random_range(0.0..0.05),
            x_dp: rng.random_range(0.15..0.4),
            x_qp: rng.random_range(0.2..0.7),
            ..base
        };
        let delta = rng.random_range(-pi..pi);
        let theta_t = delta - rng.random_range(-1.2..1.2);
        let v_t = rng.random_range(0.8..1.2);
        let eqp = rng.random_range(0.6..1.4);
        let edp = rng.random_range(-0.5..0.6);

        let v = dq_voltages(delta, theta_t, v_t);
        let i = currents_from_internal(delta, eqp, edp, theta_t, v_t, &p)?;
        let frame = (j * (delta - pi / 2.0)).exp();
        let v_ph = Complex64::new(v.d, v.q) * frame;
        let i_ph = Complex64::new(i.d, i.q) * frame;
        let s = v_ph * i_ph.conj();
        let y = terminal_sample(0.0, delta, v, i);

        let relations = [
            (v_ph - Complex64::from_polar(v_t, theta_t)).norm(),
            (v.q - (eqp - p.r * i.q - p.x_dp * i.d))
                .abs()
                .max((v.d - (edp + p.x_qp * i.q - p.r * i.d)).abs()),
            (y.p_t - s.re)
                .abs()
                .max((y.p_t - y.v_t * y.i_t * (y.theta_t - y.phi_t).cos()).abs()),
            (y.q_t - s.im)
                .abs()
                .max((y.q_t - y.v_t * y.i_t * (y.theta_t - y.phi_t).sin()).abs()),
            (air_gap_power(eqp, edp, i, &p) - (y.p_t + p.r * y.i_t * y.i_t)).abs(),
            {
                let ip = currents_from_power(delta, &y)?;
                (ip.q - i.q).abs().max((ip.d - i.d).abs())
            },
        ];
        for (w, r) in worst.iter_mut().zip(relations) {
            *w = w.max(r);
        }
    }
    Ok(worst)
}

pub fn electrical_relations() -> Result<CriterionReport> {
    let worst = electrical_residuals(RANDOM_CASES, 11)?;
    let names = [
        "voltages",
        "stator",
        "active power",
        "reactive power",
        "air gap",
        "currents from power",
    ];
    let passed = worst.iter().all(|w| *w < ELECTRICAL_TOL);
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(report(
        6,
        "electrical relations",
        passed,
        format!("{RANDOM_CASES} snapshots: {detail}"),
    ))
}

pub const ORDER_RANGE: (f64, f64) = (12.0, 20.0);

/// Final-state error of RK4 on the unforced reference network from a
/// perturbed state, for each step in `steps`, against a fine reference step.
pub fn convergence_errors(steps: &[f64], fine: f64, horizon: f64) -> Result<Vec<f64>> {
    let cfg = reference_config()?;
    let mut sc = cfg.scenario()?;
    sc.loads = LoadFluctuation::default();
    let op = find_equilibrium(&sc)?;
    let mut init = op.states.clone();
    init[0].delta += 0.1;
    init[0].omega += 0.05;
    let final_state = |h: f64| -> Result<Vec<f64>> {
        let tr = integrate_from(&sc, &op, &init, horizon, h)?;
        let last = tr.points.last().expect("nonempty trajectory");
        Ok(last.states.iter().flat_map(PlantState::to_array).collect())
    };
    let reference = final_state(fine)?;
    steps
        .iter()
        .map(|&h| {
            let x = final_state(h)?;
            Ok(x.iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

pub fn integrator_order() -> Result<CriterionReport> {
    let e = convergence_errors(&[4e-3, 2e-3], 2.5e-4, 2.0)?;
    let ratio = e[0] / e[1];
    let passed = ratio >= ORDER_RANGE.0 && ratio <= ORDER_RANGE.1;
    Ok(report(
        7,
        "integrator order",
        passed,
        format!(
            "error {:.3e} at h = 4 ms, {:.3e} at h = 2 ms, ratio {ratio:.2} (target [{}, {}])",
            e[0], e[1], ORDER_RANGE.0, ORDER_RANGE.1
        ),
    ))
}

struct ScratchDir(PathBuf);

impl ScratchDir {
    fn new(tag: &str) -> Result<Self> {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        let dir = std::env::temp_dir().join(format!("sgdse-{tag}-{}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Self(dir))
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

pub fn determinism() -> Result<CriterionReport> {
    let cfg = reference_config()?;
    let (a, b) = (ScratchDir::new("run-a")?, ScratchDir::new("run-b")?);
    let (_, _, files_a) = run_inline(&a.0, &cfg)?;
    let (_, _, files_b) = run_inline(&b.0, &cfg)?;
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (fa, fb) in files_a.iter().zip(&files_b) {
        let name = fa
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if fa.file_name() != fb.file_name() || std::fs::read(fa)? != std::fs::read(fb)? {
            mismatched.push(name);
        }
        compared += 1;
    }
    let passed = files_a.len() == files_b.len() && mismatched.is_empty() && compared > 0;
    Ok(report(
        8,
        "determinism",
        passed,
        if mismatched.is_empty() {
            format!("{compared} output files byte-identical across two runs")
        } else {
            format!("differing outputs: {}", mismatched.join(", "))
        },
    ))
}

pub fn run_all() -> Result<Vec<CriterionReport>> {
    Ok(vec![
        partial_observer_settling()?,
        regression_residual()?,
        full_observer_convergence()?,
        projection_bound()?,
        extension_identities()?,
        electrical_relations()?,
        integrator_order()?,
        determinism()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_parses() {
        let cfg = reference_config().unwrap();
        assert_eq!(cfg.pmu.rate, 60.0);
        assert!(cfg.noise().is_noiseless());
    }
}
