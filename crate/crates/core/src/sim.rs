//! Closed-loop plant simulation and PMU measurement synthesis.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::disturbance::{load_fluctuation, LoadFluctuation, LoadPath};
use crate::error::{Error, Result};
use crate::extension::{extension_rhs, ExtensionState};
use crate::model::{derive_consts, plant_rhs, DerivedConsts, GenParams, PlantState, PmuSample};
use crate::network::{solve_smib, MachineView, MultiMachineNetwork, SmibNetwork, Terminal};
use crate::ode::rk4_step;

/// Target terminal operating point of a generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dispatch {
    pub p_t: f64,
    pub v_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub name: String,
    pub params: GenParams,
    pub dispatch: Dispatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkModel {
    Smib(SmibNetwork),
    MultiMachine(MultiMachineNetwork),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub generators: Vec<Generator>,
    pub network: NetworkModel,
    pub loads: LoadFluctuation,
    pub seed: u64,
    /// Abort when any state exceeds this magnitude.
    pub divergence_bound: f64,
}

impl Scenario {
    pub fn n_loads(&self) -> usize {
        match &self.network {
            NetworkModel::Smib(_) => 1,
            NetworkModel::MultiMachine(n) => n.loads.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.generators.is_empty() {
            return Err(Error::Config("no generators".into()));
        }
        for g in &self.generators {
            g.params.validate()?;
            if !(g.dispatch.v_t > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "v_t",
                    reason: format!("dispatch voltage of `{}` must be positive", g.name),
                });
            }
        }
        match &self.network {
            NetworkModel::Smib(n) => {
                n.validate()?;
                if self.generators.len() != 1 {
                    return Err(Error::Config(
                        "SMIB network takes exactly one generator".into(),
                    ));
                }
            }
            NetworkModel::MultiMachine(n) => {
                if n.gen_bus.len() != self.generators.len() {
                    return Err(Error::Config(format!(
                        "{} generators but {} generator buses",
                        self.generators.len(),
                        n.gen_bus.len()
                    )));
                }
            }
        }
        self.loads.validate(self.n_loads())
    }

    /// Solve the network algebra for the given machine states.
    pub fn solve_network(
        &self,
        params: &[GenParams],
        states: &[PlantState],
        load_scales: &[f64],
    ) -> Result<Vec<Terminal>> {
        match &self.network {
            NetworkModel::Smib(n) => {
                let s = &states[0];
                let net = n.with_load_scale(load_scales.first().copied().unwrap_or(1.0));
                Ok(vec![solve_smib(s.delta, s.eqp, s.edp, &params[0], &net)?])
            }
            NetworkModel::MultiMachine(n) => {
                let views: Vec<MachineView> = params
                    .iter()
                    .zip(states)
                    .map(|(p, s)| MachineView {
                        params: p,
                        delta: s.delta,
                        eqp: s.eqp,
                        edp: s.edp,
                    })
                    .collect();
                Ok(n.solve(&views, load_scales)?.terminals)
            }
        }
    }

    fn has_infinite_bus(&self) -> bool {
        match &self.network {
            NetworkModel::Smib(_) => true,
            NetworkModel::MultiMachine(n) => n.infinite.is_some(),
        }
    }
}

/// Equilibrium of the closed loop at the scenario dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    /// Generator parameters with the solved voltage references.
    pub params: Vec<GenParams>,
    pub states: Vec<PlantState>,
    /// Mechanical power inputs.
    pub pm: Vec<f64>,
}

const EQ_UNKNOWNS: usize = 10;

fn unpack(u: &[f64]) -> (PlantState, f64, f64) {
    let s = PlantState {
        delta: u[0],
        omega: 0.0,
        eqp: u[1],
        edp: u[2],
        q: u[3],
        ef: u[4],
        p1: u[5],
        p2: u[6],
        p3: u[7],
    };
    (s, u[8], u[9])
}

/// Closed-form machine initialization from a terminal voltage and current
/// phasor in the network frame. Returns the unknown vector layout used by
/// the equilibrium search.
fn machine_guess(p: &GenParams, v: Complex64, i: Complex64) -> [f64; EQ_UNKNOWNS] {
    let e_q = v + Complex64::new(p.r, p.x_q) * i;
    let delta = e_q.arg();
    let back = Complex64::from_polar(1.0, -(delta - FRAC_PI_2));
    let (vdq, idq) = (v * back, i * back);
    let (i_d, i_q, v_q) = (idq.re, idq.im, vdq.im);
    let edp = (p.x_q - p.x_qp) * i_q;
    let eqp = v_q + p.r * i_q + p.x_dp * i_d;
    let ef = eqp + (p.x_d - p.x_dp) * i_d;
    let pm = (v * i.conj()).re + p.r * i.norm_sqr();
    let err = ef / p.k_a;
    let q = (1.0 - p.t_c / p.t_b) * err;
    [delta, eqp, edp, q, ef, 0.0, 0.0, 0.0, pm, v.norm() + err]
}

fn initial_guess(sc: &Scenario) -> Vec<f64> {
    let mut u = Vec::with_capacity(EQ_UNKNOWNS * sc.generators.len());
    let smib_angle = match &sc.network {
        NetworkModel::Smib(n) => {
            let (src, z) = n.thevenin();
            let d = &sc.generators[0].dispatch;
            let s = (d.p_t * z.norm() / (d.v_t * src.norm())).clamp(-0.9, 0.9);
            Some(src.arg() + s.asin() + z.arg() - FRAC_PI_2)
        }
        NetworkModel::MultiMachine(_) => None,
    };
    for g in &sc.generators {
        let d = g.dispatch;
        let v = Complex64::from_polar(d.v_t, smib_angle.unwrap_or(0.0));
        let i = (Complex64::new(d.p_t, 0.0) / v).conj();
        u.extend_from_slice(&machine_guess(&g.params, v, i));
    }
    u
}

fn equilibrium_residual(sc: &Scenario, u: &[f64]) -> Result<Vec<f64>> {
    let n = sc.generators.len();
    let mut params = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut pms = Vec::with_capacity(n);
    for (g, chunk) in sc.generators.iter().zip(u.chunks(EQ_UNKNOWNS)) {
        let (s, pm, v_ref) = unpack(chunk);
        params.push(GenParams { v_ref, ..g.params });
        states.push(s);
        pms.push(pm);
    }
    let scales = vec![1.0; sc.n_loads()];
    let terms = sc.solve_network(&params, &states, &scales)?;
    let infinite = sc.has_infinite_bus();
    let mut r = Vec::with_capacity(EQ_UNKNOWNS * n);
    for (k, g) in sc.generators.iter().enumerate() {
        let dc = derive_consts(&params[k])?;
        let ds = plant_rhs(&states[k], pms[k], &terms[k].sample, &params[k], &dc);
        r.extend_from_slice(&ds.to_array()[1..]);
        if k == 0 && !infinite {
            r.push(states[k].delta);
        } else {
            r.push(terms[k].sample.p_t - g.dispatch.p_t);
        }
        r.push(terms[k].sample.v_t - g.dispatch.v_t);
    }
    Ok(r)
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Damped Newton search for the closed-loop equilibrium at the dispatch.
/// Speeds are zero at equilibrium; mechanical powers and voltage references
/// are solved along with the states. Without an infinite bus the first
/// generator sets the angle reference and balances the power.
pub fn find_equilibrium(sc: &Scenario) -> Result<OperatingPoint> {
    sc.validate()?;
    let mut u = initial_guess(sc);
    let m = u.len();
    let mut r = equilibrium_residual(sc, &u)?;
    for _ in 0..60 {
        if norm_inf(&r) < 1e-13 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            let step = 1e-7 * u[j].abs().max(1.0);
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += step;
            dn[j] -= step;
            let rp = equilibrium_residual(sc, &up)?;
            let rm = equilibrium_residual(sc, &dn)?;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * step);
            }
        }
        let dir = jac
            .lu()
            .solve(&DVector::from_column_slice(&r))
            .ok_or_else(|| Error::Equilibrium("singular Jacobian".into()))?;
        let current = norm_inf(&r);
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = u
                .iter()
                .zip(dir.iter())
                .map(|(a, d)| a - lambda * d)
                .collect();
            if let Ok(rt) = equilibrium_residual(sc, &trial) {
                if norm_inf(&rt) < current || lambda < 1e-4 {
                    u = trial;
                    r = rt;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(Error::Equilibrium("line search stalled".into()));
            }
        }
    }
    let res = norm_inf(&r);
    if res > 1e-10 {
        return Err(Error::Equilibrium(format!("residual {res:e} after Newton")));
    }
    let mut op = OperatingPoint {
        params: Vec::new(),
        states: Vec::new(),
        pm: Vec::new(),
    };
    for (g, chunk) in sc.generators.iter().zip(u.chunks(EQ_UNKNOWNS)) {
        let (s, pm, v_ref) = unpack(chunk);
        op.params.push(GenParams { v_ref, ..g.params });
        op.states.push(s);
        op.pm.push(pm);
    }
    Ok(op)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub states: Vec<PlantState>,
    /// Noiseless terminal measurements, one per generator.
    pub terminals: Vec<PmuSample>,
    /// Speed/angle extension integrated alongside the plant from zero.
    pub extension: Vec<ExtensionState>,
}

/// Uniformly sampled closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub names: Vec<String>,
    pub params: Vec<GenParams>,
    pub pm: Vec<f64>,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn t_end(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.t)
    }
}

struct PlantRhs<'a> {
    sc: &'a Scenario,
    params: &'a [GenParams],
    consts: Vec<DerivedConsts>,
    pm: &'a [f64],
    path: &'a LoadPath,
}

impl PlantRhs<'_> {
    fn terminals(
        &self,
        x: &[f64],
        k: usize,
        frac: f64,
    ) -> Result<(Vec<PlantState>, Vec<Terminal>)> {
        let n = self.params.len();
        let states: Vec<PlantState> = x[..n * PlantState::DIM]
            .chunks(PlantState::DIM)
            .map(PlantState::from_slice)
            .collect();
        let scales = self.path.scales(k, frac);
        let terms = self.sc.solve_network(self.params, &states, &scales)?;
        Ok((states, terms))
    }

    fn eval(&self, x: &[f64], k: usize, frac: f64, dx: &mut [f64]) -> Result<()> {
        let (states, terms) = self.terminals(x, k, frac)?;
        for (g, (s, term)) in states.iter().zip(&terms).enumerate() {
            let y = &term.sample;
            let ds = plant_rhs(s, self.pm[g], y, &self.params[g], &self.consts[g]);
            dx[g * PlantState::DIM..(g + 1) * PlantState::DIM].copy_from_slice(&ds.to_array());
            let e = ext_offset(states.len(), g);
            let v = ExtensionState {
                v1: x[e],
                v2: x[e + 1],
            };
            let dv = extension_rhs(&v, self.pm[g], y.i_t, y.p_t, &self.consts[g]);
            dx[e] = dv.v1;
            dx[e + 1] = dv.v2;
        }
        Ok(())
    }
}

fn ext_offset(n_gen: usize, g: usize) -> usize {
    n_gen * PlantState::DIM + 2 * g
}

fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParameter {
            name: "h",
            reason: format!("step must be positive, got {h}"),
        });
    }
    if !(t_end >= h) {
        return Err(Error::InvalidParameter {
            name: "t_end",
            reason: format!("horizon {t_end} shorter than step {h}"),
        });
    }
    Ok((t_end / h + 1e-9).floor() as usize)
}

/// Integrate from `initial` with fixed-step RK4, solving the network at
/// every stage. Mechanical power is held at the operating-point value.
pub fn integrate_from(
    sc: &Scenario,
    op: &OperatingPoint,
    initial: &[PlantState],
    t_end: f64,
    h: f64,
) -> Result<Trajectory> {
    let n_steps = step_count(t_end, h)?;
    let path = load_fluctuation(&sc.loads, sc.n_loads(), h, n_steps, sc.seed);
    let consts = op
        .params
        .iter()
        .map(derive_consts)
        .collect::<Result<Vec<_>>>()?;
    let rhs = PlantRhs {
        sc,
        params: &op.params,
        consts,
        pm: &op.pm,
        path: &path,
    };

    let mut x: Vec<f64> = initial.iter().flat_map(|s| s.to_array()).collect();
    x.extend(std::iter::repeat_n(0.0, 2 * initial.len()));
    let mut points = Vec::with_capacity(n_steps + 1);
    let record = |k: usize, x: &[f64], points: &mut Vec<TrajectoryPoint>| -> Result<()> {
        let t = k as f64 * h;
        let (states, terms) = rhs.terminals(x, k, 0.0)?;
        let extension = (0..states.len())
            .map(|g| {
                let e = ext_offset(states.len(), g);
                ExtensionState {
                    v1: x[e],
                    v2: x[e + 1],
                }
            })
            .collect();
        points.push(TrajectoryPoint {
            t,
            states,
            extension,
            terminals: terms
                .iter()
                .map(|term| PmuSample { t, ..term.sample })
                .collect(),
        });
        Ok(())
    };
    record(0, &x, &mut points)?;
    for k in 0..n_steps {
        let t0 = k as f64 * h;
        let mut f = |t: f64, xs: &[f64], dx: &mut [f64]| rhs.eval(xs, k, (t - t0) / h, dx);
        rk4_step(&mut f, t0, &mut x, h)?;
        let worst = norm_inf(&x);
        if !worst.is_finite() || worst > sc.divergence_bound {
            return Err(Error::Diverged {
                t: (k + 1) as f64 * h,
                reason: format!(
                    "state magnitude {worst:e} exceeds bound {:e}",
                    sc.divergence_bound
                ),
            });
        }
        record(k + 1, &x, &mut points)?;
    }
    Ok(Trajectory {
        h,
        names: sc.generators.iter().map(|g| g.name.clone()).collect(),
        params: op.params.clone(),
        pm: op.pm.clone(),
        points,
    })
}

/// Find the equilibrium and integrate the scenario from it.
pub fn integrate(sc: &Scenario, t_end: f64, h: f64) -> Result<Trajectory> {
    step_count(t_end, h)?;
    let op = find_equilibrium(sc)?;
    integrate_from(sc, &op, &op.states.clone(), t_end, h)
}

/// Measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Applied to `V_t` and `I_t` (pu).
    #[serde(default)]
    pub magnitude_std: f64,
    /// Applied to `theta_t` and `phi_t` (rad).
    #[serde(default)]
    pub angle_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn is_noiseless(&self) -> bool {
        self.magnitude_std == 0.0 && self.angle_std == 0.0
    }
}

/// One PMU frame together with the generator inputs and, for simulated
/// streams, the index of the trajectory point it was taken from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmuFrame {
    pub sample: PmuSample,
    pub u1: f64,
    pub u2: Option<f64>,
    pub step: Option<usize>,
}

/// Sample generator `gen` of the trajectory at `rate` Hz. Each frame takes
/// the latest integration point at or before `j / rate` and carries that
/// point's time stamp. Noise perturbs the magnitude and angle channels;
/// active and reactive power are recomputed from the noisy phasors.
pub fn sample_pmu(
    tr: &Trajectory,
    gen: usize,
    rate: f64,
    noise: &NoiseSpec,
) -> Result<Vec<PmuFrame>> {
    let max = 1.0 / tr.h;
    if !(rate > 0.0) || rate > max * (1.0 + 1e-12) {
        return Err(Error::SamplingRate { rate, max });
    }
    if !(noise.magnitude_std >= 0.0 && noise.angle_std >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "noise",
            reason: "standard deviations must be nonnegative".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(1000 + gen as u64);
    let mag = Normal::new(0.0, noise.magnitude_std).expect("validated std");
    let ang = Normal::new(0.0, noise.angle_std).expect("validated std");

    let t_end = tr.t_end();
    let mut frames = Vec::new();
    for j in 0.. {
        let t_nominal = j as f64 / rate;
        if t_nominal >= t_end - 1e-12 {
            break;
        }
        let idx = ((t_nominal / tr.h) + 1e-9).floor() as usize;
        let point = &tr.points[idx];
        let mut y = point.terminals[gen];
        if !noise.is_noiseless() {
            y.theta_t += ang.sample(&mut rng);
            y.v_t += mag.sample(&mut rng);
            y.phi_t += ang.sample(&mut rng);
            y.i_t += mag.sample(&mut rng);
            let (s, c) = (y.theta_t - y.phi_t).sin_cos();
            y.p_t = y.v_t * y.i_t * c;
            y.q_t = y.v_t * y.i_t * s;
        }
        frames.push(PmuFrame {
            sample: y,
            u1: tr.pm[gen],
            u2: Some(point.states[gen].ef),
            step: Some(idx),
        });
    }
    Ok(frames)
}
