//! Algebraic network equations that close the stator relation.
//!
//! Two networks are supported: a single machine behind a series line to an
//! infinite bus (with an optional constant-admittance load on the terminal
//! bus), and a general multimachine network with constant-admittance loads
//! and an optional infinite bus.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::model::{terminal_sample, DqPair, GenParams, PmuSample};

/// Terminal-side solution for one machine. `sample.t` is left at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terminal {
    pub currents: DqPair,
    pub voltages: DqPair,
    pub sample: PmuSample,
}

impl Terminal {
    fn from_dq(delta: f64, v: DqPair, i: DqPair) -> Self {
        Self {
            currents: i,
            voltages: v,
            sample: terminal_sample(0.0, delta, v, i),
        }
    }
}

/// Machine data the network solve needs.
#[derive(Debug, Clone, Copy)]
pub struct MachineView<'a> {
    pub params: &'a GenParams,
    pub delta: f64,
    pub eqp: f64,
    pub edp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmibNetwork {
    pub v_inf: f64,
    #[serde(default)]
    pub theta_inf: f64,
    pub r_e: f64,
    pub x_e: f64,
    /// Terminal-bus load conductance.
    #[serde(default)]
    pub load_g: f64,
    /// Terminal-bus load susceptance (negative for inductive loads).
    #[serde(default)]
    pub load_b: f64,
}

impl SmibNetwork {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.v_inf > 0.0) {
            return bad("v_inf", "must be positive");
        }
        if !(self.r_e >= 0.0) {
            return bad("r_e", "must be nonnegative");
        }
        if !(self.x_e > 0.0) {
            return bad("x_e", "must be positive");
        }
        if !(self.load_g.is_finite() && self.load_b.is_finite() && self.theta_inf.is_finite()) {
            return bad("load", "must be finite");
        }
        Ok(())
    }

    /// Copy with the terminal load admittance multiplied by `scale`.
    pub fn with_load_scale(&self, scale: f64) -> Self {
        Self {
            load_g: self.load_g * scale,
            load_b: self.load_b * scale,
            ..*self
        }
    }

    /// Thevenin source and impedance seen from the generator terminal.
    pub fn thevenin(&self) -> (Complex64, Complex64) {
        let z_line = Complex64::new(self.r_e, self.x_e);
        let y_load = Complex64::new(self.load_g, self.load_b);
        let k = Complex64::new(1.0, 0.0) + z_line * y_load;
        (
            Complex64::from_polar(self.v_inf, self.theta_inf) / k,
            z_line / k,
        )
    }
}

/// Closed-form SMIB solve: line impedance (Thevenin-reduced when a terminal
/// load is present) is absorbed into the stator equation.
pub fn solve_smib(
    delta: f64,
    eqp: f64,
    edp: f64,
    p: &GenParams,
    n: &SmibNetwork,
) -> Result<Terminal> {
    let (source, z) = n.thevenin();
    let (rs, xd, xq) = (p.r + z.re, p.x_dp + z.im, p.x_qp + z.im);
    let det = rs * rs + xd * xq;
    if det.abs() < 1e-14 || !det.is_finite() {
        return Err(Error::SingularNetwork(format!("SMIB determinant {det:e}")));
    }
    let (sn, cs) = (delta - source.arg()).sin_cos();
    let alpha = eqp - source.norm() * cs;
    let beta = edp - source.norm() * sn;
    let i = DqPair::new(
        (rs * alpha - xd * beta) / det,
        (xq * alpha + rs * beta) / det,
    );
    let v = DqPair::new(
        eqp - p.r * i.q - p.x_dp * i.d,
        edp + p.x_qp * i.q - p.r * i.d,
    );
    Ok(Terminal::from_dq(delta, v, i))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, split equally between the ends.
    #[serde(default)]
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub bus: usize,
    pub g: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfiniteBus {
    pub bus: usize,
    pub v: f64,
    #[serde(default)]
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiMachineNetwork {
    pub n_bus: usize,
    pub ybus: DMatrix<Complex64>,
    pub gen_bus: Vec<usize>,
    pub loads: Vec<Load>,
    pub infinite: Option<InfiniteBus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSolution {
    pub bus_voltages: Vec<Complex64>,
    pub terminals: Vec<Terminal>,
}

/// Real 2x2 block, row-major.
type Block = [[f64; 2]; 2];

fn rot(angle: f64) -> Block {
    let (s, c) = angle.sin_cos();
    [[c, -s], [s, c]]
}

fn mul(a: &Block, b: &Block) -> Block {
    let mut m = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

fn apply(a: &Block, v: [f64; 2]) -> [f64; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

fn complex_block(y: Complex64) -> Block {
    [[y.re, -y.im], [y.im, y.re]]
}

/// Stator admittance in (d, q) ordering: `[I_d; I_q] = K ([E_d'; E_q'] - [V_d; V_q])`.
fn stator_admittance(p: &GenParams) -> Result<Block> {
    let det = p.stator_det();
    if det.abs() < f64::MIN_POSITIVE {
        return Err(Error::SingularMachine(det));
    }
    Ok([[p.r / det, p.x_qp / det], [-p.x_dp / det, p.r / det]])
}

impl MultiMachineNetwork {
    pub fn new(
        n_bus: usize,
        branches: &[Branch],
        gen_bus: Vec<usize>,
        loads: Vec<Load>,
        infinite: Option<InfiniteBus>,
    ) -> Result<Self> {
        let check = |bus: usize, what: &str| {
            if bus >= n_bus {
                Err(Error::Config(format!(
                    "{what} refers to bus {bus} of {n_bus}"
                )))
            } else {
                Ok(())
            }
        };
        let mut ybus = DMatrix::from_element(n_bus, n_bus, Complex64::new(0.0, 0.0));
        for br in branches {
            check(br.from, "branch")?;
            check(br.to, "branch")?;
            if br.from == br.to {
                return Err(Error::Config(format!("branch loops on bus {}", br.from)));
            }
            let z = Complex64::new(br.r, br.x);
            if z.norm() == 0.0 {
                return Err(Error::Config("branch with zero impedance".into()));
            }
            let y = z.inv();
            let shunt = Complex64::new(0.0, br.b / 2.0);
            ybus[(br.from, br.from)] += y + shunt;
            ybus[(br.to, br.to)] += y + shunt;
            ybus[(br.from, br.to)] -= y;
            ybus[(br.to, br.from)] -= y;
        }
        for &b in &gen_bus {
            check(b, "generator")?;
        }
        for l in &loads {
            check(l.bus, "load")?;
        }
        if let Some(inf) = &infinite {
            check(inf.bus, "infinite bus")?;
            if !(inf.v > 0.0) {
                return Err(Error::Config(
                    "infinite bus voltage must be positive".into(),
                ));
            }
            if gen_bus.contains(&inf.bus) {
                return Err(Error::Config(
                    "generator attached to the infinite bus".into(),
                ));
            }
        }
        Ok(Self {
            n_bus,
            ybus,
            gen_bus,
            loads,
            infinite,
        })
    }

    /// Bus admittance matrix including the scaled load admittances.
    fn loaded_ybus(&self, load_scales: &[f64]) -> DMatrix<Complex64> {
        let mut y = self.ybus.clone();
        for (l, &s) in self.loads.iter().zip(load_scales) {
            y[(l.bus, l.bus)] += Complex64::new(l.g, l.b) * s;
        }
        y
    }

    /// Solve the network for the bus voltages given the machine internal
    /// states. `load_scales` holds one multiplier per load.
    pub fn solve(&self, machines: &[MachineView], load_scales: &[f64]) -> Result<MultiSolution> {
        if machines.len() != self.gen_bus.len() {
            return Err(Error::Config(format!(
                "{} machines for {} generator buses",
                machines.len(),
                self.gen_bus.len()
            )));
        }
        let y = self.loaded_ybus(load_scales);
        let fixed = self.infinite.map(|inf| inf.bus);
        let unknown: Vec<usize> = (0..self.n_bus).filter(|&b| Some(b) != fixed).collect();
        let mut slot = vec![usize::MAX; self.n_bus];
        for (k, &b) in unknown.iter().enumerate() {
            slot[b] = k;
        }
        let n = 2 * unknown.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);

        for (k, &bi) in unknown.iter().enumerate() {
            for bj in 0..self.n_bus {
                let blk = complex_block(y[(bi, bj)]);
                if Some(bj) == fixed {
                    let inf = self.infinite.unwrap();
                    let v = Complex64::from_polar(inf.v, inf.theta);
                    let c = apply(&blk, [v.re, v.im]);
                    rhs[2 * k] -= c[0];
                    rhs[2 * k + 1] -= c[1];
                } else {
                    let j = slot[bj];
                    for r in 0..2 {
                        for c in 0..2 {
                            a[(2 * k + r, 2 * j + c)] += blk[r][c];
                        }
                    }
                }
            }
        }

        let mut stator = Vec::with_capacity(machines.len());
        for (m, &bus) in machines.iter().zip(&self.gen_bus) {
            let kmat = stator_admittance(m.params)?;
            let r = m.delta - FRAC_PI_2;
            let y_gen = mul(&mul(&rot(r), &kmat), &rot(-r));
            let j_gen = apply(&mul(&rot(r), &kmat), [m.edp, m.eqp]);
            let k = slot[bus];
            for rr in 0..2 {
                for cc in 0..2 {
                    a[(2 * k + rr, 2 * k + cc)] += y_gen[rr][cc];
                }
                rhs[2 * k + rr] += j_gen[rr];
            }
            stator.push((kmat, r));
        }

        let x = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularNetwork("multimachine LU".into()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularNetwork("non-finite bus voltages".into()));
        }

        let mut bus_voltages = vec![Complex64::new(0.0, 0.0); self.n_bus];
        for (k, &b) in unknown.iter().enumerate() {
            bus_voltages[b] = Complex64::new(x[2 * k], x[2 * k + 1]);
        }
        if let Some(inf) = self.infinite {
            bus_voltages[inf.bus] = Complex64::from_polar(inf.v, inf.theta);
        }

        let terminals = machines
            .iter()
            .zip(&self.gen_bus)
            .zip(&stator)
            .map(|((m, &bus), (kmat, r))| {
                let vn = bus_voltages[bus];
                let vdq = apply(&rot(-r), [vn.re, vn.im]);
                let idq = apply(kmat, [m.edp - vdq[0], m.eqp - vdq[1]]);
                Terminal::from_dq(
                    m.delta,
                    DqPair::new(vdq[1], vdq[0]),
                    DqPair::new(idq[1], idq[0]),
                )
            })
            .collect();
        Ok(MultiSolution {
            bus_voltages,
            terminals,
        })
    }

    /// Current-balance residual at every non-infinite bus, with generator
    /// injections rebuilt from the terminal dq currents.
    pub fn kcl_residual(
        &self,
        sol: &MultiSolution,
        machines: &[MachineView],
        load_scales: &[f64],
    ) -> Vec<f64> {
        let y = self.loaded_ybus(load_scales);
        let mut inj = vec![Complex64::new(0.0, 0.0); self.n_bus];
        for ((m, &bus), term) in machines.iter().zip(&self.gen_bus).zip(&sol.terminals) {
            let i_dq = Complex64::new(term.currents.d, term.currents.q);
            inj[bus] += i_dq * Complex64::from_polar(1.0, m.delta - FRAC_PI_2);
        }
        (0..self.n_bus)
            .filter(|&b| self.infinite.map(|i| i.bus) != Some(b))
            .map(|b| {
                let mut sum = -inj[b];
                for j in 0..self.n_bus {
                    sum += y[(b, j)] * sol.bus_voltages[j];
                }
                sum.norm()
            })
            .collect()
    }
}
