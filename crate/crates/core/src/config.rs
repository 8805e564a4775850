//! Scenario files: one TOML document describing the plant, the disturbance,
//! the PMU stream and the observers to run.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::disturbance::LoadFluctuation;
use crate::drem::EstimatorConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsWindow;
use crate::model::GenParams;
use crate::network::{Branch, InfiniteBus, Load, MultiMachineNetwork, SmibNetwork};
use crate::observer::ObserverSettings;
use crate::sim::{Dispatch, Generator, NetworkModel, NoiseSpec, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulated horizon (s).
    pub t_end: f64,
    /// Integration step (s).
    pub h: f64,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(rename = "generator")]
    pub generators: Vec<GeneratorConfig>,
    pub network: NetworkConfig,
    #[serde(default)]
    pub loads: LoadFluctuation,
    pub pmu: PmuConfig,
    #[serde(default)]
    pub observer: ObserverConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_divergence_bound() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub name: String,
    /// Network bus (multimachine only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bus: Option<usize>,
    pub dispatch: Dispatch,
    pub params: GenParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetworkConfig {
    Smib(SmibNetwork),
    Multimachine(MultiMachineConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiMachineConfig {
    pub n_bus: usize,
    #[serde(rename = "branch")]
    pub branches: Vec<Branch>,
    #[serde(rename = "load", default)]
    pub loads: Vec<Load>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infinite: Option<InfiniteBus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmuConfig {
    /// Reporting rate (Hz); must not exceed `1 / h`.
    pub rate: f64,
    #[serde(default)]
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub magnitude_std: f64,
    #[serde(default)]
    pub angle_std: f64,
    /// Defaults to the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObserverKind {
    Full,
    #[default]
    Partial,
    Both,
}

impl ObserverKind {
    pub fn runs_full(self) -> bool {
        matches!(self, Self::Full | Self::Both)
    }

    pub fn runs_partial(self) -> bool {
        matches!(self, Self::Partial | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    #[serde(default)]
    pub kind: ObserverKind,
    /// Observed generators by name; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<String>>,
    #[serde(default)]
    pub settings: ObserverSettings,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Error threshold for the settling time.
    pub threshold: f64,
    /// RMSE window start (s).
    pub start: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            start: 0.0,
            end: None,
        }
    }
}

impl MetricsConfig {
    pub fn window(&self) -> MetricsWindow {
        MetricsWindow {
            start: self.start,
            end: self.end.unwrap_or(f64::INFINITY),
            threshold: self.threshold,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "h",
                reason: format!("must be positive, got {}", self.h),
            });
        }
        if !(self.t_end >= self.h) {
            return Err(Error::InvalidParameter {
                name: "t_end",
                reason: format!("must be at least h = {}, got {}", self.h, self.t_end),
            });
        }
        let max = 1.0 / self.h;
        if !(self.pmu.rate > 0.0) || self.pmu.rate > max * (1.0 + 1e-12) {
            return Err(Error::SamplingRate {
                rate: self.pmu.rate,
                max,
            });
        }
        let mut names = HashSet::new();
        for g in &self.generators {
            if !names.insert(g.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate generator name `{}`",
                    g.name
                )));
            }
        }
        if let Some(list) = &self.observer.generators {
            for n in list {
                if !names.contains(n.as_str()) {
                    return Err(Error::Config(format!(
                        "observer refers to unknown generator `{n}`"
                    )));
                }
            }
        }
        match &self.network {
            NetworkConfig::Smib(_) => {
                if let Some(g) = self.generators.iter().find(|g| g.bus.is_some()) {
                    return Err(Error::Config(format!(
                        "generator `{}` has a bus, but the SMIB network has none",
                        g.name
                    )));
                }
            }
            NetworkConfig::Multimachine(_) => {
                if let Some(g) = self.generators.iter().find(|g| g.bus.is_none()) {
                    return Err(Error::Config(format!("generator `{}` needs a bus", g.name)));
                }
            }
        }
        self.observer.settings.validate()?;
        self.observer.estimator.validate()?;
        if !(self.metrics.threshold > 0.0) {
            return Err(Error::InvalidParameter {
                name: "threshold",
                reason: format!("must be positive, got {}", self.metrics.threshold),
            });
        }
        self.scenario()?.validate()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let generators = self
            .generators
            .iter()
            .map(|g| Generator {
                name: g.name.clone(),
                params: g.params,
                dispatch: g.dispatch,
            })
            .collect();
        let network = match &self.network {
            NetworkConfig::Smib(n) => NetworkModel::Smib(*n),
            NetworkConfig::Multimachine(m) => {
                let gen_bus = self
                    .generators
                    .iter()
                    .map(|g| {
                        g.bus.ok_or_else(|| {
                            Error::Config(format!("generator `{}` needs a bus", g.name))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                NetworkModel::MultiMachine(MultiMachineNetwork::new(
                    m.n_bus,
                    &m.branches,
                    gen_bus,
                    m.loads.clone(),
                    m.infinite,
                )?)
            }
        };
        Ok(Scenario {
            generators,
            network,
            loads: self.loads.clone(),
            seed: self.seed,
            divergence_bound: self.divergence_bound,
        })
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            magnitude_std: self.pmu.noise.magnitude_std,
            angle_std: self.pmu.noise.angle_std,
            seed: self.pmu.noise.seed.unwrap_or(self.seed),
        }
    }

    /// Indices of the observed generators, in scenario order.
    pub fn observed(&self) -> Vec<usize> {
        match &self.observer.generators {
            None => (0..self.generators.len()).collect(),
            Some(list) => self
                .generators
                .iter()
                .enumerate()
                .filter(|(_, g)| list.contains(&g.name))
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMIB: &str = r#"
seed = 3
t_end = 2.0
h = 0.001

[[generator]]
name = "g1"
dispatch = { p_t = 0.8, v_t = 1.02 }
[generator.params]
h = 3.5
d = 0.0186
t_d0p = 6.0
t_q0p = 0.5
x_d = 1.1
x_dp = 0.25
x_q = 0.75
x_qp = 0.45
r = 0.005
omega0 = 376.99111843077515
k_a = 40.0
t_a = 0.05
t_b = 10.0
t_c = 1.0
k_p = 0.02
t_w = 10.0
t1 = 0.15
t2 = 0.05
t3 = 0.15
t4 = 0.05

[network]
kind = "smib"
v_inf = 1.0
r_e = 0.01
x_e = 0.4
load_g = 0.5
load_b = -0.1

[pmu]
rate = 60.0
"#;

    #[test]
    fn parses_minimal_smib() {
        let cfg = ScenarioConfig::from_toml(SMIB).unwrap();
        assert_eq!(cfg.generators.len(), 1);
        assert_eq!(cfg.observer.kind, ObserverKind::Partial);
        assert_eq!(cfg.noise().seed, 3);
        assert_eq!(cfg.observed(), vec![0]);
        assert!(matches!(
            cfg.scenario().unwrap().network,
            NetworkModel::Smib(_)
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::from_toml(SMIB).unwrap();
        let again = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = SMIB.replace("seed = 3", "seed = 3\nsed = 4");
        assert!(matches!(
            ScenarioConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
        let text = SMIB.replace("x_e = 0.4", "x_e = 0.4\nx_f = 1.0");
        assert!(ScenarioConfig::from_toml(&text).is_err());
        let text = SMIB.replace("t4 = 0.05", "t4 = 0.05\nt5 = 0.05");
        assert!(ScenarioConfig::from_toml(&text).is_err());
    }

    #[test]
    fn sampling_rate_bounded_by_step() {
        let text = SMIB.replace("rate = 60.0", "rate = 2000.0");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::SamplingRate { .. }));
        assert!(err.to_string().contains("1/h"));
    }

    #[test]
    fn observer_must_name_existing_generator() {
        let text = format!("{SMIB}\n[observer]\nkind = \"both\"\ngenerators = [\"g7\"]\n");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("g7"));
    }

    #[test]
    fn malformed_values_are_not_defaulted() {
        let text = SMIB.replace("rate = 60.0", "rate = \"fast\"");
        assert!(ScenarioConfig::from_toml(&text).is_err());
        let text = format!("{SMIB}\n[observer]\nkind = \"half\"\n");
        assert!(ScenarioConfig::from_toml(&text).is_err());
    }

    #[test]
    fn nested_observer_tables() {
        let text = format!(
            "{SMIB}\n[observer]\nkind = \"full\"\n[observer.settings]\nhold = \"zoh\"\n[observer.estimator]\ngamma_g = 20.0\n"
        );
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        assert!(cfg.observer.kind.runs_full() && !cfg.observer.kind.runs_partial());
        assert_eq!(cfg.observer.settings.hold, crate::observer::Hold::Zoh);
        assert_eq!(cfg.observer.estimator.gamma_g, 20.0);
        assert_eq!(cfg.observer.estimator.gamma1, 100.0);
    }

    #[test]
    fn multimachine_requires_buses() {
        let text = SMIB.replace(
            "[network]\nkind = \"smib\"\nv_inf = 1.0\nr_e = 0.01\nx_e = 0.4\nload_g = 0.5\nload_b = -0.1",
            "[network]\nkind = \"multimachine\"\nn_bus = 2\nbranch = [{ from = 0, to = 1, r = 0.01, x = 0.3 }]\ninfinite = { bus = 1, v = 1.0 }",
        );
        assert!(ScenarioConfig::from_toml(&text)
            .unwrap_err()
            .to_string()
            .contains("needs a bus"));
        let with_bus = text.replace("name = \"g1\"", "name = \"g1\"\nbus = 0");
        let cfg = ScenarioConfig::from_toml(&with_bus).unwrap();
        assert!(matches!(
            cfg.scenario().unwrap().network,
            NetworkModel::MultiMachine(_)
        ));
        let bad = text.replace("name = \"g1\"", "name = \"g1\"\nbus = 5");
        assert!(ScenarioConfig::from_toml(&bad).is_err());
    }
}
