//! Scenario pipelines: simulate, sample, observe, summarize, write.

use std::path::{Path, PathBuf};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{error_metrics, ErrorSummary, EstimateRecord};
use crate::observer::{run_full, run_partial, FullRun};
use crate::sim::{integrate, sample_pmu, PmuFrame, Trajectory};

#[derive(Debug, Clone)]
pub struct Simulation {
    pub trajectory: Trajectory,
    /// PMU stream of every generator, in scenario order.
    pub frames: Vec<Vec<PmuFrame>>,
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<Simulation> {
    let sc = cfg.scenario()?;
    let trajectory = integrate(&sc, cfg.t_end, cfg.h)?;
    let noise = cfg.noise();
    let frames = (0..sc.generators.len())
        .map(|g| sample_pmu(&trajectory, g, cfg.pmu.rate, &noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation { trajectory, frames })
}

pub fn trajectory_file(dir: &Path) -> PathBuf {
    dir.join("trajectory.csv")
}

pub fn pmu_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("pmu_{name}.csv"))
}

pub fn write_simulation(
    dir: &Path,
    cfg: &ScenarioConfig,
    sim: &Simulation,
) -> Result<Vec<PathBuf>> {
    let mut out = vec![trajectory_file(dir)];
    io::write_trajectory(&out[0], &sim.trajectory)?;
    for (g, frames) in sim.frames.iter().enumerate() {
        let p = pmu_file(dir, &cfg.generators[g].name);
        io::write_pmu(&p, frames)?;
        out.push(p);
    }
    Ok(out)
}

/// Truth for each frame of a simulated stream.
pub fn simulated_truth(tr: &Trajectory, gen: usize, frames: &[PmuFrame]) -> Vec<Option<[f64; 4]>> {
    frames
        .iter()
        .map(|f| f.step.map(|k| tr.points[k].states[gen].machine()))
        .collect()
}

/// Truth for each frame from `(t, x)` rows, matched on time stamps.
pub fn matched_truth(rows: &[(f64, [f64; 4])], frames: &[PmuFrame]) -> Vec<Option<[f64; 4]>> {
    const TOL: f64 = 1e-9;
    let mut j = 0;
    frames
        .iter()
        .map(|f| {
            let t = f.sample.t;
            while j < rows.len() && rows[j].0 < t - TOL {
                j += 1;
            }
            rows.get(j).filter(|r| (r.0 - t).abs() <= TOL).map(|r| r.1)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GeneratorEstimates {
    pub gen: usize,
    pub name: String,
    pub partial: Option<Vec<EstimateRecord>>,
    pub full: Option<FullRun>,
}

impl GeneratorEstimates {
    pub fn summaries(&self, cfg: &ScenarioConfig) -> Vec<(&'static str, Option<ErrorSummary>)> {
        let w = cfg.metrics.window();
        let mut out = Vec::new();
        if let Some(r) = &self.partial {
            out.push(("partial", error_metrics(r, &w).ok()));
        }
        if let Some(f) = &self.full {
            out.push(("full", error_metrics(&f.records, &w).ok()));
        }
        out
    }
}

fn with_truth(
    mut records: Vec<EstimateRecord>,
    truth: Option<&[Option<[f64; 4]>]>,
) -> Vec<EstimateRecord> {
    if let Some(t) = truth {
        for (r, x) in records.iter_mut().zip(t) {
            r.x = *x;
        }
    }
    records
}

/// Run the configured observers of one generator on its stream.
pub fn observe_generator(
    cfg: &ScenarioConfig,
    gen: usize,
    frames: &[PmuFrame],
    truth: Option<&[Option<[f64; 4]>]>,
) -> Result<GeneratorEstimates> {
    let g = cfg
        .generators
        .get(gen)
        .ok_or_else(|| Error::Config(format!("no generator with index {gen}")))?;
    let kind = cfg.observer.kind;
    let settings = cfg.observer.settings;
    let rate = cfg.pmu.rate;
    let partial = if kind.runs_partial() {
        Some(with_truth(
            run_partial(frames, &g.params, settings, rate)?,
            truth,
        ))
    } else {
        None
    };
    let full = if kind.runs_full() {
        let mut run = run_full(frames, &g.params, settings, cfg.observer.estimator, rate)?;
        run.records = with_truth(run.records, truth);
        Some(run)
    } else {
        None
    };
    Ok(GeneratorEstimates {
        gen,
        name: g.name.clone(),
        partial,
        full,
    })
}

/// Generator index, its PMU frames and, when known, the true state per frame.
pub type Stream = (usize, Vec<PmuFrame>, Option<Vec<Option<[f64; 4]>>>);

/// Observe every configured generator, one worker thread per generator.
pub fn observe_all(cfg: &ScenarioConfig, streams: &[Stream]) -> Result<Vec<GeneratorEstimates>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = streams
            .iter()
            .map(|(g, frames, truth)| {
                s.spawn(move || observe_generator(cfg, *g, frames, truth.as_deref()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("observer worker panicked"))
            .collect()
    })
}

pub fn write_estimates(
    dir: &Path,
    cfg: &ScenarioConfig,
    est: &GeneratorEstimates,
    extra: &[(String, String)],
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let summaries = est.summaries(cfg);
    let mut emit =
        |kind: &str, records: &[EstimateRecord], more: Vec<(String, String)>| -> Result<()> {
            let p = dir.join(format!("estimates_{kind}_{}.csv", est.name));
            io::write_estimates(&p, records)?;
            out.push(p);
            let summary = summaries
                .iter()
                .find(|(k, _)| *k == kind)
                .and_then(|(_, s)| s.clone());
            if let Some(s) = summary {
                let mut kv = vec![
                    ("observer".to_string(), kind.to_string()),
                    ("generator".to_string(), est.name.clone()),
                    ("frames".to_string(), records.len().to_string()),
                    (
                        "gaps".to_string(),
                        records.iter().filter(|r| r.gap).count().to_string(),
                    ),
                ];
                kv.extend(extra.iter().cloned());
                kv.extend(more);
                let p = dir.join(format!("metrics_{kind}_{}.txt", est.name));
                io::write_atomic(&p, io::format_metrics(&s, &kv).as_bytes())?;
                out.push(p);
            }
            Ok(())
        };
    if let Some(r) = &est.partial {
        emit("partial", r, Vec::new())?;
    }
    if let Some(f) = &est.full {
        let more = vec![
            (
                "excitation_time".to_string(),
                f.t_c.map_or("none".to_string(), |t| format!("{t}")),
            ),
            ("information_rank".to_string(), f.rank.to_string()),
            (
                "min_abs_theta2".to_string(),
                format!("{}", f.min_abs_theta2),
            ),
            (
                "max_psi1_norm".to_string(),
                format!(
                    "{}",
                    f.trace.iter().map(|t| t.psi1_norm).fold(0.0, f64::max)
                ),
            ),
        ];
        emit("full", &f.records, more)?;
        let p = dir.join(format!("estimator_{}.csv", est.name));
        io::write_estimator_trace(&p, &f.trace)?;
        out.push(p);
    }
    Ok(out)
}

/// Simulate, observe with simulated truth, and write everything to `dir`.
pub fn run_inline(
    dir: &Path,
    cfg: &ScenarioConfig,
) -> Result<(Simulation, Vec<GeneratorEstimates>, Vec<PathBuf>)> {
    let sim = simulate(cfg)?;
    let mut files = write_simulation(dir, cfg, &sim)?;
    let streams: Vec<_> = cfg
        .observed()
        .into_iter()
        .map(|g| {
            let f = sim.frames[g].clone();
            let truth = simulated_truth(&sim.trajectory, g, &f);
            (g, f, Some(truth))
        })
        .collect();
    let est = observe_all(cfg, &streams)?;
    for e in &est {
        files.extend(write_estimates(dir, cfg, e, &[])?);
    }
    Ok((sim, est, files))
}
