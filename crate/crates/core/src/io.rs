//! CSV artifacts, metric summaries and run manifests.
//!
//! Floats are written with Rust's shortest round-trip formatting so that
//! files are reproducible bit for bit and re-read without loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{ErrorSummary, EstimateRecord};
use crate::model::PmuSample;
use crate::observer::{unwrap_near, EstimatorTrace};
use crate::sim::{PmuFrame, Trajectory};

const STATE_NAMES: [&str; 9] = ["delta", "omega", "eqp", "edp", "q", "ef", "p1", "p2", "p3"];
const TERMINAL_NAMES: [&str; 6] = ["theta_t", "v_t", "phi_t", "i_t", "p_t", "q_t"];
pub const PMU_COLUMNS: [&str; 9] = [
    "t", "theta_t", "v_t", "phi_t", "i_t", "p_t", "q_t", "u1", "u2",
];

fn num(v: f64) -> String {
    format!("{v}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Full closed-loop trajectory: time, then every plant state and terminal
/// quantity of every generator, prefixed by the generator name.
pub fn write_trajectory(path: &Path, tr: &Trajectory) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    for name in &tr.names {
        for s in STATE_NAMES.iter().chain(&TERMINAL_NAMES) {
            header.push(format!("{name}.{s}"));
        }
    }
    w.write_record(&header)?;
    for p in &tr.points {
        let mut row = vec![num(p.t)];
        for (s, y) in p.states.iter().zip(&p.terminals) {
            row.extend(s.to_array().iter().map(|v| num(*v)));
            row.extend(
                [y.theta_t, y.v_t, y.phi_t, y.i_t, y.p_t, y.q_t]
                    .iter()
                    .map(|v| num(*v)),
            );
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pmu(path: &Path, frames: &[PmuFrame]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(PMU_COLUMNS)?;
    for f in frames {
        let y = &f.sample;
        let mut row: Vec<String> = [y.t, y.theta_t, y.v_t, y.phi_t, y.i_t, y.p_t, y.q_t, f.u1]
            .iter()
            .map(|v| num(*v))
            .collect();
        row.push(f.u2.map(num).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn row_error(path: &Path, row: usize, reason: impl Into<String>) -> Error {
    Error::CsvRow {
        path: path.display().to_string(),
        row,
        reason: reason.into(),
    }
}

/// Read a PMU stream. Rows are numbered as file lines (header is line 1).
/// The `u2` column may be absent or have empty cells. Angles are unwrapped
/// against the previous row.
pub fn read_pmu(path: &Path) -> Result<Vec<PmuFrame>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut idx = [0usize; 8];
    for (k, name) in PMU_COLUMNS[..8].iter().enumerate() {
        idx[k] = col(name).ok_or_else(|| row_error(path, 1, format!("missing column `{name}`")))?;
    }
    let u2_col = col("u2");

    let mut frames: Vec<PmuFrame> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| row_error(path, line, e.to_string()))?;
        let field = |i: usize, name: &str| -> Result<f64> {
            let s = rec
                .get(i)
                .ok_or_else(|| row_error(path, line, format!("missing `{name}`")))?;
            let v: f64 = s
                .parse()
                .map_err(|_| row_error(path, line, format!("`{name}` is not a number: {s:?}")))?;
            if !v.is_finite() {
                return Err(row_error(path, line, format!("`{name}` is not finite")));
            }
            Ok(v)
        };
        let v: Vec<f64> = PMU_COLUMNS[..8]
            .iter()
            .zip(idx)
            .map(|(name, i)| field(i, name))
            .collect::<Result<_>>()?;
        let u2 = match u2_col.and_then(|i| rec.get(i)) {
            None | Some("") => None,
            Some(_) => Some(field(u2_col.unwrap(), "u2")?),
        };
        let mut y = PmuSample {
            t: v[0],
            theta_t: v[1],
            v_t: v[2],
            phi_t: v[3],
            i_t: v[4],
            p_t: v[5],
            q_t: v[6],
        };
        if let Some(prev) = frames.last() {
            if !(y.t > prev.sample.t) {
                return Err(row_error(path, line, "time stamps must increase"));
            }
            y.theta_t = unwrap_near(y.theta_t, prev.sample.theta_t);
            y.phi_t = unwrap_near(y.phi_t, prev.sample.phi_t);
        }
        frames.push(PmuFrame {
            sample: y,
            u1: v[7],
            u2,
            step: None,
        });
    }
    if frames.is_empty() {
        return Err(Error::EmptyStream);
    }
    Ok(frames)
}

/// Machine states `(delta, omega, eqp, edp)` of generator `name` from a
/// trajectory file, as `(t, x)` rows.
pub fn read_machine_states(path: &Path, name: &str) -> Result<Vec<(f64, [f64; 4])>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = r.headers()?.clone();
    let col = |c: &str| header.iter().position(|h| h == c);
    let t_col = col("t").ok_or_else(|| row_error(path, 1, "missing column `t`"))?;
    let mut cols = [0usize; 4];
    for (k, s) in STATE_NAMES[..4].iter().enumerate() {
        let c = format!("{name}.{s}");
        cols[k] = col(&c).ok_or_else(|| row_error(path, 1, format!("missing column `{c}`")))?;
    }
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| row_error(path, line, e.to_string()))?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| row_error(path, line, format!("bad value in column {}", i + 1)))
        };
        out.push((
            get(t_col)?,
            [get(cols[0])?, get(cols[1])?, get(cols[2])?, get(cols[3])?],
        ));
    }
    Ok(out)
}

/// Estimates with truth and per-state error; truth and error cells are empty
/// when no truth is available.
pub fn write_estimates(path: &Path, records: &[EstimateRecord]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    for prefix in ["xhat", "x", "e"] {
        header.extend((1..=4).map(|i| format!("{prefix}{i}")));
    }
    header.push("gap".into());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![num(r.t)];
        row.extend(r.xhat.iter().map(|v| num(*v)));
        match (r.x, r.error()) {
            (Some(x), Some(e)) => {
                row.extend(x.iter().map(|v| num(*v)));
                row.extend(e.iter().map(|v| num(*v)));
            }
            _ => row.extend(std::iter::repeat_n(String::new(), 8)),
        }
        row.push(if r.gap { "1" } else { "0" }.into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_estimator_trace(path: &Path, trace: &[EstimatorTrace]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "t",
        "theta1",
        "theta2",
        "delta",
        "z",
        "f_norm",
        "residual",
        "min_eig",
        "psi1_norm",
    ])?;
    for e in trace {
        w.write_record(
            [
                e.t,
                e.theta1,
                e.theta2,
                e.delta,
                e.z,
                e.f_norm,
                e.residual,
                e.min_eig,
                e.psi1_norm,
            ]
            .map(num),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "none".into())
}

/// Flat `key = value` lines; `extra` entries come first.
pub fn format_metrics(summary: &ErrorSummary, extra: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in extra {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str(&format!("threshold = {}\n", num(summary.threshold)));
    out.push_str(&format!(
        "settling_time = {}\n",
        opt(summary.settling_time())
    ));
    for (i, s) in summary.states.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!("x{n}.rmse = {}\n", num(s.rmse)));
        out.push_str(&format!("x{n}.settling_time = {}\n", opt(s.settling_time)));
        out.push_str(&format!(
            "x{n}.max_after_settling = {}\n",
            opt(s.max_after_settling)
        ));
    }
    out
}

/// Parse a metrics file back into ordered `(key, value)` pairs.
pub fn parse_metrics(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once(" = ")
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("metrics line {}: expected `key = value`", i + 1))
                })
        })
        .collect()
}

/// Write through a temporary sibling and rename, so readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub wall_clock_s: f64,
    pub outputs: Vec<PathBuf>,
    /// Resolved scenario configuration, as TOML.
    pub config: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{error_metrics, MetricsWindow};

    fn frames() -> Vec<PmuFrame> {
        (0..5)
            .map(|k| {
                let t = k as f64 / 60.0;
                PmuFrame {
                    sample: PmuSample {
                        t,
                        theta_t: 0.1 + 0.37 * t,
                        v_t: 1.0 + 1e-3 * t,
                        phi_t: 0.05,
                        i_t: 0.8,
                        p_t: 0.79,
                        q_t: 0.1 / 3.0,
                    },
                    u1: 0.8,
                    u2: if k == 2 { None } else { Some(1.9) },
                    step: None,
                }
            })
            .collect()
    }

    #[test]
    fn pmu_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pmu.csv");
        let fs_in = frames();
        write_pmu(&p, &fs_in).unwrap();
        let back = read_pmu(&p).unwrap();
        assert_eq!(back, fs_in);
    }

    #[test]
    fn corrupt_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pmu.csv");
        write_pmu(&p, &frames()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen("1", "x", 1);
        fs::write(&p, lines.join("\n")).unwrap();
        match read_pmu(&p) {
            Err(Error::CsvRow { row, .. }) => assert_eq!(row, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pmu.csv");
        fs::write(&p, "t,theta_t,v_t\n0,0,1\n").unwrap();
        let err = read_pmu(&p).unwrap_err();
        assert!(err.to_string().contains("phi_t"));
    }

    #[test]
    fn angles_unwrapped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pmu.csv");
        fs::write(
            &p,
            "t,theta_t,v_t,phi_t,i_t,p_t,q_t,u1\n0,3.1,1,3.0,1,1,0,1\n0.1,-3.1,1,-3.2,1,1,0,1\n",
        )
        .unwrap();
        let f = read_pmu(&p).unwrap();
        assert!((f[1].sample.theta_t - (2.0 * std::f64::consts::PI - 3.1)).abs() < 1e-12);
        assert!(f.iter().all(|f| f.u2.is_none()));
    }

    #[test]
    fn estimates_and_metrics_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            EstimateRecord {
                t: 0.0,
                xhat: [1.5, 0.0, 1.0, 0.2],
                x: Some([1.0, 0.0, 1.0, 0.2]),
                gap: false,
            },
            EstimateRecord {
                t: 0.1,
                xhat: [1.0, 0.0, 1.0, 0.2],
                x: None,
                gap: true,
            },
        ];
        let p = dir.path().join("est.csv");
        write_estimates(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "t,xhat1,xhat2,xhat3,xhat4,x1,x2,x3,x4,e1,e2,e3,e4,gap"
        );
        assert_eq!(lines[1], "0,1.5,0,1,0.2,1,0,1,0.2,0.5,0,0,0,0");
        assert_eq!(lines[2], "0.1,1,0,1,0.2,,,,,,,,,1");

        let m = error_metrics(&recs, &MetricsWindow::default()).unwrap();
        let text = format_metrics(&m, &[("observer".into(), "partial".into())]);
        let kv = parse_metrics(&text).unwrap();
        assert_eq!(kv[0], ("observer".into(), "partial".into()));
        assert!(kv.iter().any(|(k, v)| k == "x1.rmse" && v == "0.5"));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("manifest.toml");
        let m = RunManifest {
            command: "simulate".into(),
            version: "0.1.0".into(),
            seed: 1,
            wall_clock_s: 0.5,
            outputs: vec!["a.csv".into()],
            config: "seed = 1\n".into(),
        };
        m.write(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("command = \"simulate\""));
        let names: Vec<_> = fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }
}
