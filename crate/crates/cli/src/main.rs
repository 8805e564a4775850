use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sgdse::config::ScenarioConfig;
use sgdse::io::{self, RunManifest};
use sgdse::runner::{self, GeneratorEstimates};
use sgdse::{acceptance, Error};

#[derive(Parser)]
#[command(
    name = "sgdse",
    version,
    about = "Simulate generators and estimate their states from PMU streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the trajectory and PMU streams.
    Simulate(RunArgs),
    /// Run the configured observers on a recorded or co-simulated stream.
    Observe(ObserveArgs),
    /// Run the acceptance suite and print one line per criterion.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ObserveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// PMU CSV to observe, or `inline` to simulate the scenario first.
    #[arg(long, default_value = "inline")]
    pmu_input: String,
    /// Generator the recorded stream belongs to; defaults to the first observed one.
    #[arg(long)]
    generator: Option<String>,
    /// Trajectory CSV supplying ground truth for a recorded stream.
    #[arg(long)]
    truth: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(args: &RunArgs) -> Result<(ScenarioConfig, PathBuf), Failure> {
    let mut cfg = ScenarioConfig::load(&args.config).map_err(|e| match e {
        Error::Config(_) => Failure::Usage(e.to_string()),
        _ => Failure::Usage(format!("{}: {e}", args.config.display())),
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            Failure::Usage("no output directory: pass --out or set output_dir".into())
        })?;
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn manifest(
    command: &str,
    cfg: &ScenarioConfig,
    out: &Path,
    files: Vec<PathBuf>,
    clock: Instant,
) -> Result<(), Failure> {
    let m = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        wall_clock_s: clock.elapsed().as_secs_f64(),
        outputs: files,
        config: cfg.to_toml()?,
    };
    m.write(&out.join("manifest.toml"))?;
    Ok(())
}

fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let clock = Instant::now();
    let (cfg, out) = load(args)?;
    let sim = runner::simulate(&cfg)?;
    let files = runner::write_simulation(&out, &cfg, &sim)?;
    println!(
        "simulated {} s of {} generator(s); wrote {} file(s) to {}",
        cfg.t_end,
        cfg.generators.len(),
        files.len(),
        out.display()
    );
    manifest("simulate", &cfg, &out, files, clock)
}

fn summarize(cfg: &ScenarioConfig, est: &GeneratorEstimates) {
    for (kind, summary) in est.summaries(cfg) {
        match summary.as_ref().map(|s| (s.threshold, s.settling_time())) {
            Some((th, Some(ts))) => println!(
                "{} {kind}: settling time {ts:.3} s (threshold {th:e})",
                est.name
            ),
            Some((th, None)) => println!("{} {kind}: errors did not settle below {th:e}", est.name),
            None => println!("{} {kind}: no ground truth, metrics skipped", est.name),
        }
    }
    if let Some(full) = &est.full {
        if full.t_c.is_none() {
            eprintln!(
                "warning: {}: interval excitation not reached (information rank {}/5); \
                 the parameter estimate has not converged",
                est.name, full.rank
            );
        }
    }
}

fn observe(args: &ObserveArgs) -> Result<(), Failure> {
    let clock = Instant::now();
    let (cfg, out) = load(&args.run)?;
    let (estimates, mut files) = if args.pmu_input == "inline" {
        if args.truth.is_some() || args.generator.is_some() {
            return Err(Failure::Usage(
                "--truth and --generator apply to recorded streams only".into(),
            ));
        }
        let (_, est, files) = runner::run_inline(&out, &cfg)?;
        (est, files)
    } else {
        let gen = match &args.generator {
            Some(name) => cfg
                .generators
                .iter()
                .position(|g| &g.name == name)
                .ok_or_else(|| Failure::Usage(format!("unknown generator `{name}`")))?,
            None => *cfg
                .observed()
                .first()
                .ok_or_else(|| Failure::Usage("config observes no generator".into()))?,
        };
        let frames = io::read_pmu(Path::new(&args.pmu_input))?;
        let truth = match &args.truth {
            Some(p) => {
                let rows = io::read_machine_states(p, &cfg.generators[gen].name)?;
                Some(runner::matched_truth(&rows, &frames))
            }
            None => None,
        };
        let est = runner::observe_generator(&cfg, gen, &frames, truth.as_deref())?;
        let files = runner::write_estimates(&out, &cfg, &est, &[])?;
        (vec![est], files)
    };
    for e in &estimates {
        summarize(&cfg, e);
    }
    files.sort();
    manifest("observe", &cfg, &out, files, clock)
}

fn verify() -> Result<(), Failure> {
    let reports = acceptance::run_all()?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{}/{} criteria passed",
        reports.len() - failed,
        reports.len()
    );
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} criterion(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Observe(a) => observe(a),
        Command::Verify => verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
