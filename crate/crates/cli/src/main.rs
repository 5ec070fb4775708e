//! `optocal`: generate synthetic datasets, fit, calibrate and self-test.
//!
//! Exit codes: 0 success, 1 computational failure, 2 I/O or configuration
//! failure. Summaries go to stdout, diagnostics to stderr, artifacts to files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optocal::dataset::{self, MANIFEST_FILE};
use optocal::pipeline::report::REPORT_FILE;
use optocal::pipeline::{run_calibration, CalibrationConfig, CalibrationReport, Stage, DEFAULT_MC_SAMPLES, DEFAULT_SEED};
use optocal::selftest;
use optocal::synth::{self, ScenarioConfig};

#[derive(Parser)]
#[command(name = "optocal", version, about = "Absolute phonon-occupation calibration for microwave optomechanics")]
struct Cli {
    /// Print pipeline notices to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset from a scenario file.
    Generate {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: u64,
        /// Multiplies every noise amplitude; 0 gives a noiseless dataset.
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
    },
    /// Cavity, cavity-TLS and TWPA-TLS fits only.
    Fit(RunArgs),
    /// Full calibration to A_ph/n_ph.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        no_twpa_correction: bool,
        /// Include the quantum sideband asymmetry in the expected occupation.
        #[arg(long)]
        asymmetry: bool,
        /// Monte-Carlo samples per run; 0 skips propagation.
        #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
        mc_samples: usize,
    },
    /// Re-render the summary and plot CSVs from a saved report.
    Report {
        report: PathBuf,
        /// Directory for the CSVs; none writes nothing.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the embedded invariant suite.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest, or the directory containing it.
    manifest: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Compute(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Compute(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn generate(scenario: &Path, out: &Path, seed: u64, noise_scale: f64) -> CmdResult {
    let text = fs::read_to_string(scenario).map_err(|e| io_err(scenario, e))?;
    let mut sc = ScenarioConfig::from_toml(&text).map_err(|e| io_err(scenario, e))?;
    if !(noise_scale.is_finite() && noise_scale >= 0.0) {
        return Err(Failure::Io(format!("--noise-scale must be >= 0, got {noise_scale}")));
    }
    sc.seed = seed;
    sc.noise = sc.noise.scaled(noise_scale);
    let syn = synth::synthesize(&sc).map_err(|e| Failure::Compute(e.to_string()))?;
    syn.write(out).map_err(|e| Failure::Io(e.to_string()))?;
    let temps: std::collections::BTreeSet<u64> = syn.manifest.runs.iter().map(|r| (r.t_cryo_k * 1e6).round() as u64).collect();
    println!(
        "wrote {} runs to {} (seed {seed}, {} temperatures, {:.1}-{:.1} mK)",
        syn.manifest.runs.len(),
        out.display(),
        temps.len(),
        *temps.first().unwrap_or(&0) as f64 * 1e-3,
        *temps.last().unwrap_or(&0) as f64 * 1e-3,
    );
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn set_threads(threads: Option<usize>) -> CmdResult {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Io("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Io(e.to_string()))?;
    }
    Ok(())
}

fn calibrate(run: &RunArgs, cfg: CalibrationConfig, verbose: bool) -> CmdResult {
    set_threads(run.threads)?;
    let mp = manifest_path(&run.manifest);
    let ds = dataset::ingest(&mp).map_err(|e| Failure::Io(e.to_string()))?;
    fs::create_dir_all(&run.out).map_err(|e| io_err(&run.out, e))?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let rep = run_calibration(&ds, &cfg);
    rep.write(&run.out).map_err(|e| io_err(&run.out, e))?;
    finish(&rep, verbose)
}

fn finish(rep: &CalibrationReport, verbose: bool) -> CmdResult {
    if verbose {
        for n in &rep.notices {
            match &n.run_id {
                Some(id) => eprintln!("{:?} {id}: {}", n.stage, n.message),
                None => eprintln!("{:?}: {}", n.stage, n.message),
            }
        }
    }
    print!("{}", rep.summary_table());
    match &rep.failure {
        Some(f) => Err(Failure::Compute(format!("{:?} stage failed: {}", f.stage, f.message))),
        None => Ok(()),
    }
}

fn report(path: &Path, out: Option<&Path>, verbose: bool) -> CmdResult {
    let path = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let rep = CalibrationReport::from_json(&text).map_err(|e| io_err(&path, e))?;
    if let Some(dir) = out {
        rep.write(dir).map_err(|e| io_err(dir, e))?;
    }
    finish(&rep, verbose)
}

fn run_selftest() -> CmdResult {
    let rep = selftest::run();
    for c in &rep.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = rep.failures().count();
    if failed == 0 {
        println!("all {} checks passed", rep.checks.len());
        Ok(())
    } else {
        let names: Vec<&str> = rep.failures().map(|c| c.name).collect();
        Err(Failure::Compute(format!("{failed} checks failed: {}", names.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate {
            scenario,
            out,
            seed,
            noise_scale,
        } => generate(scenario, out, *seed, *noise_scale),
        Command::Fit(run) => {
            let cfg = CalibrationConfig {
                seed: run.seed,
                stop_after: Some(Stage::TwpaTls),
                ..Default::default()
            };
            calibrate(run, cfg, cli.verbose)
        }
        Command::Calibrate {
            run,
            no_twpa_correction,
            asymmetry,
            mc_samples,
        } => {
            let cfg = CalibrationConfig {
                seed: run.seed,
                twpa_correction: !no_twpa_correction,
                asymmetry: *asymmetry,
                mc_samples: *mc_samples,
                ..Default::default()
            };
            calibrate(run, cfg, cli.verbose)
        }
        Command::Report { report: path, out } => report(path, out.as_deref(), cli.verbose),
        Command::Selftest => run_selftest(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Compute(m) | Failure::Io(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
