//! `shiftgauge`: run label-free error-estimation benchmarks from JSON configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shiftgauge_core::harness::{self, gradcheck, ExperimentConfig};
use shiftgauge_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(name = "shiftgauge", version, about = "Source-free accuracy estimation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, adapt and score every configured estimator.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// MAE of the fixed-radius adversarial estimator over a grid of radii.
    SweepEps {
        /// Config file or directory of config files; may be repeated.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Track estimators against the true error while adaptation runs.
    Trend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check and VAP direction oracle.
    Gradcheck,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { EXIT_RUNTIME };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn config_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Config(format!("cannot list {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no config files found".into()).into());
    }
    Ok(out)
}

fn run(config: &Path, out: Option<PathBuf>, seed_override: Option<u64>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    let report = harness::run_experiment(&cfg)?;
    report.write_to(&cfg.output_dir)?;
    println!("{} / {}  ({} seeds)", cfg.task.name(), cfg.shift.label(), cfg.seeds.len());
    println!("{:<10} {:>10} {:>10} {:>4}", "estimator", "mae_mean", "mae_std", "n");
    for s in &report.summary {
        println!("{:<10} {:>10.4} {:>10.4} {:>4}", s.estimator, s.mae_mean, s.mae_std, s.n);
    }
    for d in report.seeds.iter().filter(|d| d.status != "ok") {
        eprintln!("seed {}: {}", d.seed, d.status);
    }
    println!("wrote {}", cfg.output_dir.display());
    if report.all_seeds_failed() {
        return Err(Failure {
            code: EXIT_RUNTIME,
            message: "every seed failed".into(),
        });
    }
    Ok(())
}

fn sweep(configs: &[PathBuf], grid: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let grid = harness::parse_grid(grid)?;
    let cfgs = config_paths(configs)?
        .iter()
        .map(|p| ExperimentConfig::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let report = harness::sweep_eps(&cfgs, &grid)?;
    let dir = out.unwrap_or_else(|| cfgs[0].output_dir.clone());
    report.write_to(&dir)?;
    println!("{:>6} {:>10} {:>10}", "eps", "mae_mean", "mae_std");
    for p in &report.points {
        println!("{:>6} {:>10.4} {:>10.4}", p.eps, p.mae_mean, p.mae_std);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn trend(config: &Path, every: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let report = harness::trend(&cfg, every)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    report.write_to(&dir)?;
    println!("{:>4} {:>6} {:>9} {:>9} {:>9} {:>10}", "seed", "epoch", "naive", "adv", "aap", "true_error");
    for r in &report.rows {
        println!(
            "{:>4} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>10.4}",
            r.seed, r.epoch, r.est_naive, r.est_adv, r.est_aap, r.true_error
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn check() -> Result<(), Failure> {
    let r = gradcheck::gradcheck()?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} gradients: max relative error {:.3e} over {} coordinates (limit {:.0e})",
        verdict(r.gradients_pass()),
        r.max_rel_error,
        r.coords_checked,
        gradcheck::MAX_REL_ERROR
    );
    println!(
        "{} vap: norm deviation {:.3e} over {} rows, max angle to brute force {:.2} deg, KL adv {:.4e} vs random {:.4e}",
        verdict(r.vap_pass()),
        r.vap_norm_max_rel_dev,
        r.vap_rows_checked,
        r.vap_max_angle_deg,
        r.adv_kl_mean,
        r.rnd_kl_mean
    );
    println!("elapsed {:.2}s", r.elapsed_s);
    if r.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFICATION,
            message: "verification failed".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => run(&config, out, seed_override),
        Command::SweepEps { config, grid, out } => sweep(&config, &grid, out),
        Command::Trend { config, every, out } => trend(&config, every, out),
        Command::Gradcheck => check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
