#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use satlab::config::load_config;
use satlab::runner::{closed_form_error, run_experiment, verdict_for, RunError, CLOSED_FORM_STEPS};
use satlab::RunReport;
use satlab_core::convergence::{random_system, Design};

#[derive(Parser)]
#[command(name = "satlab", version, about = "Self-adaptive training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Override `experiment.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `experiment.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every config matching a glob pattern.
    Sweep {
        pattern: String,
        /// Concurrent runs (defaults to the available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Simulate one random linear system and check it against its spectrum.
    VerifyConvergence {
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        /// Learning rate as a multiple of the stable bound.
        #[arg(long, default_value_t = 0.5)]
        eta_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DesignArg::Gaussian)]
        design: DesignArg,
        /// Steps to simulate; defaults to the predicted step count.
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value_t = 1e-12)]
        residual_tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        ratio_tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Gaussian,
    WellConditioned,
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn print_summary(name: &str, r: &RunReport) {
    let metrics: Vec<String> = r
        .final_metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    println!(
        "{name} ({}, seed {}, {:.1}s): {}",
        r.kind,
        r.seed,
        r.wall_clock,
        metrics.join(" ")
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e.into()),
            };
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            match run_experiment(&cfg) {
                Ok(r) => {
                    print_summary(&cfg.name, &r);
                    println!("outputs in {}", cfg.run_dir().display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { pattern, jobs } => sweep(&pattern, jobs),
        Command::VerifyConvergence {
            n,
            d,
            alpha,
            eta_frac,
            seed,
            design,
            k_max,
            residual_tol,
            ratio_tol,
        } => {
            let design = match design {
                DesignArg::Gaussian => Design::Gaussian,
                DesignArg::WellConditioned => Design::WellConditioned,
            };
            if !(residual_tol > 0.0 && residual_tol < 1.0) || !(ratio_tol > 0.0) {
                eprintln!("error: tolerances must be positive and residual_tol below 1");
                return ExitCode::from(2);
            }
            let sys = match random_system(n, d, alpha, eta_frac, design, seed) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let v = match verdict_for(&sys, k_max, residual_tol, ratio_tol) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let steps = v.residuals.len() - 1;
            println!("stable bound        {:.9e}", v.bound);
            println!("eta / bound         {}", v.eta_over_bound);
            println!(
                "dominant a_i^2      {:.9e} (direction {})",
                v.a_sq, v.effective_index
            );
            match v.predicted_steps {
                Some(k) => println!("predicted steps     {k}"),
                None => println!("predicted steps     none (not contracting)"),
            }
            println!("simulated steps     {steps}");
            println!("r_k / r_0           {:.9e}", v.final_residual() / v.r0);
            println!(
                "late ratio          {:.9e} (step {})",
                v.late_ratio, v.ratio_step
            );
            if !v.divergence_expected {
                if let Ok(e) = closed_form_error(&sys, steps.min(CLOSED_FORM_STEPS)) {
                    println!("closed-form error   {e:.3e}");
                }
            }
            let consistent = if v.divergence_expected {
                println!(
                    "verdict             {}",
                    if v.diverged {
                        "diverged, as expected"
                    } else {
                        "expected divergence not observed"
                    }
                );
                v.diverged
            } else {
                println!(
                    "verdict             {} (residual {}, ratio {})",
                    if v.converged() {
                        "Q-linear convergence confirmed"
                    } else {
                        "prediction not met"
                    },
                    if v.residual_ok { "ok" } else { "too large" },
                    if v.ratio_ok { "ok" } else { "off" }
                );
                v.converged()
            };
            if consistent {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn sweep(pattern: &str, jobs: Option<usize>) -> ExitCode {
    let paths: Vec<PathBuf> = match glob::glob(pattern) {
        Ok(paths) => paths.filter_map(Result::ok).collect(),
        Err(e) => {
            eprintln!("error: bad pattern `{pattern}`: {e}");
            return ExitCode::from(2);
        }
    };
    if paths.is_empty() {
        eprintln!("error: no config matches `{pattern}`");
        return ExitCode::from(2);
    }
    let mut configs = Vec::with_capacity(paths.len());
    for p in &paths {
        match load_config(p) {
            Ok(c) => configs.push(c),
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(2);
            }
        }
    }
    let jobs = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, configs.len());
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                match run_experiment(cfg) {
                    Ok(r) => print_summary(&paths[i].display().to_string(), &r),
                    Err(e) => {
                        eprintln!("error: {}: {e}", paths[i].display());
                        *failures.lock().expect("poisoned") += 1;
                    }
                }
            });
        }
    });
    let failed = failures.into_inner().expect("poisoned");
    println!(
        "{} of {} runs succeeded",
        configs.len() - failed,
        configs.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
