use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nahm_oper::cli_reporting::{exit_code, run, Command, RunConfig};
use nahm_oper::error::Error;

#[derive(Parser)]
#[command(name = "nahm-oper", version, about = "Tilted Nahm-pole solutions and their opers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Sub {
    /// Residual suites on the model solution.
    VerifyModel,
    /// Indicial roots and Casimir spectrum for rank `n`.
    IndicialRoots { n: Option<usize> },
    /// Constant-mode Hitchin and twisted Hitchin solves.
    SolveHitchin,
    /// Full continuity solve with boundary diagnostics.
    SolveTbe,
    /// Solve, then read the oper back from the flat limit.
    KhMap,
    /// Discrete identities and their refinement orders.
    CheckIdentities,
    /// Donaldson functional scans.
    Donaldson,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Comma-separated `q_2,...,q_n`.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    q: Option<Vec<f64>>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    q2: Option<f64>,
    #[arg(long, global = true)]
    y_min: Option<f64>,
    #[arg(long, global = true)]
    y_max: Option<f64>,
    #[arg(long, global = true)]
    count: Option<usize>,
    #[arg(long, global = true)]
    grading: Option<f64>,
    #[arg(long, global = true)]
    halvings: Option<usize>,
    #[arg(long, global = true)]
    stage_tol: Option<f64>,
    #[arg(long, global = true)]
    final_tol: Option<f64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true)]
    order: Option<usize>,
    #[arg(long, global = true)]
    extra_starts: Option<usize>,
    #[arg(long, global = true)]
    probes: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn build_config(o: &Overrides, rank: Option<usize>) -> Result<RunConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = rank.or(o.n) {
        cfg = cfg.with_rank(n);
    }
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = o.$src.clone() { cfg.$($dst).+ = v; })*
        };
    }
    set!(beta => beta, q => q, y_min => mesh.y_min, y_max => mesh.y_max, count => mesh.count,
         grading => mesh.grading, halvings => schedule.halvings, stage_tol => schedule.stage_tol,
         final_tol => schedule.final_tol, max_iter => schedule.max_iter, extra_starts => extra_starts,
         probes => probes, seed => seed);
    if let Some(k) = o.order {
        cfg.order = Some(k);
    }
    if let Some(q2) = o.q2 {
        if cfg.q.is_empty() {
            return Err(Error::Config { path: "q2".into(), msg: "rank n = 1 has no q_2".into() });
        }
        cfg.q[0] = q2;
    }
    cfg.out_dir = cfg.resolved_out_dir();
    if let Some(p) = &o.out {
        cfg.out_dir = p.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, rank) = match cli.command {
        Sub::VerifyModel => (Command::VerifyModel, None),
        Sub::IndicialRoots { n } => (Command::IndicialRoots, n),
        Sub::SolveHitchin => (Command::SolveHitchin, None),
        Sub::SolveTbe => (Command::SolveTbe, None),
        Sub::KhMap => (Command::KhMap, None),
        Sub::CheckIdentities => (Command::CheckIdentities, None),
        Sub::Donaldson => (Command::Donaldson, None),
    };
    let cfg = match build_config(&cli.overrides, rank) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let result = run(cmd, &cfg);
    let code = exit_code(&result);
    match &result {
        Ok(outcome) => {
            for line in &outcome.text {
                println!("{line}");
            }
            for check in &outcome.checks {
                println!("{}", check.line());
            }
            println!("{} {}", cmd.name(), if outcome.passed() { "PASS" } else { "FAIL" });
            match outcome.write(&cfg, &cfg.out_dir) {
                Ok(dir) => eprintln!("artifacts: {}", dir.display()),
                Err(e) => {
                    eprintln!("error: cannot write artifacts: {e}");
                    return ExitCode::from(1);
                }
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(code as u8)
}
