//! Acceptance criteria: one PASS/FAIL line per criterion, with pinned tolerances and time budgets.

use std::process::ExitCode;
use std::time::Instant;

use nahm_oper::cli_reporting::{run, Check, Command, RunConfig};
use nahm_oper::lie_core::{comm, max_abs, principal_triple, tilt_params};

struct Criterion {
    id: usize,
    name: &'static str,
    budget_seconds: f64,
    checks: Vec<Check>,
    errors: Vec<String>,
    seconds: f64,
}

impl Criterion {
    fn passed(&self) -> bool {
        self.errors.is_empty() && self.checks.iter().all(|c| c.pass) && self.seconds <= self.budget_seconds
    }
}

fn criterion(id: usize, name: &'static str, budget_seconds: f64, body: impl FnOnce(&mut Vec<Check>, &mut Vec<String>)) -> Criterion {
    let start = Instant::now();
    let (mut checks, mut errors) = (Vec::new(), Vec::new());
    body(&mut checks, &mut errors);
    Criterion { id, name, budget_seconds, checks, errors, seconds: start.elapsed().as_secs_f64() }
}

/// Runs a subcommand and collects its checks, prefixed with a case label.
fn collect(cmd: Command, cfg: &RunConfig, label: &str, checks: &mut Vec<Check>, errors: &mut Vec<String>) {
    match run(cmd, cfg) {
        Ok(o) => checks.extend(o.checks.into_iter().map(|mut c| {
            c.invariant = format!("[{label}] {}", c.invariant);
            c
        })),
        Err(e) => errors.push(format!("[{label}] {} failed: {e}", cmd.name())),
    }
}

fn oper_cfg(n: usize, beta: f64, q: &[f64]) -> RunConfig {
    let mut cfg = RunConfig { beta, ..RunConfig::default() }.with_rank(n);
    cfg.q[..q.len()].copy_from_slice(q);
    cfg
}

fn main() -> ExitCode {
    let mut all = Vec::new();

    all.push(criterion(1, "algebra suite", 5.0, |checks, errors| {
        let mut rel = 0.0f64;
        for n in 2..=8 {
            match principal_triple(n) {
                Ok(t) => {
                    rel = rel
                        .max(max_abs(&(comm(&t.e_plus, &t.e_minus) - &t.e_zero)))
                        .max(max_abs(&(comm(&t.e_zero, &t.e_plus) - t.e_plus.scale(2.0))))
                        .max(max_abs(&(comm(&t.e_zero, &t.e_minus) + t.e_minus.scale(2.0))));
                }
                Err(e) => errors.push(format!("triple n={n}: {e}")),
            }
            collect(Command::IndicialRoots, &RunConfig::default().with_rank(n), &format!("n={n}"), checks, errors);
        }
        checks.push(Check::at_most("principal triple relations, n = 2..8", rel, 1e-9));
        let (mut minus, mut plus) = (0.0f64, 0.0f64);
        for k in 0..20 {
            let beta = -0.5 + (k as f64 + 0.5) * 0.05;
            match tilt_params(beta) {
                Ok(p) => {
                    let b3 = 3.0 * beta;
                    minus = minus.max((p.c_minus + b3.tan()).abs() / (1.0 + b3.tan().abs()));
                    plus = plus.max((p.c_plus - 1.0 / b3.cos()).abs() / p.c_plus);
                }
                Err(e) => errors.push(format!("tilt beta={beta}: {e}")),
            }
        }
        checks.push(Check::at_most("c_minus = -tan(3 beta) on 20 angles", minus, 1e-12));
        checks.push(Check::at_most("c_plus = 1/cos(3 beta) on 20 angles", plus, 1e-12));
    }));

    all.push(criterion(2, "model-solution suite", 30.0, |checks, errors| {
        for n in 2..=4 {
            for beta in [0.1, 0.2, 0.3] {
                let cfg = oper_cfg(n, beta, &[]);
                collect(Command::VerifyModel, &cfg, &format!("n={n} beta={beta}"), checks, errors);
            }
        }
    }));

    all.push(criterion(3, "identity suite", 60.0, |checks, errors| {
        collect(Command::CheckIdentities, &oper_cfg(2, 0.2, &[0.5]), "n=2 q2=0.5", checks, errors);
    }));

    all.push(criterion(4, "twisted-Hitchin suite", 20.0, |checks, errors| {
        for q in [0.25, 0.5, 1.0, 3.0] {
            collect(Command::SolveHitchin, &oper_cfg(2, 0.2, &[q]), &format!("n=2 q2={q}"), checks, errors);
        }
        collect(Command::SolveHitchin, &oper_cfg(3, 0.2, &[0.3, 0.5]), "n=3", checks, errors);
    }));

    all.push(criterion(5, "main solve", 300.0, |checks, errors| {
        for q in [0.0, 0.25, 0.5, 1.0] {
            collect(Command::KhMap, &oper_cfg(2, 0.2, &[q]), &format!("n=2 q2={q}"), checks, errors);
        }
    }));

    all.push(criterion(6, "boundary-structure checks", 120.0, |checks, errors| {
        let cases: [(usize, &[f64]); 4] = [(2, &[0.5]), (2, &[1.0]), (2, &[0.0]), (3, &[0.0, 0.0])];
        for (n, q) in cases {
            let cfg = RunConfig { extra_starts: 0, ..oper_cfg(n, 0.2, q) };
            let mut local = Vec::new();
            collect(Command::SolveTbe, &cfg, &format!("n={n} q={q:?}"), &mut local, errors);
            checks.extend(local.into_iter().filter(|c| c.invariant.contains("boundary:")));
        }
    }));

    all.push(criterion(7, "Donaldson suite", 120.0, |checks, errors| {
        collect(Command::Donaldson, &oper_cfg(2, 0.2, &[0.5]), "n=2 q2=0.5", checks, errors);
        collect(Command::Donaldson, &RunConfig { probes: 10, ..oper_cfg(3, 0.2, &[0.3, 0.2]) }, "n=3", checks, errors);
        // The C0 estimate on every converged solve of the benchmark family.
        for q in [0.0, 0.25, 0.5, 1.0] {
            let cfg = RunConfig { extra_starts: 0, ..oper_cfg(2, 0.2, &[q]) };
            let mut local = Vec::new();
            collect(Command::SolveTbe, &cfg, &format!("n=2 q2={q}"), &mut local, errors);
            checks.extend(local.into_iter().filter(|c| c.invariant.contains("C0")));
        }
    }));

    let mut ok = true;
    for c in &all {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} criterion {}: {} ({} checks, {:.1} s of {:.0} s)", c.id, c.name, c.checks.len(), c.seconds, c.budget_seconds);
        for ch in c.checks.iter().filter(|ch| !ch.pass) {
            println!("    {}", ch.line());
        }
        for e in &c.errors {
            println!("    ERROR {e}");
        }
        ok &= c.passed();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
