use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bramp::diagnostics::{blind_scenario_report, candidate_posterior, BlindScenario, VisitSchedule};
use bramp::harness::{
    load_config, render_svg_summary, run_benchmark, run_episode, write_steps_csv, write_summary_csv,
    ExperimentConfig, Metric,
};
use bramp::risk::{builtin_instances, dp_solve_discrete, DpMode};
use bramp::Error;

#[derive(Parser, Debug)]
#[command(name = "bramp", version, about = "Bayesian risk-averse MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one episode and write the per-step CSV.
    Simulate(Opts),
    /// Run every controller kind over paired seeds; write summary CSV and SVG.
    Benchmark(Opts),
    /// Blind-region report and posterior concentration on the three-candidate scenario.
    Consistency(Opts),
    /// Nested vs. joint values and monotonicity on the built-in finite instances.
    ValidateDp,
}

#[derive(Args, Debug, Clone)]
struct Opts {
    #[arg(long)]
    config: Option<PathBuf>,
    /// nominal | tube | stochastic | risk_averse
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
}

enum Failure {
    Validation(Error),
    Abort(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigParse(_) | Error::ConfigInvalid { .. } | Error::InvalidArgument(_) => Failure::Validation(e),
            other => Failure::Abort(other.to_string()),
        }
    }
}

fn build_config(o: &Opts) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = &o.kind {
        cfg.controller.kind = k.clone();
    }
    if let Some(v) = o.runs {
        cfg.run.n_runs = v;
    }
    if let Some(v) = o.steps {
        cfg.run.steps = v;
    }
    if let Some(v) = o.seed {
        cfg.run.seed = v;
    }
    if let Some(v) = &o.out {
        cfg.run.out_dir = v.clone();
    }
    if let Some(v) = o.particles {
        cfg.filter.particles = v;
    }
    if let Some(v) = o.horizon {
        cfg.controller.horizon = v;
    }
    if let Some(v) = o.level {
        cfg.controller.level = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(&cfg.run.out_dir)?;
    Ok(Path::new(&cfg.run.out_dir).join(name))
}

fn simulate(o: &Opts) -> Result<(), Failure> {
    let cfg = build_config(o)?;
    let kind = cfg.controller_kind(&cfg.controller.kind)?;
    let rec = run_episode(&cfg, &kind, 0)?;
    let path = out_path(&cfg, &format!("episode_{}_seed{}.csv", rec.kind, rec.seed))?;
    write_steps_csv(std::slice::from_ref(&rec), &path)?;
    println!(
        "{}: total_cost={:.4} tracking_error={:.4} param_error={:.4} violations={} ({:.2}s) -> {}",
        rec.kind,
        rec.total_cost,
        rec.tracking_error,
        rec.param_error,
        rec.violations,
        rec.wall_time_s,
        path.display()
    );
    match rec.aborted {
        Some(msg) => Err(Failure::Abort(msg)),
        None => Ok(()),
    }
}

fn benchmark(o: &Opts) -> Result<(), Failure> {
    let cfg = build_config(o)?;
    let campaign = run_benchmark(&cfg)?;
    let csv = out_path(&cfg, "summary.csv")?;
    let svg = out_path(&cfg, "summary.svg")?;
    write_summary_csv(&campaign.table, &csv)?;
    render_svg_summary(&campaign.table, &svg)?;
    write_steps_csv(&campaign.records, &out_path(&cfg, "steps.csv")?)?;
    println!("{:<12} {:>14} {:>14} {:>14} {:>12}", "kind", "total_cost", "tracking", "param_error", "violations");
    for row in &campaign.table.rows {
        let m = |metric: Metric| {
            let i = Metric::ALL.iter().position(|x| *x == metric).unwrap_or(0);
            format!("{:.3}±{:.3}", row.metrics[i].mean, row.metrics[i].std)
        };
        println!(
            "{:<12} {:>14} {:>14} {:>14} {:>12}{}",
            row.kind,
            m(Metric::TotalCost),
            m(Metric::TrackingError),
            m(Metric::ParamError),
            m(Metric::Violations),
            if row.aborted > 0 { format!("  ({} aborted)", row.aborted) } else { String::new() }
        );
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    let aborted: usize = campaign.table.rows.iter().map(|r| r.aborted).sum();
    if aborted > 0 {
        return Err(Failure::Abort(format!("{aborted} episodes aborted")));
    }
    Ok(())
}

fn consistency(o: &Opts) -> Result<(), Failure> {
    let cfg = build_config(o)?;
    let d = &cfg.diagnostics;
    let sc = BlindScenario::new();
    let rep = blind_scenario_report(&sc, d.blind_tol)?;
    println!("candidates (a, b): {:?}", sc.thetas.iter().map(|t| t.to_vec()).collect::<Vec<_>>());
    println!("blind zones at eta1 (x=1, u=0): {:?}", rep.at_eta1.zones);
    println!("blind zones at eta2 (x=0, u=1): {:?}", rep.at_eta2.zones);
    println!("combined region: {:?}", rep.combined.zones);
    for (name, schedule) in [("alternating", VisitSchedule::Alternating), ("eta1 only", VisitSchedule::OnlyEta1)] {
        let mass = candidate_posterior(&sc, schedule, d.consistency_steps, d.consistency_particles, cfg.run.seed)?;
        println!("posterior after {} steps ({name}): {:?}", d.consistency_steps, mass);
    }
    Ok(())
}

fn validate_dp() -> Result<(), Failure> {
    let mut ok = true;
    for inst in builtin_instances() {
        let nested = dp_solve_discrete(&inst.mdp, DpMode::Nested)?;
        let joint = dp_solve_discrete(&inst.mdp, DpMode::Joint)?;
        let n = inst.mdp.horizon;
        let (vn, vj) = (nested.value(n), joint.value(n));
        let dominates = vn.iter().zip(vj).all(|(a, b)| *a >= b - 1e-9);
        let gap = vn.iter().zip(vj).map(|(a, b)| a - b).fold(0.0, f64::max);
        let delta = inst.mdp.terminal_descent_delta();
        let slack = delta.max(0.0);
        let monotone = (0..n).all(|i| {
            nested.value(i + 1).iter().zip(nested.value(i)).all(|(a, b)| *a <= b + slack + 1e-9)
        });
        ok &= dominates && monotone;
        println!(
            "{:<12} nested>=joint: {:<5} max gap {:.6}  delta {:+.6}  V_(i+1) <= V_i + max(delta,0): {}",
            inst.name, dominates, gap, delta, monotone
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Abort("finite-instance check failed".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(o) => simulate(o),
        Command::Benchmark(o) => benchmark(o),
        Command::Consistency(o) => consistency(o),
        Command::ValidateDp => validate_dp(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Abort(msg)) => {
            eprintln!("aborted: {msg}");
            ExitCode::from(2)
        }
    }
}
