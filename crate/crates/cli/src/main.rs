//! Batch front door: problem ingestion, run orchestration, report emission.
//!
//! Exit codes: 0 all conditions hold, 2 any violated, 3 any inconclusive,
//! 1 operational error. Reports are byte-identical for identical
//! (config, seed) at any thread count.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use smpv_core::adjoint::{self, Backend};
use smpv_core::conditions::{self, CheckConfig, SpikeGradientSource};
use smpv_core::malliavin::{self, NablaProcess};
use smpv_core::problem::{ControlLaw, Mode, PerturbationSpec, ProblemSpec};
use smpv_core::report::{self, ConditionReport, ReportDocument};
use smpv_core::scenarios::{self, Scenario};
use smpv_core::schema::ProblemFile;
use smpv_core::sim::{self, SimulationContext};
use smpv_core::{stats::Stat, Error};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "smpv",
    version,
    about = "Verify first- and second-order necessary conditions of a stochastic control problem"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a problem file or scenario; optionally export the canonical problem document.
    Validate(ValidateArgs),
    /// Simulate the candidate state ensemble and dump it as CSV.
    Simulate(SimArgs),
    /// Solve the adjoint systems and dump grid statistics.
    Adjoints(AdjointArgs),
    /// Evaluate one or more necessary conditions and render verdicts.
    Check(CheckArgs),
    /// Scaling studies: spike-expansion epsilon sweeps or window-size probes.
    Sweep(SweepArgs),
    /// Merge previously written report documents into one summary.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct SubjectArgs {
    /// Built-in scenario name (see `validate --list`).
    #[arg(long, conflicts_with = "problem")]
    scenario: Option<String>,
    /// Problem file (schema smpv-1).
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Override the perturbation mode of the loaded problem.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Convex,
    Needle,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Time steps (at least 16).
    #[arg(long, default_value_t = 512)]
    steps: usize,
    /// Monte Carlo paths (at least 100).
    #[arg(long, default_value_t = 20_000)]
    paths: usize,
    /// Master seed; mandatory so every run is reproducible.
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Analytic,
    Regression,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    subject: SubjectArgs,
    /// List built-in scenarios and exit.
    #[arg(long)]
    list: bool,
    /// Output directory for validation.json and problem.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    subject: SubjectArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Output directory for state.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdjointArgs {
    #[command(flatten)]
    subject: SubjectArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value = "regression")]
    backend: BackendArg,
    /// Solve the scalar chain of orders one through four (needle problems).
    #[arg(long)]
    chain: bool,
    /// Output directory for adjoints.csv and adjoints.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    subject: SubjectArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value = "regression")]
    backend: BackendArg,
    /// Comma-separated condition names, or "all".
    #[arg(long, default_value = "all")]
    conditions: String,
    /// Comma-separated probe control values (m = 1 problems).
    #[arg(long)]
    v_grid: Option<String>,
    /// Tolerance multiplier c in tol = c (dt + paths^-1/2).
    #[arg(long, default_value_t = 5.0)]
    tol_scale: f64,
    /// Output directory for report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    subject: SubjectArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Spike widths for the expansion study (needle mode), comma-separated.
    #[arg(long, conflicts_with = "theta_grid")]
    epsilon_grid: Option<String>,
    /// Window sizes for the cross-term probe, comma-separated.
    #[arg(long)]
    theta_grid: Option<String>,
    /// Left endpoint of the perturbation window.
    #[arg(long, default_value_t = 0.25)]
    t_bar: f64,
    /// Substituted control value.
    #[arg(long, default_value_t = 1.0)]
    spike_value: f64,
    #[arg(long, value_enum, default_value = "regression")]
    backend: BackendArg,
    /// Output directory for sweep.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report documents to merge, in order.
    files: Vec<PathBuf>,
    /// Output file for the merged summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Subject {
    name: String,
    spec: ProblemSpec,
    control: ControlLaw,
    scenario: Option<Scenario>,
}

fn load_subject(args: &SubjectArgs) -> anyhow::Result<Subject> {
    let mut subject = if let Some(name) = &args.scenario {
        let sc = scenarios::find(name)
            .ok_or_else(|| anyhow!("unknown scenario {name}; try `smpv validate --list`"))?;
        Subject {
            name: sc.name.to_string(),
            spec: sc.spec.clone(),
            control: sc.control.clone(),
            scenario: Some(sc),
        }
    } else if let Some(path) = &args.problem {
        let file = ProblemFile::load(path).with_context(|| format!("loading {path:?}"))?;
        let (spec, control, name) = file.into_problem()?;
        Subject {
            name,
            spec,
            control,
            scenario: None,
        }
    } else {
        return Err(anyhow!("either --scenario or --problem is required"));
    };
    if let Some(mode) = args.mode {
        let mode = match mode {
            ModeArg::Convex => Mode::Convex,
            ModeArg::Needle => Mode::Needle,
        };
        subject.spec = subject.spec.with_mode(mode);
        subject.spec.validate()?;
    }
    Ok(subject)
}

fn context_for(spec: &ProblemSpec, grid: &GridArgs) -> anyhow::Result<SimulationContext> {
    if grid.steps < 16 {
        return Err(anyhow!("--steps must be at least 16"));
    }
    if grid.paths < 100 {
        return Err(anyhow!("--paths must be at least 100"));
    }
    Ok(sim::make_context(
        spec.horizon,
        grid.steps,
        grid.paths,
        grid.seed,
    ))
}

fn backend_of(arg: BackendArg) -> Backend {
    match arg {
        BackendArg::Analytic => Backend::Analytic,
        BackendArg::Regression => Backend::Regression(Default::default()),
    }
}

fn parse_grid_numbers(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad number {s:?}: {e}"))
        })
        .collect()
}

fn out_dir(dir: &Option<PathBuf>) -> anyhow::Result<Option<PathBuf>> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        return Ok(Some(d.clone()));
    }
    Ok(None)
}

fn init_threads() {
    if let Ok(n) = std::env::var("SMPV_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            let code = err
                .downcast_ref::<Error>()
                .map(|e| e.code())
                .unwrap_or("cli");
            eprintln!(
                "{}",
                serde_json::json!({ "error": code, "message": format!("{err:#}") })
            );
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Validate(args) => run_validate(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Adjoints(args) => run_adjoints(args),
        Command::Check(args) => run_check(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Report(args) => run_report(args),
    }
}

fn run_validate(args: ValidateArgs) -> anyhow::Result<ExitCode> {
    if args.list {
        for sc in scenarios::builtin_scenarios() {
            println!("{:<14} {}", sc.name, sc.description);
        }
        return Ok(ExitCode::SUCCESS);
    }
    let subject = load_subject(&args.subject)?;
    let report = subject.spec.validate()?;
    println!("{}: validation ok ({} checks)", subject.name, report.checks.len());
    if let Some(dir) = out_dir(&args.out)? {
        let json = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(dir.join("validation.json"), json)?;
        let file = ProblemFile::from_problem(&subject.name, &subject.spec, &subject.control);
        file.save(&dir.join("problem.json"))?;
        println!("wrote {}", dir.join("problem.json").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_simulate(args: SimArgs) -> anyhow::Result<ExitCode> {
    let subject = load_subject(&args.subject)?;
    let ctx = context_for(&subject.spec, &args.grid)?;
    let state = sim::simulate_state(&subject.spec, &subject.control, &ctx)?;
    let costs = sim::pathwise_cost(&subject.spec, &state, &ctx);
    let cost = smpv_core::stats::mean_stderr(&costs);
    println!(
        "{}: simulated {} paths x {} steps; J = {:.6} +- {:.6}",
        subject.name, ctx.paths, ctx.steps, cost.value, cost.stderr
    );
    if let Some(dir) = out_dir(&args.out)? {
        std::fs::write(
            dir.join("state.csv"),
            sim::ensemble_csv(&state.values, &ctx, "x"),
        )?;
        println!("wrote {}", dir.join("state.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn adjoint_rows(
    sol: &adjoint::AdjointSolution,
    ctx: &SimulationContext,
    paths: usize,
) -> Vec<serde_json::Value> {
    let mut rows = Vec::new();
    for k in 0..=ctx.steps {
        let mut p_acc = smpv_core::stats::Accumulator::new();
        let mut q_acc = smpv_core::stats::Accumulator::new();
        for path in 0..paths {
            p_acc.push(sol.p_at(path, k)[0]);
            q_acc.push(sol.q_at(path, k)[0]);
        }
        rows.push(serde_json::json!({
            "t": ctx.time(k),
            "mean_p": p_acc.mean(),
            "stderr_p": p_acc.stderr(),
            "mean_q": q_acc.mean(),
            "stderr_q": q_acc.stderr(),
        }));
    }
    rows
}

fn run_adjoints(args: AdjointArgs) -> anyhow::Result<ExitCode> {
    let subject = load_subject(&args.subject)?;
    let ctx = context_for(&subject.spec, &args.grid)?;
    let state = sim::simulate_state(&subject.spec, &subject.control, &ctx)?;
    let backend = backend_of(args.backend);

    let mut doc = BTreeMap::new();
    let mut csv = String::from("order,t,mean_p,stderr_p,mean_q,stderr_q\n");
    let solutions: Vec<adjoint::AdjointSolution> = if args.chain {
        let spec = subject.spec.with_mode(Mode::Needle);
        spec.validate()?;
        adjoint::solve_adjoint_scalar_chain(&spec, &state, &ctx, backend)?.into()
    } else {
        let pair = adjoint::solve_convex_pair(&subject.spec, &state, &ctx, backend)?;
        vec![pair.first, pair.second]
    };
    for sol in &solutions {
        let rows = adjoint_rows(sol, &ctx, state.paths());
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                sol.order,
                row["t"],
                row["mean_p"],
                row["stderr_p"],
                row["mean_q"],
                row["stderr_q"]
            ));
        }
        doc.insert(format!("order_{}", sol.order), rows);
        println!(
            "order {}: backend {}, terminal mean {:?}",
            sol.order, sol.backend, sol.terminal_mean
        );
    }
    if let Some(dir) = out_dir(&args.out)? {
        std::fs::write(dir.join("adjoints.csv"), csv)?;
        let json = serde_json::to_string_pretty(&doc)? + "\n";
        std::fs::write(dir.join("adjoints.json"), json)?;
        println!("wrote {}", dir.join("adjoints.json").display());
    }
    Ok(ExitCode::SUCCESS)
}

const ALL_CONVEX_CHECKS: &[&str] = &[
    "max-principle",
    "classical-singular",
    "pontryagin-singular",
    "integral",
    "pointwise-convex",
];
const ALL_NEEDLE_CHECKS: &[&str] = &["pointwise-nonconvex", "corollary-degenerate"];

fn nabla_sources(
    subject: &Subject,
    pair: &adjoint::AdjointPair,
    state: &sim::StateEnsemble,
    ctx: &SimulationContext,
) -> (Option<NablaProcess>, Option<NablaProcess>) {
    // scenarios may supply the kernel gradient in closed form; scalar
    // problems only, matching the built-in set
    let supplied: Option<malliavin::GradientField> = subject.scenario.as_ref().and_then(|sc| {
        sc.closed.nabla_s.as_ref().map(|f| {
            let f = f.clone();
            Arc::new(move |t: f64, x: &[f64]| vec![f(t, x[0])]) as malliavin::GradientField
        })
    });
    let n_s = malliavin::nabla_s(pair, &subject.spec, supplied.as_ref(), state, ctx).ok();
    let n_u = malliavin::nabla_ubar(&subject.control, state, &subject.spec, ctx).ok();
    (n_s, n_u)
}

fn run_check(args: CheckArgs) -> anyhow::Result<ExitCode> {
    let subject = load_subject(&args.subject)?;
    let ctx = context_for(&subject.spec, &args.grid)?;
    let mut cfg = CheckConfig::named(&subject.name);
    cfg.tol_scale = args.tol_scale;

    let requested: Vec<String> = if args.conditions.trim() == "all" {
        let mut all: Vec<String> = ALL_CONVEX_CHECKS.iter().map(|s| s.to_string()).collect();
        if subject.spec.mode == Mode::Needle {
            all.extend(ALL_NEEDLE_CHECKS.iter().map(|s| s.to_string()));
        }
        all
    } else {
        args.conditions
            .split(',')
            .map(|s| s.trim().to_string())
            .collect()
    };

    let v_list: Vec<Vec<f64>> = match &args.v_grid {
        Some(text) => parse_grid_numbers(text)?.into_iter().map(|v| vec![v]).collect(),
        None => conditions::default_probe_values(&subject.spec, &cfg),
    };

    let state = sim::simulate_state(&subject.spec, &subject.control, &ctx)?;
    let backend = backend_of(args.backend);
    let pair = adjoint::solve_convex_pair(&subject.spec, &state, &ctx, backend)?;

    let mut reports: Vec<ConditionReport> = Vec::new();
    for name in &requested {
        let report = match name.as_str() {
            "max-principle" => {
                conditions::check_maximum_principle(&subject.spec, &state, &pair, &v_list, &ctx, &cfg)
            }
            "classical-singular" => {
                conditions::check_classical_singular(&subject.spec, &state, &pair, &ctx, &cfg)
            }
            "pontryagin-singular" => conditions::check_pontryagin_singular(
                &subject.spec,
                &state,
                &pair,
                &v_list,
                &ctx,
                &cfg,
            ),
            "integral" => {
                // one merged report: the condition per constant probe direction
                let mut merged: Option<ConditionReport> = None;
                for v in &v_list {
                    let pert = PerturbationSpec::Convex {
                        comparison: ControlLaw::constant(v.clone()),
                        epsilon: 0.5,
                    };
                    let r = conditions::check_integral_condition(
                        &subject.spec,
                        &state,
                        &pair,
                        &pert,
                        &ctx,
                        &cfg,
                    )?;
                    let est = r.summary["integral_estimate"];
                    match &mut merged {
                        None => {
                            let mut base = r;
                            base.cells.clear();
                            base.cells.push(cell_for(v, est));
                            merged = Some(base);
                        }
                        Some(m) => {
                            m.cells.push(cell_for(v, est));
                            if est.value - 2.0 * est.stderr
                                > m.summary["integral_estimate"].value
                                    - 2.0 * m.summary["integral_estimate"].stderr
                            {
                                m.summary.insert("integral_estimate".into(), est);
                            }
                            if r.verdict == report::Verdict::Violated {
                                m.verdict = report::Verdict::Violated;
                            }
                        }
                    }
                }
                merged.ok_or_else(|| anyhow!("empty probe grid"))?
            }
            "pointwise-convex" => {
                let (n_s, n_u) = nabla_sources(&subject, &pair, &state, &ctx);
                conditions::check_pointwise_convex(
                    &subject.spec,
                    &state,
                    &pair,
                    n_s.as_ref(),
                    n_u.as_ref(),
                    &v_list,
                    &ctx,
                    &cfg,
                )
            }
            "pointwise-nonconvex" | "corollary-degenerate" => {
                let spec = subject.spec.with_mode(Mode::Needle);
                spec.validate()?;
                let chain = adjoint::solve_adjoint_scalar_chain(&spec, &state, &ctx, backend)?;
                let scalars: Vec<f64> = v_list.iter().map(|v| v[0]).collect();
                if name == "pointwise-nonconvex" {
                    let gradient = if chain[0].backend == "analytic" {
                        SpikeGradientSource::DeterministicZero
                    } else {
                        SpikeGradientSource::Unavailable
                    };
                    conditions::check_pointwise_nonconvex(
                        &spec, &state, &chain, &gradient, &scalars, &ctx, &cfg,
                    )?
                } else {
                    conditions::check_corollary_degenerate(
                        &spec, &state, &chain, &scalars, &ctx, &cfg,
                    )?
                }
            }
            other => return Err(anyhow!("unknown condition {other:?}")),
        };
        println!(
            "{:<28} {:?}  (tol {:.4})",
            report.condition, report.verdict, report.tolerance
        );
        reports.push(report);
    }

    let code = report::exit_code(&reports);
    let doc = ReportDocument::new(reports);
    if let Some(dir) = out_dir(&args.out)? {
        std::fs::write(dir.join("report.json"), doc.to_json()?)?;
        let mut csv = String::from("condition,t,v,mean,stderr,max_positive\n");
        for r in &doc.reports {
            for c in &r.cells {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.condition,
                    c.t,
                    c.v.iter()
                        .map(|x| x.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                    c.mean,
                    c.stderr,
                    c.max_positive
                ));
            }
        }
        std::fs::write(dir.join("cells.csv"), csv)?;
        println!("wrote {}", dir.join("report.json").display());
    }
    Ok(ExitCode::from(code as u8))
}

fn cell_for(v: &[f64], est: Stat) -> report::CellStat {
    report::CellStat {
        t: 0.0,
        v: v.to_vec(),
        mean: est.value,
        stderr: est.stderr,
        max_positive: est.value.max(0.0),
    }
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let subject = load_subject(&args.subject)?;
    let ctx = context_for(&subject.spec, &args.grid)?;
    let backend = backend_of(args.backend);
    let out = out_dir(&args.out)?;

    if let Some(grid) = &args.epsilon_grid {
        let eps = parse_grid_numbers(grid)?;
        let spec = subject.spec.with_mode(Mode::Needle);
        spec.validate()?;
        let state = sim::simulate_state(&spec, &subject.control, &ctx)?;
        let chain = adjoint::solve_adjoint_scalar_chain(&spec, &state, &ctx, backend)?;
        let study = conditions::check_variational_equality(
            &spec,
            &subject.control,
            &chain,
            args.t_bar,
            args.spike_value,
            &eps,
            &ctx,
        )?;
        for e in &study.entries {
            println!(
                "eps {:.5}: dJ/eps^2 = {:.5}, expansion/eps^2 = {:.5}, remainder = {:.3e}",
                e.eps, e.cost_delta_over_eps2, e.expansion_over_eps2, e.remainder
            );
        }
        if let Some(fit) = &study.exponent {
            println!("remainder exponent {:.3} +- {:.3}", fit.exponent, fit.stderr);
        }
        if let Some(dir) = out {
            let json = serde_json::to_string_pretty(&study)? + "\n";
            std::fs::write(dir.join("sweep.json"), json)?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    if let Some(grid) = &args.theta_grid {
        let thetas = parse_grid_numbers(grid)?;
        let state = sim::simulate_state(&subject.spec, &subject.control, &ctx)?;
        let trans = sim::simulate_transition(&subject.spec, &state, &ctx)?;
        let pair = adjoint::solve_convex_pair(&subject.spec, &state, &ctx, backend)?;
        let s_grid = conditions::s_process(&subject.spec, &state, &pair, &ctx);
        let probe = conditions::theta_scaling_probe(
            &subject.spec,
            &state,
            &trans,
            &s_grid,
            args.t_bar,
            &[args.spike_value],
            &thetas,
            &ctx,
        )?;
        for e in &probe.entries {
            println!(
                "theta {:.5}: E|cross| = {:.5e} +- {:.1e}",
                e.theta, e.mean_abs.value, e.mean_abs.stderr
            );
        }
        println!(
            "slope {:.3} +- {:.3}",
            probe.slope.exponent, probe.slope.stderr
        );
        if let Some(dir) = out {
            let json = serde_json::to_string_pretty(&probe)? + "\n";
            std::fs::write(dir.join("sweep.json"), json)?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    Err(anyhow!("one of --epsilon-grid or --theta-grid is required"))
}

fn run_report(args: ReportArgs) -> anyhow::Result<ExitCode> {
    if args.files.is_empty() {
        return Err(anyhow!("at least one report document is required"));
    }
    let mut docs = Vec::new();
    for path in &args.files {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
        docs.push(ReportDocument::from_json(&text)?);
    }
    let merged = report::emit_report(&docs)?;
    let json = merged.to_json()?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!("wrote {}", path.display());
        }
        None => print!("{json}"),
    }
    let code = report::exit_code(&merged.reports);
    Ok(ExitCode::from(code as u8))
}
