//! `mfexit`: config-driven experiments for exit-time control of
//! cooperative-agent jump processes on the simplex.
//!
//! Subcommands: `check-cost`, `solve`, `simulate`, `limit`, `convergence`,
//! `lln`, `isaacs`. Every command reads one JSON config, writes
//! machine-readable artifacts into the output directory, and exits with
//! 0 on success, 1 on a failed check, 2 on config errors, and 3 on
//! capacity or iteration limits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::json;

use meanfield_exit::config::ExperimentConfig;
use meanfield_exit::error::Error;
use meanfield_exit::lattice::{SimplexGrid, TargetSet};
use meanfield_exit::limit::{self, convergence_study, optimize_v};
use meanfield_exit::report;
use meanfield_exit::scalar::geometric_grid;
use meanfield_exit::sim::{estimate_i, estimate_j, lln_experiment, simulate_meanfield};
use meanfield_exit::solver::{
    equivalence_gap, extract_u_policy, residual_v, solve_v, solve_w,
};

#[derive(Parser)]
#[command(
    name = "mfexit",
    version,
    about = "Exit-time control on the simplex: solvers, simulators, and the deterministic limit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the experiment config (JSON).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override for simulation commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for Monte Carlo trials and optimizer restarts
    /// (default: machine parallelism). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Print progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the cost admissibility conditions and the growth gate.
    CheckCost,
    /// Solve both Bellman equations; export fields, policies, residuals and
    /// the equivalence gap.
    Solve,
    /// Monte Carlo estimates of the additive and risk-sensitive exit costs
    /// under the extracted optimal policies.
    Simulate,
    /// Trajectory optimization of the deterministic limit problem.
    Limit,
    /// Lattice-to-limit convergence study over `n_list`.
    Convergence,
    /// Law-of-large-numbers deviation study under nominal rates.
    Lln,
    /// Grid minimax verification of the inf/sup exchange over a xi grid.
    Isaacs,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) | Error::Precondition(_) => 2,
        Error::Capacity { .. } | Error::IterationLimit { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        // ignore failure if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        if let Some(sim) = config.simulation.as_mut() {
            sim.seed = seed;
        }
        if let Some(lln) = config.lln.as_mut() {
            lln.seed = seed;
        }
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    let echo = config.resolved_json()?;

    match cli.command {
        Command::CheckCost => cmd_check_cost(&config, &echo, &out_dir, cli.verbose),
        Command::Solve => cmd_solve(&config, &echo, &out_dir, cli.verbose),
        Command::Simulate => cmd_simulate(&config, &echo, &out_dir, cli.verbose),
        Command::Limit => cmd_limit(&config, &echo, &out_dir, cli.verbose),
        Command::Convergence => cmd_convergence(&config, &echo, &out_dir, cli.verbose),
        Command::Lln => cmd_lln(&config, &echo, &out_dir, cli.verbose),
        Command::Isaacs => cmd_isaacs(&config, &echo, &out_dir, cli.verbose),
    }
}

fn cmd_check_cost(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let grid = geometric_grid(1e-2, 1e2, 200);
    let a1 = model.check_admissibility(&grid)?;
    let uh = match model.tail_exponent_p {
        Some(_) => Some(limit::check_growth_conditions(&model)?),
        None => None,
    };
    let pass = a1.pass && uh.as_ref().map(|r| r.pass).unwrap_or(true);
    if verbose {
        eprintln!("admissibility: {}", if pass { "pass" } else { "fail" });
    }
    report::write_json(
        &out.join("check_cost.json"),
        echo,
        json!({
            "admissibility": a1,
            "growth_gate": uh,
            "pass": pass,
            "model_hash": report::model_hash(&model)?,
        }),
    )?;
    Ok(if pass { 0 } else { 1 })
}

fn cmd_solve(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let n = config.require_n()?;
    let grid = Arc::new(SimplexGrid::build(n, config.d, model.edges())?);
    let target = TargetSet::resolve(config.target.clone(), &grid)?;
    let opts = config.solver.solve_opts();
    let (v_field, policy, stats) = solve_v(&grid, &target, &model, &opts)?;
    let (w_field, w_stats) = solve_w(&grid, &target, &model, &config.solver.w_opts())?;
    let gap = equivalence_gap(&v_field, &w_field)?;
    let transform_residual = residual_v(&w_field.to_v_transform(), &model)?;
    let (q_min, q_max) = opts.resolved_box(&model);
    let u_policy = extract_u_policy(&v_field, &model, q_min, q_max)?;
    if verbose {
        eprintln!(
            "solved n={n}: {} sweeps, residual {:.3e}, equivalence gap {:.3e}",
            stats.sweeps, stats.residual_sup, gap
        );
    }

    report::write_value_field_csv(&out.join("values_v.csv"), echo, &v_field)?;
    report::write_value_field_csv(&out.join("values_w.csv"), echo, &w_field)?;
    report::write_policy_csv(&out.join("policy_q.csv"), echo, &model, &policy)?;
    report::write_policy_csv(&out.join("policy_u.csv"), echo, &model, &u_policy)?;
    report::write_json(
        &out.join("solve_stats.json"),
        echo,
        json!({
            "n": n,
            "model_hash": report::model_hash(&model)?,
            "v_sweeps": stats.sweeps,
            "v_final_update": stats.final_update,
            "v_residual_sup": stats.residual_sup,
            "w_sweeps": w_stats.sweeps,
            "w_final_update": w_stats.final_update,
            "equivalence_gap": gap,
            "w_transform_residual_sup": transform_residual.sup_norm,
            "warnings": stats.warnings,
            "rate_box": [q_min, q_max],
            "target_ordinals": target.ordinals(),
        }),
    )?;
    Ok(0)
}

fn cmd_simulate(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let n = config.require_n()?;
    let sim = config
        .simulation
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs the `simulation` section".into()))?;
    let grid = Arc::new(SimplexGrid::build(n, config.d, model.edges())?);
    let target = TargetSet::resolve(config.target.clone(), &grid)?;
    let opts = config.solver.solve_opts();
    let (v_field, policy, _) = solve_v(&grid, &target, &model, &opts)?;
    let (q_min, q_max) = opts.resolved_box(&model);
    let u_policy = extract_u_policy(&v_field, &model, q_min, q_max)?;
    let m0_counts = config.counts_for(&sim.m0, n)?;
    let m0 = grid
        .index_of(&m0_counts)
        .ok_or_else(|| Error::Config("simulation.m0 missing from lattice".into()))?;

    // pilot run to size the censoring horizon
    let pilot_trials = 32u64;
    let mut pilot_mean = 0.0;
    for trial in 0..pilot_trials {
        let path = simulate_meanfield(
            &grid,
            Some(&target),
            &model,
            &policy,
            m0,
            (sim.seed ^ 0x70b1, trial),
            1e9,
        )?;
        pilot_mean += path.exit_time.unwrap_or(1e9) / pilot_trials as f64;
    }
    let t_max = sim.t_max_multiplier * pilot_mean.max(1e-9);
    if verbose {
        eprintln!("pilot mean exit {pilot_mean:.4}, censoring at {t_max:.4}");
    }

    let j_est = estimate_j(
        &grid, &target, &model, &policy, m0, sim.trials, sim.seed, t_max,
    )?;
    let i_est = estimate_i(
        &grid,
        &target,
        &model,
        &u_policy,
        m0,
        sim.trials,
        sim.seed.wrapping_add(1),
        t_max,
    )?;
    let v_at_start = v_field.value(m0);

    if sim.dump_paths > 0 {
        let paths: Vec<_> = (0..sim.dump_paths as u64)
            .map(|trial| {
                simulate_meanfield(
                    &grid,
                    Some(&target),
                    &model,
                    &policy,
                    m0,
                    (sim.seed, trial),
                    t_max,
                )
            })
            .collect::<Result<_, _>>()?;
        report::write_paths_csv(&out.join("paths.csv"), echo, &grid, &paths)?;
    }

    report::write_json(
        &out.join("estimates.json"),
        echo,
        json!({
            "n": n,
            "model_hash": report::model_hash(&model)?,
            "m0_counts": m0_counts,
            "t_max": t_max,
            "solved_value_at_m0": v_at_start,
            "additive": j_est,
            "risk_sensitive": i_est,
            "risk_sensitive_value_estimate": -i_est.log_estimate_over_n,
        }),
    )?;
    Ok(0)
}

fn cmd_limit(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let lim = config
        .limit
        .as_ref()
        .ok_or_else(|| Error::Config("limit needs the `limit` section".into()))?;
    if lim.m0.len() != config.d {
        return Err(Error::Config("limit.m0 dimension mismatch".into()));
    }
    let r_max = model.reward_spec().max_on_simplex(config.d);
    let outcome = optimize_v(&model, &config.target, &lim.m0, &lim.optimize_opts(r_max))?;
    if verbose {
        eprintln!(
            "deterministic cost {:.6} (exit reached: {})",
            outcome.cost, outcome.exit_reached
        );
    }
    report::write_trajectory_csv(&out.join("trajectory.csv"), echo, &model, &outcome.trajectory)?;
    report::write_json(
        &out.join("limit.json"),
        echo,
        json!({
            "cost": outcome.cost,
            "exit_reached": outcome.exit_reached,
            "exit_time": outcome.trajectory.exit_time,
            "model_hash": report::model_hash(&model)?,
        }),
    )?;
    Ok(if outcome.exit_reached { 0 } else { 1 })
}

fn cmd_convergence(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let n_list = config.require_n_list()?;
    let lim = config.limit.clone().unwrap_or_default();
    let r_max = model.reward_spec().max_on_simplex(config.d);
    let table = convergence_study(
        &model,
        &config.target,
        n_list,
        &config.solver.solve_opts(),
        &lim.optimize_opts(r_max),
    )?;
    if verbose {
        for row in &table.rows {
            eprintln!("n = {:5}: sup gap {:.6}", row.n, row.sup_gap);
        }
    }
    let rows: Vec<(usize, f64)> = table.rows.iter().map(|r| (r.n, r.sup_gap)).collect();
    report::write_convergence_csv(&out.join("convergence.csv"), echo, &rows)?;
    report::write_json(
        &out.join("convergence.json"),
        echo,
        json!({
            "rows": table.rows,
            "reference": table.reference,
            "model_hash": report::model_hash(&model)?,
        }),
    )?;
    Ok(0)
}

fn cmd_lln(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let n_list = config.require_n_list()?;
    let lln = config
        .lln
        .as_ref()
        .ok_or_else(|| Error::Config("lln needs the `lln` section".into()))?;
    if lln.m0.len() != config.d {
        return Err(Error::Config("lln.m0 dimension mismatch".into()));
    }
    let table = lln_experiment(&model, &lln.m0, lln.horizon, n_list, lln.trials, lln.seed)?;
    if verbose {
        eprintln!("log-log slope of the median deviation: {:.4}", table.slope);
    }
    report::write_lln_csv(&out.join("lln.csv"), echo, &table)?;
    report::write_json(
        &out.join("lln.json"),
        echo,
        json!({
            "rows": table.rows,
            "slope": table.slope,
            "model_hash": report::model_hash(&model)?,
        }),
    )?;
    Ok(0)
}

fn cmd_isaacs(
    config: &ExperimentConfig,
    echo: &serde_json::Value,
    out: &Path,
    verbose: bool,
) -> Result<u8, Error> {
    let model = config.build_model()?;
    let isaacs = config.isaacs.clone().unwrap_or_default();
    let u_grid = geometric_grid(isaacs.grid_lo, isaacs.grid_hi, isaacs.grid_points);
    let q_grid = u_grid.clone();
    let mut reports = Vec::new();
    let mut max_gap = 0.0f64;
    for edge in 0..model.n_edges() {
        for &xi in &isaacs.xi_values {
            let rep = model.check_isaacs(edge, xi, &u_grid, &q_grid)?;
            max_gap = max_gap.max(rep.gap.abs());
            reports.push(json!({
                "edge": model.edges().edge(edge),
                "report": rep,
            }));
        }
    }
    let pass = max_gap <= isaacs.gap_tol;
    if verbose {
        eprintln!("max |minimax gap| = {max_gap:.3e} (tol {})", isaacs.gap_tol);
    }
    report::write_json(
        &out.join("isaacs.json"),
        echo,
        json!({
            "max_abs_gap": max_gap,
            "gap_tol": isaacs.gap_tol,
            "pass": pass,
            "checks": reports,
            "model_hash": report::model_hash(&model)?,
        }),
    )?;
    Ok(if pass { 0 } else { 1 })
}
