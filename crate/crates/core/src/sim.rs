//! Gillespie simulation of the controlled empirical-measure process and the
//! n-agent product process, with Monte Carlo estimators for the additive
//! and risk-sensitive exit costs.
//!
//! The direct method (competing exponential clocks) is distributionally
//! equivalent to the Poisson-random-measure construction for state-feedback
//! policies and far cheaper. Edge `(x, y)` fires at rate `n m_x q_xy(m) =
//! k_x q_xy(m)`, so transitions out of empty states never fire. Along a
//! path two integrands accumulate:
//!
//! ```text
//! additive:  sum_xy m_x F_xy(q_xy(m)) + R(m)
//! exponent:  sum_xy m_x gamma_xy C_xy(q_xy(m)/gamma_xy) - R(m)
//! ```
//!
//! the first for the risk-neutral cost when driven by a q-policy, the
//! second for the risk-sensitive cost when driven by a u-policy.
//!
//! Trials use a counter-based RNG keyed by `(master seed, trial index)`,
//! so results are bit-reproducible under any parallel schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::lattice::{empirical_counts, SimplexGrid, TargetSet};
use crate::solver::Policy;

/// Independent RNG stream for one trial.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

/// One simulated trajectory of the empirical-measure process.
#[derive(Clone, Debug, Serialize)]
pub struct PathSample {
    /// Jump times, strictly increasing.
    pub times: Vec<f64>,
    /// Visited lattice ordinals; `points[0]` is the start, so
    /// `points.len() == times.len() + 1`.
    pub points: Vec<u32>,
    /// Edge index fired at each jump.
    pub edges_fired: Vec<u32>,
    /// First entry time into the target set; `None` when censored.
    pub exit_time: Option<f64>,
    /// Censoring time when the horizon was hit first.
    pub censored_at: Option<f64>,
    /// Accumulated additive running cost up to exit or censoring.
    pub additive_cost: f64,
    /// Accumulated risk-sensitive exponent (not yet multiplied by n).
    pub exponent: f64,
    /// `(master seed, trial index)` that generated the path.
    pub seed: (u64, u64),
}

/// Precomputed per-point tables for a stationary policy: total jump rate,
/// per-edge rates `k_x q`, and both running-cost integrands.
pub struct PolicyTables {
    edge_rates: Vec<f64>,
    total_rate: Vec<f64>,
    additive: Vec<f64>,
    exponent: Vec<f64>,
    ne: usize,
}

impl PolicyTables {
    pub fn new(
        grid: &SimplexGrid,
        target: Option<&TargetSet>,
        model: &CostModel,
        policy: &Policy,
    ) -> Result<Self> {
        let ne = grid.edges().len();
        let nf = grid.n() as f64;
        let len = grid.len();
        let mut edge_rates = vec![0.0f64; len * ne];
        let mut total_rate = vec![0.0f64; len];
        let mut additive = vec![0.0f64; len];
        let mut exponent = vec![0.0f64; len];
        for i in 0..len as u32 {
            if target.map(|t| t.contains(i)).unwrap_or(false) {
                continue; // absorbed; never simulated from
            }
            let counts = grid.counts(i);
            let coords = grid.coords(i);
            let reward = model.reward(&coords);
            let mut add = reward;
            let mut exp_rate = -reward;
            let mut total = 0.0;
            for e in 0..ne {
                let (x, _) = grid.edges().edge(e);
                let kx = counts[x] as f64;
                if kx == 0.0 {
                    continue;
                }
                let q = policy.rate(i, e);
                let rate = kx * q;
                edge_rates[i as usize * ne + e] = rate;
                total += rate;
                let mx = kx / nf;
                add += mx * model.transformed_cost(e, q)?;
                exp_rate += mx * model.scaled_cost(e, q);
            }
            total_rate[i as usize] = total;
            additive[i as usize] = add;
            exponent[i as usize] = exp_rate;
        }
        Ok(Self {
            edge_rates,
            total_rate,
            additive,
            exponent,
            ne,
        })
    }

    fn rates_at(&self, i: u32) -> &[f64] {
        &self.edge_rates[i as usize * self.ne..(i as usize + 1) * self.ne]
    }
}

/// Recomputes the additive accumulator of a recorded path from its sojourn
/// times and the policy tables, in the same order the simulator used.
pub fn recompute_additive_cost(path: &PathSample, tables: &PolicyTables) -> f64 {
    let mut acc = 0.0;
    let mut t = 0.0;
    for (k, &jump_t) in path.times.iter().enumerate() {
        acc += (jump_t - t) * tables.additive[path.points[k] as usize];
        t = jump_t;
    }
    if let Some(censor) = path.censored_at {
        acc += (censor - t) * tables.additive[*path.points.last().unwrap() as usize];
    }
    acc
}

/// Simulates the controlled empirical-measure process under a stationary
/// policy until the target is hit or `t_max` elapses. With `target = None`
/// the path runs to the horizon (used by the law-of-large-numbers study).
pub fn simulate_meanfield(
    grid: &SimplexGrid,
    target: Option<&TargetSet>,
    model: &CostModel,
    policy: &Policy,
    m0: u32,
    seed: (u64, u64),
    t_max: f64,
) -> Result<PathSample> {
    let tables = PolicyTables::new(grid, target, model, policy)?;
    let mut rng = trial_rng(seed.0, seed.1);
    run_trial(grid, target, &tables, m0, &mut rng, t_max, true, seed)
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    grid: &SimplexGrid,
    target: Option<&TargetSet>,
    tables: &PolicyTables,
    m0: u32,
    rng: &mut ChaCha8Rng,
    t_max: f64,
    record: bool,
    seed: (u64, u64),
) -> Result<PathSample> {
    let in_target = |i: u32| target.map(|t| t.contains(i)).unwrap_or(false);
    let mut path = PathSample {
        times: Vec::new(),
        points: vec![m0],
        edges_fired: Vec::new(),
        exit_time: None,
        censored_at: None,
        additive_cost: 0.0,
        exponent: 0.0,
        seed,
    };
    if in_target(m0) {
        path.exit_time = Some(0.0);
        return Ok(path);
    }
    let mut t = 0.0f64;
    let mut at = m0;
    loop {
        let total = tables.total_rate[at as usize];
        if total <= 0.0 {
            return Err(Error::StuckState {
                state: at as usize,
                reward: tables.additive[at as usize],
            });
        }
        let dt = -(1.0 - rng.gen::<f64>()).ln() / total;
        if t + dt > t_max {
            let hold = t_max - t;
            path.additive_cost += hold * tables.additive[at as usize];
            path.exponent += hold * tables.exponent[at as usize];
            path.censored_at = Some(t_max);
            return Ok(path);
        }
        path.additive_cost += dt * tables.additive[at as usize];
        path.exponent += dt * tables.exponent[at as usize];
        t += dt;

        // pick the firing edge proportionally to its rate
        let mark = rng.gen::<f64>() * total;
        let rates = tables.rates_at(at);
        let mut acc = 0.0;
        let mut fired = rates.len() - 1;
        for (e, &r) in rates.iter().enumerate() {
            acc += r;
            if mark < acc {
                fired = e;
                break;
            }
        }
        let next = grid
            .transition(at, fired)
            .expect("positive rate implies an in-lattice transition");
        at = next;
        if record {
            path.times.push(t);
            path.points.push(at);
            path.edges_fired.push(fired as u32);
        } else {
            path.times.clear();
            path.points[0] = at;
        }
        if in_target(at) {
            path.exit_time = Some(t);
            return Ok(path);
        }
    }
}

/// Monte Carlo estimate with sampling error.
#[derive(Clone, Debug, Serialize)]
pub struct EstimatorResult {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: usize,
    pub censored: usize,
    pub confidence: f64,
    /// Censored trials were dropped; the estimate carries selection bias.
    pub bias_warning: bool,
}

/// Mean additive exit cost under a stationary q-policy across independent
/// seeded trials. Censored trials are excluded from the mean and flagged.
#[allow(clippy::too_many_arguments)]
pub fn estimate_j(
    grid: &SimplexGrid,
    target: &TargetSet,
    model: &CostModel,
    policy: &Policy,
    m0: u32,
    trials: usize,
    master_seed: u64,
    t_max: f64,
) -> Result<EstimatorResult> {
    let tables = PolicyTables::new(grid, Some(target), model, policy)?;
    let outcomes: Vec<Result<(f64, bool)>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(master_seed, trial);
            let path = run_trial(
                grid,
                Some(target),
                &tables,
                m0,
                &mut rng,
                t_max,
                false,
                (master_seed, trial),
            )?;
            Ok((path.additive_cost, path.censored_at.is_some()))
        })
        .collect();
    let mut costs = Vec::with_capacity(trials);
    let mut censored = 0usize;
    for outcome in outcomes {
        let (cost, was_censored) = outcome?;
        if was_censored {
            censored += 1;
        } else {
            costs.push(cost);
        }
    }
    if costs.is_empty() {
        return Err(Error::Estimation(format!(
            "all {trials} trials were censored at t_max = {t_max}"
        )));
    }
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(EstimatorResult {
        estimate: mean,
        std_error: (var / n).sqrt(),
        trials,
        censored,
        confidence: 0.95,
        bias_warning: censored > 0,
    })
}

/// Risk-sensitive estimate, kept in the log domain.
#[derive(Clone, Debug, Serialize)]
pub struct RiskEstimate {
    /// `log E[exp(n * integral)]`, via log-sum-exp over trials.
    pub log_estimate: f64,
    /// `(1/n) log` of the estimate; its negation is comparable to the
    /// additive per-agent value `V`.
    pub log_estimate_over_n: f64,
    /// Relative standard error of the mean of `exp(n * integral)`.
    pub rel_std_error: f64,
    pub trials: usize,
    pub censored: usize,
    /// Top 1% of trials carry more than half the exponential mass.
    pub heavy_tail_warning: bool,
}

/// Estimates `E[exp(n * int (sum m_x gamma C(u/gamma) - R) dt)]` under a
/// stationary u-policy, with all aggregation in shifted exponent space to
/// avoid overflow.
///
/// Unlike the additive estimator, censored trials keep their partial
/// exponential weight instead of being dropped: under the optimal u-policy
/// the typical path exits slowly and the expectation is carried by rare
/// fast exits, so exclusion would inflate the mean by the censoring odds.
/// With the exponent rate nonpositive off the target (reward dominating
/// the deviation cost at the optimum), a censored weight overstates its
/// own true contribution by at most itself, which is `exp(-n R t_max)`
/// small; censor counts are still reported.
#[allow(clippy::too_many_arguments)]
pub fn estimate_i(
    grid: &SimplexGrid,
    target: &TargetSet,
    model: &CostModel,
    u_policy: &Policy,
    m0: u32,
    trials: usize,
    master_seed: u64,
    t_max: f64,
) -> Result<RiskEstimate> {
    let tables = PolicyTables::new(grid, Some(target), model, u_policy)?;
    let nf = grid.n() as f64;
    let outcomes: Vec<Result<(f64, bool)>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(master_seed, trial);
            let path = run_trial(
                grid,
                Some(target),
                &tables,
                m0,
                &mut rng,
                t_max,
                false,
                (master_seed, trial),
            )?;
            Ok((nf * path.exponent, path.censored_at.is_some()))
        })
        .collect();
    let mut exponents = Vec::with_capacity(trials);
    let mut censored = 0usize;
    for outcome in outcomes {
        let (x, was_censored) = outcome?;
        if was_censored {
            censored += 1;
        }
        exponents.push(x);
    }
    if censored == trials {
        return Err(Error::Estimation(format!(
            "all {trials} trials were censored at t_max = {t_max}"
        )));
    }
    let n = exponents.len() as f64;
    let shift = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = exponents.iter().map(|x| (x - shift).exp()).collect();
    let mean_w = weights.iter().sum::<f64>() / n;
    let var_w = weights
        .iter()
        .map(|w| (w - mean_w) * (w - mean_w))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let rel_std_error = (var_w / n).sqrt() / mean_w;
    let log_estimate = shift + mean_w.ln();

    let mut sorted = weights.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = ((trials / 100).max(1)).min(sorted.len());
    let top_mass: f64 = sorted[..top].iter().sum();
    let heavy_tail_warning = top_mass > 0.5 * mean_w * n;

    Ok(RiskEstimate {
        log_estimate,
        log_estimate_over_n: log_estimate / nf,
        rel_std_error,
        trials,
        censored,
        heavy_tail_warning,
    })
}

/// One simulated trajectory of the n-agent product process, recorded
/// through its empirical projection.
#[derive(Clone, Debug)]
pub struct AgentPathSample {
    pub times: Vec<f64>,
    /// Empirical count vector after each jump; index 0 is the start.
    pub count_path: Vec<Vec<u32>>,
    pub exit_time: Option<f64>,
    pub censored_at: Option<f64>,
    /// Additive cost `(1/n) sum_i sum_y F(rate) + R(L)` accumulated along
    /// the path.
    pub additive_cost: f64,
    pub seed: (u64, u64),
}

/// Per-agent rates: `rate(agent, edge, counts)` for the agent's current
/// state being the edge source.
pub type AgentPolicy<'a> = &'a (dyn Fn(usize, usize, &[u32]) -> f64 + Sync);

/// Simulates the n-agent process with per-agent competing clocks and stops
/// when the empirical projection enters the target region.
#[allow(clippy::too_many_arguments)]
pub fn simulate_agents(
    n: usize,
    d: usize,
    model: &CostModel,
    policy: AgentPolicy,
    x0: &[usize],
    stop: &dyn Fn(&[u32]) -> bool,
    seed: (u64, u64),
    t_max: f64,
) -> Result<AgentPathSample> {
    if x0.len() != n {
        return Err(Error::Argument("x0 must list one state per agent".into()));
    }
    let clocks = n * model.n_edges();
    if clocks > 1_000_000 {
        return Err(Error::Capacity {
            what: "agent clocks",
            needed: clocks as u128,
            cap: 1_000_000,
        });
    }
    let nf = n as f64;
    let mut states = x0.to_vec();
    let mut counts = empirical_counts(&states, d)?;
    let mut rng = trial_rng(seed.0, seed.1);
    let mut path = AgentPathSample {
        times: Vec::new(),
        count_path: vec![counts.clone()],
        exit_time: None,
        censored_at: None,
        additive_cost: 0.0,
        seed,
    };
    if stop(&counts) {
        path.exit_time = Some(0.0);
        return Ok(path);
    }

    let edges_from: Vec<Vec<usize>> = (0..d)
        .map(|x| {
            (0..model.n_edges())
                .filter(|&e| model.edges().edge(e).0 == x)
                .collect()
        })
        .collect();

    let mut t = 0.0f64;
    let mut rates: Vec<(usize, usize, f64)> = Vec::with_capacity(clocks);
    loop {
        rates.clear();
        let mut total = 0.0;
        let mut cost_rate = {
            let coords: Vec<f64> = counts.iter().map(|&k| k as f64 / nf).collect();
            model.reward(&coords)
        };
        for (agent, &x) in states.iter().enumerate() {
            for &e in &edges_from[x] {
                let r = policy(agent, e, &counts);
                if r > 0.0 {
                    rates.push((agent, e, r));
                    total += r;
                }
                cost_rate += model.transformed_cost(e, r.max(0.0))? / nf;
            }
        }
        if total <= 0.0 {
            return Err(Error::StuckState {
                state: 0,
                reward: cost_rate,
            });
        }
        let dt = -(1.0 - rng.gen::<f64>()).ln() / total;
        if t + dt > t_max {
            path.additive_cost += (t_max - t) * cost_rate;
            path.censored_at = Some(t_max);
            return Ok(path);
        }
        path.additive_cost += dt * cost_rate;
        t += dt;

        let mark = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = rates.len() - 1;
        for (idx, &(_, _, r)) in rates.iter().enumerate() {
            acc += r;
            if mark < acc {
                chosen = idx;
                break;
            }
        }
        let (agent, e, _) = rates[chosen];
        let (x, y) = model.edges().edge(e);
        debug_assert_eq!(states[agent], x);
        states[agent] = y;
        counts[x] -= 1;
        counts[y] += 1;
        path.times.push(t);
        path.count_path.push(counts.clone());
        if stop(&counts) {
            path.exit_time = Some(t);
            return Ok(path);
        }
    }
}

/// Time-dependent control hook for the mean-field simulator. Rates are
/// treated as constant on `[t, valid_until(t))`; the simulator re-queries
/// at jumps and at segment boundaries, which keeps the competing-clock
/// method exact for piecewise-constant schedules.
pub trait Controller {
    /// Writes per-edge rates for the current time and lattice point.
    fn rates(&mut self, t: f64, counts: &[u32], out: &mut [f64]);
    /// Time until which the rates stay valid if no jump occurs.
    fn valid_until(&self, t: f64) -> f64;
}

/// Simulates under a time-dependent controller, accumulating the additive
/// integrand `sum m_x F(q(t)) + R(m)` per constant-rate segment.
/// Transformed costs are cached per `(edge, rate bits)`, which matters for
/// the long stretches where a tracking controller sits on the nominal
/// rates.
pub fn simulate_controlled<C: Controller>(
    grid: &SimplexGrid,
    target: Option<&TargetSet>,
    model: &CostModel,
    controller: &mut C,
    m0: u32,
    seed: (u64, u64),
    t_max: f64,
) -> Result<PathSample> {
    let in_target = |i: u32| target.map(|t| t.contains(i)).unwrap_or(false);
    let ne = grid.edges().len();
    let nf = grid.n() as f64;
    let mut rng = trial_rng(seed.0, seed.1);
    let mut path = PathSample {
        times: Vec::new(),
        points: vec![m0],
        edges_fired: Vec::new(),
        exit_time: None,
        censored_at: None,
        additive_cost: 0.0,
        exponent: 0.0,
        seed,
    };
    if in_target(m0) {
        path.exit_time = Some(0.0);
        return Ok(path);
    }
    let mut t = 0.0f64;
    let mut at = m0;
    let mut q = vec![0.0f64; ne];
    let mut edge_rates = vec![0.0f64; ne];
    let mut f_cache: std::collections::HashMap<(usize, u64), f64> =
        std::collections::HashMap::new();
    loop {
        let counts = grid.counts(at);
        controller.rates(t, counts, &mut q);
        let mut total = 0.0;
        let coords = grid.coords(at);
        let mut cost_rate = model.reward(&coords);
        for e in 0..ne {
            let (x, _) = grid.edges().edge(e);
            let kx = counts[x] as f64;
            edge_rates[e] = kx * q[e];
            total += edge_rates[e];
            if kx > 0.0 {
                let qe = q[e].max(0.0);
                let key = (e, qe.to_bits());
                let f = match f_cache.get(&key) {
                    Some(&v) => v,
                    None => {
                        let v = model.transformed_cost(e, qe)?;
                        f_cache.insert(key, v);
                        v
                    }
                };
                cost_rate += (kx / nf) * f;
            }
        }
        if total <= 0.0 {
            return Err(Error::StuckState {
                state: at as usize,
                reward: cost_rate,
            });
        }
        // a controller must report a validity horizon strictly ahead of t;
        // fall back to t_max if it does not, so the loop always advances
        let mut segment_end = controller.valid_until(t).min(t_max);
        if segment_end <= t {
            segment_end = t_max;
        }
        let dt = -(1.0 - rng.gen::<f64>()).ln() / total;
        if t + dt > segment_end {
            // no jump in this constant-rate segment; advance and re-query
            path.additive_cost += (segment_end - t) * cost_rate;
            t = segment_end;
            if t >= t_max {
                path.censored_at = Some(t_max);
                return Ok(path);
            }
            continue;
        }
        path.additive_cost += dt * cost_rate;
        t += dt;
        let mark = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut fired = ne - 1;
        for (e, &r) in edge_rates.iter().enumerate() {
            acc += r;
            if mark < acc {
                fired = e;
                break;
            }
        }
        at = grid
            .transition(at, fired)
            .expect("positive rate implies an in-lattice transition");
        path.times.push(t);
        path.points.push(at);
        path.edges_fired.push(fired as u32);
        if in_target(at) {
            path.exit_time = Some(t);
            return Ok(path);
        }
    }
}

/// Deviation statistics of the uncontrolled empirical-measure process
/// against the deterministic flow, per agent count.
#[derive(Clone, Debug, Serialize)]
pub struct LlnRow {
    pub n: usize,
    pub median_dev: f64,
    pub p90_dev: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LlnTable {
    pub rows: Vec<LlnRow>,
    /// Least-squares slope of `log median` against `log n`.
    pub slope: f64,
}

/// Law-of-large-numbers experiment: for each `n`, simulate the nominal
/// process over `[0, T]` and record `sup_t ||mu^n(t) - nu(t)||` against the
/// RK4-integrated flow `nu' = nu gamma`.
pub fn lln_experiment(
    model: &CostModel,
    m0: &[f64],
    horizon: f64,
    n_list: &[usize],
    trials: usize,
    master_seed: u64,
) -> Result<LlnTable> {
    let d = model.d();
    if m0.len() != d {
        return Err(Error::Argument("m0 dimension mismatch".into()));
    }
    // reference flow under nominal rates
    let steps = 2048usize;
    let h = horizon / steps as f64;
    let nominal: Vec<f64> = (0..steps * model.n_edges())
        .map(|k| model.gamma(k % model.n_edges()))
        .collect();
    let flow = crate::limit::integrate_path(model, m0, &nominal, h, None)?;

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let counts: Vec<u32> = m0
            .iter()
            .map(|&f| {
                let k = (f * n as f64).round();
                if (k - f * n as f64).abs() > 1e-9 {
                    return Err(Error::Argument(format!(
                        "m0 fraction {f} is not representable at n = {n}"
                    )));
                }
                Ok(k as u32)
            })
            .collect::<Result<_>>()?;
        let grid = SimplexGrid::build(n, d, model.edges())?;
        let start = grid
            .index_of(&counts)
            .ok_or_else(|| Error::Argument("m0 missing from lattice".into()))?;
        let policy = Policy::nominal(std::sync::Arc::new(grid.clone()), model);
        let tables = PolicyTables::new(&grid, None, model, &policy)?;

        let mut devs: Vec<f64> = (0..trials as u64)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(master_seed ^ (n as u64).wrapping_mul(0x9e37), trial);
                let path = run_trial(
                    &grid,
                    None,
                    &tables,
                    start,
                    &mut rng,
                    horizon,
                    true,
                    (master_seed, trial),
                )?;
                Ok(sup_deviation(&grid, &path, &flow, horizon))
            })
            .collect::<Result<Vec<f64>>>()?;
        devs.sort_by(f64::total_cmp);
        let median = devs[devs.len() / 2];
        let p90 = devs[(devs.len() * 9) / 10];
        rows.push(LlnRow {
            n,
            median_dev: median,
            p90_dev: p90,
        });
    }

    // log-log slope of the median deviation
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.median_dev.max(1e-300).ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    Ok(LlnTable { rows, slope })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// `sup_t || mu^n(t) - nu(t) ||_2` of a piecewise-constant path against a
/// trajectory sampled on a uniform grid, evaluated at flow grid times and
/// at both sides of every jump.
fn sup_deviation(
    grid: &SimplexGrid,
    path: &PathSample,
    flow: &crate::limit::TrajectoryControl,
    horizon: f64,
) -> f64 {
    let d = grid.d();
    let flow_at = |t: f64| -> Vec<f64> { flow.state_at(t) };
    let l2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut sup = 0.0f64;
    // jump-time comparisons: the path is right-continuous
    for (k, &jt) in path.times.iter().enumerate() {
        if jt > horizon {
            break;
        }
        let nu = flow_at(jt);
        sup = sup.max(l2(&grid.coords(path.points[k]), &nu));
        sup = sup.max(l2(&grid.coords(path.points[k + 1]), &nu));
    }
    // flow grid comparisons
    let mut seg = 0usize;
    for (step, &t) in flow.times.iter().enumerate() {
        if t > horizon {
            break;
        }
        while seg < path.times.len() && path.times[seg] <= t {
            seg += 1;
        }
        let mu = grid.coords(path.points[seg]);
        let nu = &flow.path[step * d..(step + 1) * d];
        sup = sup.max(l2(&mu, nu));
    }
    sup
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut d_stat = 0.0f64;
    while ia < a.len() && ib < b.len() {
        let (va, vb) = (a[ia], b[ib]);
        if va <= vb {
            ia += 1;
        }
        if vb <= va {
            ib += 1;
        }
        let diff = (ia as f64 / na - ib as f64 / nb).abs();
        d_stat = d_stat.max(diff);
    }
    let ne = ((na * nb) / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d_stat;
    // Q_KS(lambda) = 2 sum_k (-1)^{k-1} exp(-2 k^2 lambda^2)
    let mut p = 0.0f64;
    let mut sign = 1.0f64;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    ((d_stat), (2.0 * p).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostFamily, EdgeSet, RewardSpec};
    use crate::lattice::TargetSpec;
    use std::sync::Arc;

    fn two_state(n: usize, reward: f64) -> (Arc<SimplexGrid>, CostModel) {
        let edges = EdgeSet::new(2, vec![(0, 1), (1, 0)]).unwrap();
        let model = CostModel::uniform(
            edges.clone(),
            1.0,
            CostFamily::Power { p: 1.0, q: 1.0 },
            RewardSpec::Constant { value: reward },
        )
        .unwrap();
        let grid = Arc::new(SimplexGrid::build(n, 2, &edges).unwrap());
        (grid, model)
    }

    fn vertex_target(grid: &SimplexGrid) -> TargetSet {
        let n = grid.n() as u32;
        TargetSet::resolve(
            TargetSpec::ExplicitCounts {
                points: vec![vec![0, n]],
            },
            grid,
        )
        .unwrap()
    }

    #[test]
    fn start_in_target_is_empty_path() {
        let (grid, model) = two_state(3, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let k = grid.index_of(&[0, 3]).unwrap();
        let path =
            simulate_meanfield(&grid, Some(&target), &model, &policy, k, (1, 0), 100.0).unwrap();
        assert_eq!(path.exit_time, Some(0.0));
        assert_eq!(path.additive_cost, 0.0);
        assert_eq!(path.exponent, 0.0);
        assert!(path.times.is_empty());
    }

    #[test]
    fn exit_time_is_exponential_for_single_clock() {
        // n = 1, chain 0 -> 1 with constant rate q: T ~ Exp(q)
        let (grid, model) = two_state(1, 1.0);
        let target = vertex_target(&grid);
        let rate = 2.0;
        let policy = Policy::constant(grid.clone(), rate);
        let start = grid.index_of(&[1, 0]).unwrap();
        let trials = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for trial in 0..trials as u64 {
            let path = simulate_meanfield(
                &grid,
                Some(&target),
                &model,
                &policy,
                start,
                (42, trial),
                1e6,
            )
            .unwrap();
            let t = path.exit_time.unwrap();
            sum += t;
            sq += t * t;
        }
        let mean = sum / trials as f64;
        let sd = ((sq / trials as f64 - mean * mean).max(0.0)).sqrt();
        let stderr = sd / (trials as f64).sqrt();
        assert!(
            (mean - 1.0 / rate).abs() <= 3.0 * stderr,
            "mean {mean} vs {} +- {stderr}",
            1.0 / rate
        );
    }

    #[test]
    fn seed_determinism_bit_identical() {
        let (grid, model) = two_state(4, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let start = grid.index_of(&[4, 0]).unwrap();
        let a =
            simulate_meanfield(&grid, Some(&target), &model, &policy, start, (7, 3), 1e6).unwrap();
        let b =
            simulate_meanfield(&grid, Some(&target), &model, &policy, start, (7, 3), 1e6).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.points, b.points);
        assert_eq!(a.additive_cost.to_bits(), b.additive_cost.to_bits());
        assert_eq!(a.exponent.to_bits(), b.exponent.to_bits());
    }

    #[test]
    fn additive_cost_recomputes_from_path() {
        let (grid, model) = two_state(5, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let tables = PolicyTables::new(&grid, Some(&target), &model, &policy).unwrap();
        let start = grid.index_of(&[5, 0]).unwrap();
        for trial in 0..20 {
            let path = simulate_meanfield(
                &grid,
                Some(&target),
                &model,
                &policy,
                start,
                (11, trial),
                1e6,
            )
            .unwrap();
            let recomputed = recompute_additive_cost(&path, &tables);
            assert_eq!(path.additive_cost.to_bits(), recomputed.to_bits());
        }
    }

    #[test]
    fn paths_stay_on_lattice_and_step_by_one_transition() {
        let (grid, model) = two_state(6, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let start = grid.index_of(&[6, 0]).unwrap();
        let path =
            simulate_meanfield(&grid, Some(&target), &model, &policy, start, (3, 0), 1e6).unwrap();
        for (k, w) in path.points.windows(2).enumerate() {
            let edge = path.edges_fired[k] as usize;
            assert_eq!(grid.transition(w[0], edge), Some(w[1]));
        }
        assert!(path.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_policy_is_stuck() {
        let (grid, model) = two_state(3, 0.0);
        let target = vertex_target(&grid);
        let policy = Policy::constant(grid.clone(), 0.0);
        let start = grid.index_of(&[3, 0]).unwrap();
        let err =
            simulate_meanfield(&grid, Some(&target), &model, &policy, start, (1, 0), 1e3);
        assert!(matches!(err, Err(Error::StuckState { .. })));
    }

    #[test]
    fn risk_estimate_is_exactly_one_for_nominal_rates_and_zero_reward() {
        let (grid, model) = two_state(4, 0.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let start = grid.index_of(&[4, 0]).unwrap();
        let est =
            estimate_i(&grid, &target, &model, &policy, start, 500, 9, 1e6).unwrap();
        // integrand is identically zero: C(1) = 0 exactly and R = 0
        assert_eq!(est.log_estimate, 0.0);
        assert_eq!(est.log_estimate_over_n, 0.0);
        assert_eq!(est.rel_std_error, 0.0);
    }

    #[test]
    fn estimate_j_zero_variance_in_target() {
        let (grid, model) = two_state(4, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let k = grid.index_of(&[0, 4]).unwrap();
        let est = estimate_j(&grid, &target, &model, &policy, k, 100, 5, 1e3).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.censored, 0);
    }

    #[test]
    fn all_censored_is_an_estimation_error() {
        let (grid, model) = two_state(4, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let start = grid.index_of(&[4, 0]).unwrap();
        let err = estimate_j(&grid, &target, &model, &policy, start, 50, 5, 1e-9);
        assert!(matches!(err, Err(Error::Estimation(_))));
    }

    #[test]
    fn agent_simulator_projects_and_stops() {
        let (_grid, model) = two_state(3, 1.0);
        let uniform: AgentPolicy = &|_, _, _| 1.0;
        let stop = |c: &[u32]| c[1] == 3;
        let path = simulate_agents(3, 2, &model, uniform, &[0, 0, 0], &stop, (2, 0), 1e6).unwrap();
        assert_eq!(path.count_path[0], vec![3, 0]);
        assert!(path.exit_time.is_some());
        assert_eq!(path.count_path.last().unwrap(), &vec![0, 3]);
        // consecutive counts differ by one moved unit
        for w in path.count_path.windows(2) {
            let moved: i64 = w[0]
                .iter()
                .zip(&w[1])
                .map(|(&a, &b)| (i64::from(b) - i64::from(a)).abs())
                .sum();
            assert_eq!(moved, 2);
        }
        // immediate stop when starting inside
        let path = simulate_agents(3, 2, &model, uniform, &[1, 1, 1], &stop, (2, 0), 1e6).unwrap();
        assert_eq!(path.exit_time, Some(0.0));
    }

    #[test]
    fn product_and_meanfield_exit_times_agree_distributionally() {
        // n = 1: the two simulators must produce identically distributed
        // exit times; KS test across 10^4 trials
        let (grid, model) = two_state(1, 1.0);
        let target = vertex_target(&grid);
        let policy = Policy::nominal(grid.clone(), &model);
        let start = grid.index_of(&[1, 0]).unwrap();
        let trials = 10_000u64;
        let mf: Vec<f64> = (0..trials)
            .map(|t| {
                simulate_meanfield(&grid, Some(&target), &model, &policy, start, (100, t), 1e6)
                    .unwrap()
                    .exit_time
                    .unwrap()
            })
            .collect();
        let uniform: AgentPolicy = &|_, _, _| 1.0;
        let stop = |c: &[u32]| c[1] == 1;
        let agents: Vec<f64> = (0..trials)
            .map(|t| {
                simulate_agents(1, 2, &model, uniform, &[0], &stop, (200, t), 1e6)
                    .unwrap()
                    .exit_time
                    .unwrap()
            })
            .collect();
        let (d, p) = ks_two_sample(&mf, &agents);
        assert!(p > 0.01, "KS p = {p} (D = {d})");
    }

    #[test]
    fn ks_detects_different_distributions() {
        let a: Vec<f64> = (0..2000).map(|i| i as f64 / 2000.0).collect();
        let b: Vec<f64> = (0..2000).map(|i| 0.5 + i as f64 / 2000.0).collect();
        let (d, p) = ks_two_sample(&a, &b);
        assert!(d > 0.4);
        assert!(p < 1e-6);
    }
}
