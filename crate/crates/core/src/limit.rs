//! The deterministic limit problem: controlled flows
//! `mu' = sum_{(x,y)} v_xy mu_x q_xy` on the simplex with running cost
//! `sum mu_x F_xy(q_xy) + R(mu)` until the first entry into a target
//! region.
//!
//! The value is approximated from above by optimizing piecewise-constant
//! controls (the lattice solvers supply the converging approximation from
//! the stochastic side, so upper bounds plus the explicit constructions
//! are all the deterministic side needs). The module also builds the
//! explicit constant-speed straight-line control with rates at least
//! `gamma` and bounded fluxes, and the tube-tracking control used to chase
//! a deterministic reference with the n-agent process.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::lattice::{SimplexGrid, TargetSet, TargetSpec};
use crate::sim::Controller;
use crate::solver::{solve_v, SolveOpts};

/// A time-discretized control path with its integrated state trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryControl {
    pub d: usize,
    pub ne: usize,
    pub h: f64,
    /// Grid nodes `0, h, 2h, ...`; `times.len() = intervals + 1`.
    pub times: Vec<f64>,
    /// Per-interval, per-edge control values, flat `[interval * ne + e]`.
    pub controls: Vec<f64>,
    /// State at each node, flat `[node * d + x]`.
    pub path: Vec<f64>,
    /// Accumulated running cost at each node.
    pub cost: Vec<f64>,
    /// First entry time into the target (linearly interpolated), when a
    /// target was supplied and reached.
    pub exit_time: Option<f64>,
    /// Accumulated cost at the exit time.
    pub exit_cost: Option<f64>,
}

impl TrajectoryControl {
    pub fn final_state(&self) -> &[f64] {
        &self.path[self.path.len() - self.d..]
    }

    /// Linearly interpolated state at time `t` (clamped to the grid).
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        let last = self.times.len() - 1;
        if t <= 0.0 {
            return self.path[..self.d].to_vec();
        }
        if t >= self.times[last] {
            return self.final_state().to_vec();
        }
        let k = ((t / self.h) as usize).min(last - 1);
        let s = ((t - self.times[k]) / self.h).clamp(0.0, 1.0);
        (0..self.d)
            .map(|x| {
                let a = self.path[k * self.d + x];
                let b = self.path[(k + 1) * self.d + x];
                a + s * (b - a)
            })
            .collect()
    }

    /// Control row in force at time `t` (constant per interval).
    pub fn control_at(&self, t: f64) -> &[f64] {
        let intervals = self.times.len() - 1;
        let k = ((t / self.h) as usize).min(intervals.saturating_sub(1));
        &self.controls[k * self.ne..(k + 1) * self.ne]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Deterministic cost outcome of a trajectory against a target region.
#[derive(Clone, Debug, Serialize)]
pub struct DeterministicCostReport {
    /// Running cost up to exit, or up to the horizon when unexited.
    pub running_cost: f64,
    pub exit_reached: bool,
    /// Penalty term added when the exit was not reached.
    pub penalty: Option<f64>,
}

/// RK4 integration of the controlled flow with per-step simplex
/// renormalization. `controls` holds one row per interval; the running
/// cost rides along as an extra state. Transformed costs are cached per
/// `(edge, control bits)`, so segment-constant schedules pay for each
/// distinct value once.
pub fn integrate_path(
    model: &CostModel,
    m0: &[f64],
    controls: &[f64],
    h: f64,
    target: Option<&TargetSpec>,
) -> Result<TrajectoryControl> {
    let d = model.d();
    let ne = model.n_edges();
    if m0.len() != d {
        return Err(Error::Argument("initial state dimension mismatch".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Argument("step size must be positive".into()));
    }
    if controls.len() % ne != 0 {
        return Err(Error::Argument("controls length must be a multiple of the edge count".into()));
    }
    if let Some(bad) = controls.iter().find(|q| !(**q >= 0.0)) {
        return Err(Error::Argument(format!("controls must be >= 0, got {bad}")));
    }
    let intervals = controls.len() / ne;

    let mut f_cache: HashMap<(usize, u64), f64> = HashMap::new();
    let mut f_row = vec![0.0f64; ne];

    let mut times = Vec::with_capacity(intervals + 1);
    let mut path = Vec::with_capacity((intervals + 1) * d);
    let mut cost = Vec::with_capacity(intervals + 1);
    times.push(0.0);
    path.extend_from_slice(m0);
    cost.push(0.0);

    let mut state = m0.to_vec();
    let mut acc_cost = 0.0f64;
    let mut exit_time = None;
    let mut exit_cost = None;

    let edges = model.edges().edges().to_vec();

    // derivative of (state, cost) under the interval's constant controls
    let deriv = |m: &[f64], q: &[f64], f_vals: &[f64], out_m: &mut [f64]| -> f64 {
        out_m.iter_mut().for_each(|v| *v = 0.0);
        let mut cost_rate = 0.0;
        for (e, &(x, y)) in edges.iter().enumerate() {
            let flux = m[x].max(0.0) * q[e];
            out_m[x] -= flux;
            out_m[y] += flux;
            cost_rate += m[x].max(0.0) * f_vals[e];
        }
        cost_rate + model.reward(m)
    };

    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    let already_inside = target
        .and_then(|t| t.contains_continuous(&state))
        .unwrap_or(false);
    if already_inside {
        exit_time = Some(0.0);
        exit_cost = Some(0.0);
    }

    'outer: for k in 0..intervals {
        let q = &controls[k * ne..(k + 1) * ne];
        for (e, slot) in f_row.iter_mut().enumerate() {
            let key = (e, q[e].to_bits());
            *slot = match f_cache.get(&key) {
                Some(&v) => v,
                None => {
                    let v = model.transformed_cost(e, q[e])?;
                    f_cache.insert(key, v);
                    v
                }
            };
        }

        let c1 = deriv(&state, q, &f_row, &mut k1);
        for x in 0..d {
            tmp[x] = state[x] + 0.5 * h * k1[x];
        }
        let c2 = deriv(&tmp, q, &f_row, &mut k2);
        for x in 0..d {
            tmp[x] = state[x] + 0.5 * h * k2[x];
        }
        let c3 = deriv(&tmp, q, &f_row, &mut k3);
        for x in 0..d {
            tmp[x] = state[x] + h * k3[x];
        }
        let c4 = deriv(&tmp, q, &f_row, &mut k4);

        let prev_state = state.clone();
        let prev_cost = acc_cost;
        for x in 0..d {
            state[x] += h / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
        }
        acc_cost += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);

        // simplex renormalization: tolerate integrator dust, reject real
        // negativity
        let mut sum = 0.0;
        for (x, v) in state.iter_mut().enumerate() {
            if *v < -1e-6 {
                return Err(Error::StepSize { coord: x, value: *v });
            }
            *v = v.max(0.0);
            sum += *v;
        }
        for v in state.iter_mut() {
            *v /= sum;
        }

        let t_next = (k + 1) as f64 * h;
        times.push(t_next);
        path.extend_from_slice(&state);
        cost.push(acc_cost);

        if exit_time.is_none() {
            if let Some(spec) = target {
                if spec.contains_continuous(&state).unwrap_or(false) {
                    // bisect the crossing on the linear interpolant
                    let (mut lo, mut hi) = (0.0f64, 1.0f64);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        let probe: Vec<f64> = (0..d)
                            .map(|x| prev_state[x] + mid * (state[x] - prev_state[x]))
                            .collect();
                        if spec.contains_continuous(&probe).unwrap_or(false) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    let s = 0.5 * (lo + hi);
                    exit_time = Some(t_next - h + s * h);
                    exit_cost = Some(prev_cost + s * (acc_cost - prev_cost));
                    break 'outer;
                }
            }
        }
    }

    let kept_controls = controls[..(times.len() - 1) * ne].to_vec();
    Ok(TrajectoryControl {
        d,
        ne,
        h,
        times,
        controls: kept_controls,
        path,
        cost,
        exit_time,
        exit_cost,
    })
}

/// Cost report of an integrated trajectory against a target, with a
/// quadratic distance penalty when the exit was not reached.
pub fn cost_report(
    traj: &TrajectoryControl,
    target: &TargetSpec,
    penalty_weight: f64,
) -> DeterministicCostReport {
    match (traj.exit_time, traj.exit_cost) {
        (Some(_), Some(c)) => DeterministicCostReport {
            running_cost: c,
            exit_reached: true,
            penalty: None,
        },
        _ => {
            let dist = target
                .distance_continuous(traj.final_state())
                .unwrap_or(f64::INFINITY);
            DeterministicCostReport {
                running_cost: *traj.cost.last().unwrap(),
                exit_reached: false,
                penalty: Some(penalty_weight * dist * dist),
            }
        }
    }
}

/// The explicit constant-speed straight-line construction.
#[derive(Clone, Debug)]
pub struct StraightLine {
    pub trajectory: TrajectoryControl,
    /// Constant fluxes `f_xy = m_x q_xy` realizing the direction.
    pub fluxes: Vec<f64>,
    /// Largest flux actually used.
    pub c_bar: f64,
    /// Exit time, equal to `||m - m_tilde||`.
    pub t_exit: f64,
    /// Running cost of the whole segment.
    pub cost: f64,
    /// Cost divided by distance (the `c_a` flavor actually achieved).
    pub cost_per_distance: f64,
}

/// Builds the control that drives the state along the straight segment
/// from `m` (interior) to `m_tilde` at unit speed: constant fluxes with
/// `sum f_xy v_xy = (m_tilde - m)/||m_tilde - m||` from a nonnegative
/// least-squares fit, raised along ergodic cycles until every edge's rate
/// `q_xy(t) = f_xy / mu_x(t)` dominates `gamma_xy` along the whole
/// segment, then sampled onto `intervals` uniform steps.
pub fn straight_line_control(
    model: &CostModel,
    m: &[f64],
    m_tilde: &[f64],
    intervals: usize,
) -> Result<StraightLine> {
    let d = model.d();
    let ne = model.n_edges();
    if m.len() != d || m_tilde.len() != d {
        return Err(Error::Argument("state dimension mismatch".into()));
    }
    let dist = l2_dist(m, m_tilde);
    if dist < 1e-14 {
        return Ok(StraightLine {
            trajectory: TrajectoryControl {
                d,
                ne,
                h: 1.0,
                times: vec![0.0],
                controls: vec![],
                path: m.to_vec(),
                cost: vec![0.0],
                exit_time: Some(0.0),
                exit_cost: Some(0.0),
            },
            fluxes: vec![0.0; ne],
            c_bar: 0.0,
            t_exit: 0.0,
            cost: 0.0,
            cost_per_distance: 0.0,
        });
    }
    if let Some((x, &v)) = m.iter().enumerate().find(|(_, &v)| v <= 1e-12) {
        return Err(Error::Precondition(format!(
            "straight-line control needs an interior start; coordinate {x} is {v}"
        )));
    }

    let direction: Vec<f64> = m_tilde
        .iter()
        .zip(m)
        .map(|(b, a)| (b - a) / dist)
        .collect();
    let mut fluxes = nonnegative_least_squares(model, &direction)?;

    // cycle corrections: push max(gamma) of extra flux around a directed
    // cycle through any edge whose rate could dip below gamma along the
    // segment; cycles sum to zero so the direction is preserved
    let bump = model.gamma_max();
    for e in 0..ne {
        let (x, _) = model.edges().edge(e);
        let need = model.gamma(e) * m[x].max(m_tilde[x]);
        if fluxes[e] >= need {
            continue;
        }
        let (sx, sy) = model.edges().edge(e);
        let cycle = directed_path(model, sy, sx)?;
        fluxes[e] += bump;
        for &pe in &cycle {
            fluxes[pe] += bump;
        }
    }
    let c_bar = fluxes.iter().cloned().fold(0.0, f64::max);

    // sample q(t) = f / mu(t) at interval midpoints along the segment
    let intervals = intervals.max(2);
    let h = dist / intervals as f64;
    let mut controls = vec![0.0f64; intervals * ne];
    for k in 0..intervals {
        let t_mid = (k as f64 + 0.5) * h;
        for e in 0..ne {
            let (x, _) = model.edges().edge(e);
            let mu_x = m[x] + t_mid * direction[x];
            controls[k * ne + e] = fluxes[e] / mu_x;
        }
    }
    let trajectory = integrate_path(model, m, &controls, h, None)?;
    let cost = *trajectory.cost.last().unwrap();
    Ok(StraightLine {
        trajectory,
        fluxes,
        c_bar,
        t_exit: dist,
        cost,
        cost_per_distance: cost / dist,
    })
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Lawson-Hanson nonnegative least squares for `min ||A f - w||, f >= 0`
/// over the edge-direction matrix. The direction lies in the cone spanned
/// by the edge vectors (ergodicity), so the residual vanishes.
fn nonnegative_least_squares(model: &CostModel, w: &[f64]) -> Result<Vec<f64>> {
    let d = model.d();
    let ne = model.n_edges();
    let a = DMatrix::<f64>::from_fn(d, ne, |r, c| {
        let (x, y) = model.edges().edge(c);
        if r == y {
            1.0
        } else if r == x {
            -1.0
        } else {
            0.0
        }
    });
    let wv = DVector::<f64>::from_row_slice(w);
    let mut f = vec![0.0f64; ne];
    let mut passive: Vec<usize> = Vec::new();
    let mut residual = wv.clone();

    for _ in 0..(3 * ne + 10) {
        let grad = a.transpose() * &residual;
        let candidate = (0..ne)
            .filter(|j| !passive.contains(j))
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = candidate else { break };
        if grad[j] <= 1e-12 {
            break;
        }
        passive.push(j);

        loop {
            let ap = a.select_columns(passive.iter());
            let z = ap
                .clone()
                .svd(true, true)
                .solve(&wv, 1e-13)
                .map_err(|e| Error::Argument(format!("least squares failed: {e}")))?;
            if z.iter().all(|&v| v > 1e-13) {
                for (idx, &col) in passive.iter().enumerate() {
                    f[col] = z[idx];
                }
                break;
            }
            // step toward z until the first passive variable hits zero
            let mut alpha = 1.0f64;
            for (idx, &col) in passive.iter().enumerate() {
                if z[idx] <= 1e-13 {
                    let denom = f[col] - z[idx];
                    if denom > 0.0 {
                        alpha = alpha.min(f[col] / denom);
                    }
                }
            }
            for (idx, &col) in passive.iter().enumerate() {
                f[col] += alpha * (z[idx] - f[col]);
            }
            let mut removed = false;
            passive.retain(|&col| {
                let keep = f[col] > 1e-13;
                if !keep {
                    f[col] = 0.0;
                    removed = true;
                }
                keep
            });
            if !removed {
                break;
            }
        }

        let af = &a * DVector::from_row_slice(&f);
        residual = &wv - af;
        if residual.norm() <= 1e-13 {
            break;
        }
    }

    if residual.norm() > 1e-10 {
        return Err(Error::Precondition(format!(
            "direction not representable by nonnegative fluxes (residual {:.3e})",
            residual.norm()
        )));
    }
    Ok(f)
}

/// Shortest directed edge path from `from` to `to` (BFS), as edge indices.
fn directed_path(model: &CostModel, from: usize, to: usize) -> Result<Vec<usize>> {
    if from == to {
        return Ok(Vec::new());
    }
    let d = model.d();
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; d]; // (state, edge)
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(from);
    let mut seen = vec![false; d];
    seen[from] = true;
    while let Some(x) = queue.pop_front() {
        if x == to {
            break;
        }
        for e in 0..model.n_edges() {
            let (a, b) = model.edges().edge(e);
            if a == x && !seen[b] {
                seen[b] = true;
                prev[b] = Some((x, e));
                queue.push_back(b);
            }
        }
    }
    if !seen[to] {
        return Err(Error::Precondition(format!(
            "no directed path from {from} to {to}; edge set not strongly connected"
        )));
    }
    let mut path = Vec::new();
    let mut at = to;
    while at != from {
        let (p, e) = prev[at].expect("reached node has a predecessor");
        path.push(e);
        at = p;
    }
    path.reverse();
    Ok(path)
}

/// Options for the trajectory optimizer.
#[derive(Clone, Debug, Serialize)]
pub struct OptimizeOpts {
    pub horizon: f64,
    pub segments: usize,
    /// Integration step; default `1e-3 * horizon`.
    pub h: Option<f64>,
    /// Number of random multistarts in addition to the deterministic ones.
    pub restarts: usize,
    /// Penalty weight on squared distance to the target at the horizon;
    /// default `1e3 * R_max * horizon`.
    pub penalty: Option<f64>,
    /// Margin pushed inside the target when aiming the straight-line
    /// initialization.
    pub interior_margin: f64,
    pub seed: u64,
    pub max_passes: usize,
    /// Optional warm start, one row of segment controls.
    #[serde(skip)]
    pub warm_start: Option<Vec<f64>>,
}

impl Default for OptimizeOpts {
    fn default() -> Self {
        Self {
            horizon: 4.0,
            segments: 8,
            h: None,
            restarts: 4,
            penalty: None,
            interior_margin: 0.01,
            seed: 0,
            max_passes: 60,
            warm_start: None,
        }
    }
}

/// Result of a trajectory optimization run.
#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub trajectory: TrajectoryControl,
    pub cost: f64,
    pub exit_reached: bool,
    /// Segment-level controls of the best run (for warm starts).
    pub segment_controls: Vec<f64>,
}

/// Local optimization of piecewise-constant controls by multistart
/// coordinate descent. The returned cost is an upper bound on the
/// deterministic value by construction.
pub fn optimize_v(
    model: &CostModel,
    target: &TargetSpec,
    m0: &[f64],
    opts: &OptimizeOpts,
) -> Result<OptimizeOutcome> {
    if target.contains_continuous(m0).is_none() {
        return Err(Error::Argument(
            "optimize_v needs a continuous-region target (half-space or ball)".into(),
        ));
    }
    let d = model.d();
    let ne = model.n_edges();
    if m0.len() != d {
        return Err(Error::Argument("m0 dimension mismatch".into()));
    }
    if target.contains_continuous(m0).unwrap() {
        return Ok(OptimizeOutcome {
            trajectory: TrajectoryControl {
                d,
                ne,
                h: 1.0,
                times: vec![0.0],
                controls: vec![],
                path: m0.to_vec(),
                cost: vec![0.0],
                exit_time: Some(0.0),
                exit_cost: Some(0.0),
            },
            cost: 0.0,
            exit_reached: true,
            segment_controls: vec![],
        });
    }

    let segments = opts.segments.max(1);
    let h = opts.h.unwrap_or(1e-3 * opts.horizon);
    let penalty = opts
        .penalty
        .unwrap_or(1e3 * model.reward_spec().max_on_simplex(d) * opts.horizon);
    // ceil keeps nested segment counts (k and 2k) on the same time grid,
    // which makes warm-started refinement genuinely monotone
    let intervals = (opts.horizon / h).round().max(1.0) as usize;
    let per_seg = intervals.div_ceil(segments).max(1);
    let intervals = per_seg * segments;
    let h = opts.horizon / intervals as f64;

    let expand = |seg: &[f64], buf: &mut Vec<f64>| {
        buf.clear();
        for s in 0..segments {
            for _ in 0..per_seg {
                buf.extend_from_slice(&seg[s * ne..(s + 1) * ne]);
            }
        }
    };
    let objective = |seg: &[f64]| -> Result<f64> {
        let mut buf = Vec::with_capacity(intervals * ne);
        expand(seg, &mut buf);
        let traj = integrate_path(model, m0, &buf, h, Some(target))?;
        let report = cost_report(&traj, target, penalty);
        Ok(report.running_cost + report.penalty.unwrap_or(0.0))
    };

    // deterministic starts: nominal rates and, from interior points, the
    // straight line toward an interior point of the target
    let nominal: Vec<f64> = (0..segments * ne).map(|k| model.gamma(k % ne)).collect();
    let mut starts: Vec<Vec<f64>> = vec![nominal.clone()];
    if m0.iter().all(|&v| v > 1e-12) {
        if let Some(aim) = target.interior_point_toward(m0, opts.interior_margin) {
            if let Ok(line) = straight_line_control(model, m0, &aim, 4 * segments) {
                // average the line's rates over each optimizer segment;
                // nominal rates after the line's exit
                let mut seg = nominal.clone();
                let seg_len = opts.horizon / segments as f64;
                for s in 0..segments {
                    let t_mid = (s as f64 + 0.5) * seg_len;
                    if t_mid < line.t_exit {
                        seg[s * ne..(s + 1) * ne].copy_from_slice(line.trajectory.control_at(t_mid));
                    }
                }
                starts.push(seg);
            }
        }
    }
    if let Some(warm) = &opts.warm_start {
        if warm.len() == segments * ne {
            starts.push(warm.clone());
        }
    }
    let fixed = starts.len();
    for r in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64 + 1));
        let base = starts[r % fixed].clone();
        let jittered: Vec<f64> = base
            .iter()
            .map(|&q| {
                let noise: f64 = rng.gen_range(-0.6..0.6);
                (q * noise.exp()).max(1e-6)
            })
            .collect();
        starts.push(jittered);
    }

    let outcomes: Vec<Result<(f64, Vec<f64>)>> = starts
        .into_par_iter()
        .map(|start| {
            let (cost, seg) = coordinate_descent(&objective, start, opts.max_passes)?;
            Ok((cost, seg))
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for outcome in outcomes {
        let (cost, seg) = outcome?;
        if best.as_ref().map(|b| cost < b.0).unwrap_or(true) {
            best = Some((cost, seg));
        }
    }
    let (cost, seg) = best.expect("at least one start");

    let mut buf = Vec::with_capacity(intervals * ne);
    expand(&seg, &mut buf);
    let trajectory = integrate_path(model, m0, &buf, h, Some(target))?;
    let exit_reached = trajectory.exit_time.is_some();
    Ok(OptimizeOutcome {
        trajectory,
        cost,
        exit_reached,
        segment_controls: seg,
    })
}

/// Coordinate descent with multiplicative and additive probes and an
/// adaptive step; never accepts a worse objective, so the result is at
/// most the starting cost.
fn coordinate_descent(
    objective: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    mut vars: Vec<f64>,
    max_passes: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut best = objective(&vars)?;
    let mut step = 0.5f64;
    for _ in 0..max_passes {
        let mut improved = false;
        for i in 0..vars.len() {
            let current = vars[i];
            let scale = current.abs().max(1e-3);
            let candidates = [
                current * (1.0 + step),
                current / (1.0 + step),
                (current + step * scale).max(0.0),
                (current - step * scale).max(0.0),
            ];
            for cand in candidates {
                if cand == current {
                    continue;
                }
                vars[i] = cand;
                let val = objective(&vars)?;
                if val < best - 1e-12 {
                    best = val;
                    improved = true;
                    break;
                }
                vars[i] = current;
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-4 {
                break;
            }
        }
    }
    Ok((best, vars))
}

/// Tube-tracking controller: follows a deterministic reference by scaling
/// its rates with the occupancy ratio `mu^n_x / mu_ref_x`, reverting to
/// the nominal rates permanently once the simulated path leaves the
/// `r2`-tube around the reference (or the reference ends).
pub struct TrackingController {
    reference: TrajectoryControl,
    r2: f64,
    gamma: Vec<f64>,
    edges: Vec<(usize, usize)>,
    n: f64,
    broken: bool,
}

impl TrackingController {
    pub fn new(
        model: &CostModel,
        reference: TrajectoryControl,
        r2: f64,
        n_agents: usize,
    ) -> Result<Self> {
        let d = reference.d;
        for (k, chunk) in reference.path.chunks(d).enumerate() {
            if let Some((x, &v)) = chunk.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                return Err(Error::Precondition(format!(
                    "reference coordinate {x} vanishes at node {k} ({v}); tracking needs strictly positive references"
                )));
            }
        }
        Ok(Self {
            gamma: (0..model.n_edges()).map(|e| model.gamma(e)).collect(),
            edges: model.edges().edges().to_vec(),
            reference,
            r2,
            n: n_agents as f64,
            broken: false,
        })
    }

    /// True once the path left the tube and the controller fell back to
    /// the nominal rates.
    pub fn diverged(&self) -> bool {
        self.broken
    }

    pub fn reset(&mut self) {
        self.broken = false;
    }
}

impl Controller for TrackingController {
    fn rates(&mut self, t: f64, counts: &[u32], out: &mut [f64]) {
        if t >= self.reference.horizon() {
            self.broken = true;
        }
        if !self.broken {
            let mu_ref = self.reference.state_at(t);
            let dist = counts
                .iter()
                .zip(&mu_ref)
                .map(|(&k, &r)| {
                    let diff = k as f64 / self.n - r;
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            if dist > self.r2 {
                self.broken = true;
            } else {
                let q_ref = self.reference.control_at(t);
                for (e, &(x, _)) in self.edges.iter().enumerate() {
                    out[e] = q_ref[e] * (counts[x] as f64 / self.n) / mu_ref[x];
                }
                return;
            }
        }
        out.copy_from_slice(&self.gamma);
    }

    fn valid_until(&self, t: f64) -> f64 {
        if self.broken {
            return f64::INFINITY;
        }
        let h = self.reference.h;
        let mut next = ((t / h).floor() + 1.0) * h;
        if next <= t {
            // t sat exactly on (or rounded onto) a boundary
            next += h;
        }
        next
    }
}

/// Per-edge findings of the controllability growth checks.
#[derive(Clone, Debug, Serialize)]
pub struct GrowthEdgeReport {
    pub edge: (usize, usize),
    /// `u^{p+1} C'(u)` along `u = 10^{-1} .. 10^{-8}`.
    pub growth_samples: Vec<(f64, f64)>,
    pub growth_diverges: bool,
    /// Last value of `u C'(u) - u` along `u = 10 .. 10^8` (the literal
    /// statement) and its per-edge scaled variant at `u/gamma`.
    pub liminf_value: f64,
    pub liminf_scaled_value: f64,
    pub liminf_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    pub tail_exponent_p: f64,
    pub edges: Vec<GrowthEdgeReport>,
    pub pass: bool,
}

/// Numeric gate for the controllability growth conditions: requires
/// `u^{p+1} C'(u) -> -inf` at zero (strict divergence of the sampled
/// sequence) and `liminf u C'(u) - u >= 0` at infinity. Both the literal
/// statement and the gamma-scaled variant are reported; the gate uses the
/// literal one.
pub fn check_growth_conditions(model: &CostModel) -> Result<GrowthReport> {
    let p = model.tail_exponent_p.ok_or_else(|| {
        Error::Unsupported("growth gate needs tail_exponent_p on the model".into())
    })?;
    let mut edges = Vec::with_capacity(model.n_edges());
    let mut pass = true;
    for e in 0..model.n_edges() {
        let family = model.family(e);
        let gamma = model.gamma(e);
        let growth_samples: Vec<(f64, f64)> = (1..=8)
            .map(|k| {
                let u = 10f64.powi(-k);
                (u, u.powf(p + 1.0) * family.derivative(u))
            })
            .collect();
        let diverging = growth_samples
            .windows(2)
            .all(|w| w[1].1 < w[0].1)
            && growth_samples.last().unwrap().1 < -1e2;

        let tail = |scale: f64| {
            let u = 1e8 * scale;
            (u / scale) * family.derivative(u / scale) - u / scale
        };
        let liminf_value = tail(1.0);
        let liminf_scaled_value = tail(gamma);
        let liminf_ok = liminf_value >= -1e-4;

        pass &= diverging && liminf_ok;
        edges.push(GrowthEdgeReport {
            edge: model.edges().edge(e),
            growth_samples,
            growth_diverges: diverging,
            liminf_value,
            liminf_scaled_value,
            liminf_ok,
        });
    }
    Ok(GrowthReport {
        tail_exponent_p: p,
        edges,
        pass,
    })
}

/// One row of the lattice-to-limit convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub sup_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Reference values on the coarsest lattice: `(counts, v_hat)`.
    pub reference: Vec<(Vec<u32>, f64)>,
}

/// Convergence study: solves the lattice problem for each `n` and compares
/// against the trajectory-optimization value at every point of the
/// coarsest lattice. Refuses models that fail the growth gate (the
/// uniform convergence result does not cover them).
pub fn convergence_study(
    model: &CostModel,
    target_spec: &TargetSpec,
    n_list: &[usize],
    solve_opts: &SolveOpts,
    opt_opts: &OptimizeOpts,
) -> Result<ConvergenceTable> {
    if n_list.is_empty() {
        return Err(Error::Argument("n_list must not be empty".into()));
    }
    let gate = check_growth_conditions(model)?;
    if !gate.pass {
        let detail: Vec<String> = gate
            .edges
            .iter()
            .filter(|e| !e.growth_diverges || !e.liminf_ok)
            .map(|e| {
                format!(
                    "edge {:?}: growth_diverges={}, liminf={:.3e}",
                    e.edge, e.growth_diverges, e.liminf_value
                )
            })
            .collect();
        return Err(Error::Unsupported(format!(
            "cost model fails the controllability growth conditions; convergence is not guaranteed: {}",
            detail.join("; ")
        )));
    }

    let n0 = *n_list.iter().min().unwrap();
    let d = model.d();
    let grid0 = SimplexGrid::build(n0, d, model.edges())?;
    let target0 = TargetSet::resolve(target_spec.clone(), &grid0)?;

    // reference values by trajectory optimization at the coarse points
    let points: Vec<u32> = (0..grid0.len() as u32).collect();
    let reference: Vec<(Vec<u32>, f64)> = points
        .par_iter()
        .map(|&i| {
            let counts = grid0.counts(i).to_vec();
            if target0.contains(i) {
                return Ok((counts, 0.0));
            }
            let coords = grid0.coords(i);
            let outcome = optimize_v(model, target_spec, &coords, opt_opts)?;
            Ok((counts, outcome.cost))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = Arc::new(SimplexGrid::build(n, d, model.edges())?);
        let target = TargetSet::resolve(target_spec.clone(), &grid)?;
        let (field, _, _) = solve_v(&grid, &target, model, solve_opts)?;
        let mut sup_gap = 0.0f64;
        for (counts0, v_hat) in &reference {
            let idx = if n % n0 == 0 {
                let scaled: Vec<u32> = counts0.iter().map(|&k| k * (n / n0) as u32).collect();
                grid.index_of(&scaled)
            } else {
                nearest_lattice_point(&grid, counts0, n0)
            };
            let Some(idx) = idx else { continue };
            sup_gap = sup_gap.max((field.value(idx) - v_hat).abs());
        }
        rows.push(ConvergenceRow { n, sup_gap });
    }
    Ok(ConvergenceTable { rows, reference })
}

/// Nearest lattice point (rounded counts, drift fixed on the largest
/// coordinate) for non-nested grids.
fn nearest_lattice_point(grid: &SimplexGrid, counts0: &[u32], n0: usize) -> Option<u32> {
    let n = grid.n();
    let mut scaled: Vec<i64> = counts0
        .iter()
        .map(|&k| ((k as f64) * n as f64 / n0 as f64).round() as i64)
        .collect();
    let drift: i64 = n as i64 - scaled.iter().sum::<i64>();
    if drift != 0 {
        let argmax = (0..scaled.len())
            .max_by_key(|&x| scaled[x])
            .expect("nonempty counts");
        scaled[argmax] += drift;
    }
    let counts: Vec<u32> = scaled.iter().map(|&k| k.max(0) as u32).collect();
    grid.index_of(&counts)
}
