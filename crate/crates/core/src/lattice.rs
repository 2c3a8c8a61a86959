//! The simplex lattice `P^n(X)`: all probability vectors on `d` states with
//! coordinates in multiples of `1/n`, stored as integer count vectors so
//! that neighbor identification and hashing are exact. Points are
//! enumerated in colexicographic order of the count vector, which fixes
//! the ordinals used throughout the solvers and the CSV exports.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::EdgeSet;
use crate::error::{Error, Result};

/// Default cap on the number of lattice points a grid may hold.
pub const DEFAULT_POINT_CAP: u128 = 10_000_000;

/// Out-of-lattice marker in the neighbor table.
const OUT: u32 = u32::MAX;

/// Number of lattice points, `binomial(n + d - 1, d - 1)`.
pub fn point_count(n: usize, d: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..(d - 1) as u128 {
        acc = acc * (n as u128 + i + 1) / (i + 1);
    }
    acc
}

/// Enumerated lattice with per-edge transition table.
#[derive(Clone, Debug)]
pub struct SimplexGrid {
    n: usize,
    d: usize,
    edges: EdgeSet,
    counts: Vec<u32>,
    index: HashMap<Vec<u32>, u32>,
    neighbors: Vec<u32>,
}

impl SimplexGrid {
    pub fn build(n: usize, d: usize, edges: &EdgeSet) -> Result<Self> {
        Self::build_with_cap(n, d, edges, DEFAULT_POINT_CAP)
    }

    pub fn build_with_cap(n: usize, d: usize, edges: &EdgeSet, cap: u128) -> Result<Self> {
        if n < 1 || d < 2 {
            return Err(Error::Argument(format!(
                "grid needs n >= 1 and d >= 2, got n={n}, d={d}"
            )));
        }
        if edges.d() != d {
            return Err(Error::Argument("edge set dimension mismatch".into()));
        }
        let total = point_count(n, d);
        if total > cap {
            return Err(Error::Capacity {
                what: "simplex lattice",
                needed: total,
                cap,
            });
        }
        let total = total as usize;

        // colexicographic enumeration: the last coordinate varies slowest
        let mut counts = Vec::with_capacity(total * d);
        let mut current = vec![0u32; d];
        fill_colex(&mut counts, &mut current, d, n as u32);
        debug_assert_eq!(counts.len(), total * d);

        let mut index = HashMap::with_capacity(total);
        for i in 0..total {
            index.insert(counts[i * d..(i + 1) * d].to_vec(), i as u32);
        }

        let ne = edges.len();
        let mut neighbors = vec![OUT; total * ne];
        let mut scratch = vec![0u32; d];
        for i in 0..total {
            let point = &counts[i * d..(i + 1) * d];
            for (e, &(x, y)) in edges.edges().iter().enumerate() {
                if point[x] == 0 {
                    continue;
                }
                scratch.copy_from_slice(point);
                scratch[x] -= 1;
                scratch[y] += 1;
                neighbors[i * ne + e] = index[&scratch];
            }
        }

        Ok(Self {
            n,
            d,
            edges: edges.clone(),
            counts,
            index,
            neighbors,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.counts.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Integer counts of point `i`.
    pub fn counts(&self, i: u32) -> &[u32] {
        let i = i as usize;
        &self.counts[i * self.d..(i + 1) * self.d]
    }

    /// Fractions `k/n` of point `i`.
    pub fn coords(&self, i: u32) -> Vec<f64> {
        self.counts(i)
            .iter()
            .map(|&k| k as f64 / self.n as f64)
            .collect()
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<u32> {
        self.index.get(counts).copied()
    }

    /// One `1/n` mass unit moved from `x` to `y` along edge `e`, or `None`
    /// when the source coordinate is zero (the transition leaves the
    /// lattice; its jump rate is exactly zero in every generator).
    pub fn transition(&self, i: u32, edge: usize) -> Option<u32> {
        let nb = self.neighbors[i as usize * self.edges.len() + edge];
        (nb != OUT).then_some(nb)
    }

    /// Empirical projection of an agent configuration: normalized counts
    /// `(k_1/n, ..., k_d/n)` as a lattice ordinal.
    pub fn project_empirical(&self, config: &AgentConfig) -> Result<u32> {
        if config.states.len() != self.n {
            return Err(Error::Argument(format!(
                "configuration has {} agents, grid expects {}",
                config.states.len(),
                self.n
            )));
        }
        let counts = empirical_counts(&config.states, self.d)?;
        self.index_of(&counts)
            .ok_or_else(|| Error::Argument("projected point missing from grid".into()))
    }
}

fn fill_colex(out: &mut Vec<u32>, current: &mut [u32], remaining_dims: usize, remaining: u32) {
    if remaining_dims == 1 {
        current[0] = remaining;
        out.extend_from_slice(current);
        return;
    }
    // the highest still-free coordinate varies slowest
    for k in 0..=remaining {
        current[remaining_dims - 1] = k;
        fill_colex(out, current, remaining_dims - 1, remaining - k);
    }
    current[remaining_dims - 1] = 0;
}

/// Per-agent state assignment, `x^n` in `X^n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub states: Vec<usize>,
}

impl AgentConfig {
    pub fn new(states: Vec<usize>, d: usize) -> Result<Self> {
        if let Some(&s) = states.iter().find(|&&s| s >= d) {
            return Err(Error::Argument(format!("agent state {s} out of range")));
        }
        Ok(Self { states })
    }
}

/// Occupation counts of an agent-state list.
pub fn empirical_counts(states: &[usize], d: usize) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; d];
    for &s in states {
        if s >= d {
            return Err(Error::Argument(format!("agent state {s} out of range")));
        }
        counts[s] += 1;
    }
    Ok(counts)
}

/// Declarative target-region description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    /// Lattice points given by their integer count vectors.
    ExplicitCounts { points: Vec<Vec<u32>> },
    /// `{ m : m[coord] >= threshold }` (or `<=` for `Leq`).
    HalfSpace {
        coord: usize,
        threshold: f64,
        direction: Direction,
    },
    /// Euclidean ball `{ m : ||m - center|| <= radius }`.
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Geq,
    Leq,
}

impl TargetSpec {
    /// Membership as a region of the continuous simplex; `None` for kinds
    /// that only make sense on a fixed lattice.
    pub fn contains_continuous(&self, m: &[f64]) -> Option<bool> {
        match self {
            TargetSpec::ExplicitCounts { .. } => None,
            TargetSpec::HalfSpace {
                coord,
                threshold,
                direction,
            } => Some(match direction {
                Direction::Geq => m[*coord] >= *threshold,
                Direction::Leq => m[*coord] <= *threshold,
            }),
            TargetSpec::Ball { center, radius } => {
                let dist2: f64 = m
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Some(dist2.sqrt() <= *radius)
            }
        }
    }

    /// Euclidean distance from `m` to the continuous region (0 inside).
    pub fn distance_continuous(&self, m: &[f64]) -> Option<f64> {
        match self {
            TargetSpec::ExplicitCounts { .. } => None,
            TargetSpec::HalfSpace {
                coord,
                threshold,
                direction,
            } => Some(match direction {
                Direction::Geq => (threshold - m[*coord]).max(0.0),
                Direction::Leq => (m[*coord] - threshold).max(0.0),
            }),
            TargetSpec::Ball { center, radius } => {
                let dist2: f64 = m
                    .iter()
                    .zip(center)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Some((dist2.sqrt() - radius).max(0.0))
            }
        }
    }

    /// A point a `margin` inside the region, reachable from `m` — used to
    /// aim trajectory initializations at the interior of the target.
    pub fn interior_point_toward(&self, m: &[f64], margin: f64) -> Option<Vec<f64>> {
        match self {
            TargetSpec::ExplicitCounts { .. } => None,
            TargetSpec::HalfSpace {
                coord,
                threshold,
                direction,
            } => {
                let c = *coord;
                let goal = match direction {
                    Direction::Geq => (threshold + margin).min(1.0),
                    Direction::Leq => (threshold - margin).max(0.0),
                };
                let mut out = m.to_vec();
                let rest: f64 = 1.0 - m[c];
                if rest <= 0.0 {
                    // all mass already on the coordinate; spread the excess
                    out.iter_mut().for_each(|v| *v = (1.0 - goal) / (m.len() - 1) as f64);
                } else {
                    let scale = (1.0 - goal) / rest;
                    for (i, v) in out.iter_mut().enumerate() {
                        if i != c {
                            *v *= scale;
                        }
                    }
                }
                out[c] = goal;
                Some(out)
            }
            TargetSpec::Ball { center, radius } => {
                let to_center: Vec<f64> =
                    m.iter().zip(center).map(|(a, b)| b - a).collect();
                let dist = to_center.iter().map(|v| v * v).sum::<f64>().sqrt();
                let reach = (dist - radius + margin).max(0.0);
                let mut out: Vec<f64> = if dist > 0.0 {
                    m.iter()
                        .zip(&to_center)
                        .map(|(a, t)| a + t * (reach / dist))
                        .collect()
                } else {
                    m.to_vec()
                };
                // clip back into the simplex
                let mut sum = 0.0;
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                    sum += *v;
                }
                out.iter_mut().for_each(|v| *v /= sum);
                Some(out)
            }
        }
    }
}

/// Target region resolved on a grid: spec plus bitmask.
#[derive(Clone, Debug)]
pub struct TargetSet {
    pub spec: TargetSpec,
    mask: Vec<bool>,
    ordinals: Vec<u32>,
}

impl TargetSet {
    /// Resolves the declarative region to a bitmask over the grid. An empty
    /// resolution is an error (the exit problem requires a nonempty target).
    pub fn resolve(spec: TargetSpec, grid: &SimplexGrid) -> Result<Self> {
        let mut mask = vec![false; grid.len()];
        match &spec {
            TargetSpec::ExplicitCounts { points } => {
                for counts in points {
                    let i = grid.index_of(counts).ok_or_else(|| {
                        Error::Config(format!("target point {counts:?} is not on the lattice"))
                    })?;
                    mask[i as usize] = true;
                }
            }
            other => {
                for i in 0..grid.len() {
                    let coords = grid.coords(i as u32);
                    mask[i] = other.contains_continuous(&coords).unwrap();
                }
            }
        }
        let ordinals: Vec<u32> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i as u32))
            .collect();
        if ordinals.is_empty() {
            return Err(Error::Config(
                "target set resolves to the empty set on this lattice".into(),
            ));
        }
        Ok(Self {
            spec,
            mask,
            ordinals,
        })
    }

    /// Builds the set directly from a membership mask (used by fattening).
    fn from_mask(spec: TargetSpec, mask: Vec<bool>) -> Self {
        let ordinals = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i as u32))
            .collect();
        Self {
            spec,
            mask,
            ordinals,
        }
    }

    pub fn contains(&self, i: u32) -> bool {
        self.mask[i as usize]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn ordinals(&self) -> &[u32] {
        &self.ordinals
    }

    pub fn len(&self) -> usize {
        self.ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordinals.is_empty()
    }
}

/// Euclidean `delta`-fattening of a resolved target set: all lattice points
/// within distance `delta` of some point of `K`.
pub fn fatten(grid: &SimplexGrid, target: &TargetSet, delta: f64) -> Result<TargetSet> {
    if delta < 0.0 {
        return Err(Error::Argument("fattening radius must be >= 0".into()));
    }
    let core: Vec<Vec<f64>> = target
        .ordinals()
        .iter()
        .map(|&i| grid.coords(i))
        .collect();
    let mut mask = vec![false; grid.len()];
    for i in 0..grid.len() {
        if target.contains(i as u32) {
            mask[i] = true;
            continue;
        }
        let m = grid.coords(i as u32);
        mask[i] = core.iter().any(|k| {
            let dist2: f64 = m.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum();
            dist2.sqrt() <= delta
        });
    }
    Ok(TargetSet::from_mask(target.spec.clone(), mask))
}

/// Verdict of the permutation-invariance check on a product-space target.
#[derive(Clone, Debug, Serialize)]
pub struct InvarianceVerdict {
    pub invariant: bool,
    pub exhaustive: bool,
    /// A pair of configurations with equal empirical measure but different
    /// membership, when one was found.
    pub counterexample: Option<(Vec<usize>, Vec<usize>)>,
}

/// Checks whether a predicate on `X^n` depends only on the empirical
/// measure. Exhaustive when `d^n <= 1_000_000`, otherwise by sampled random
/// permutations.
pub fn check_permutation_invariance(
    predicate: &dyn Fn(&[usize]) -> bool,
    n: usize,
    d: usize,
    samples: usize,
    seed: u64,
) -> InvarianceVerdict {
    let total = (d as u128).checked_pow(n as u32);
    if let Some(total) = total.filter(|&t| t <= 1_000_000) {
        // exhaustive: group by counts, membership must be constant per group
        let mut seen: HashMap<Vec<u32>, (bool, Vec<usize>)> = HashMap::new();
        let mut config = vec![0usize; n];
        for ordinal in 0..total {
            let mut rem = ordinal;
            for slot in config.iter_mut() {
                *slot = (rem % d as u128) as usize;
                rem /= d as u128;
            }
            let counts = empirical_counts(&config, d).expect("valid states");
            let member = predicate(&config);
            match seen.get(&counts) {
                None => {
                    seen.insert(counts, (member, config.clone()));
                }
                Some((first, witness)) => {
                    if *first != member {
                        return InvarianceVerdict {
                            invariant: false,
                            exhaustive: true,
                            counterexample: Some((witness.clone(), config.clone())),
                        };
                    }
                }
            }
        }
        return InvarianceVerdict {
            invariant: true,
            exhaustive: true,
            counterexample: None,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let config: Vec<usize> = (0..n).map(|_| rng.gen_range(0..d)).collect();
        let mut permuted = config.clone();
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            permuted.swap(i, j);
        }
        if predicate(&config) != predicate(&permuted) {
            return InvarianceVerdict {
                invariant: false,
                exhaustive: false,
                counterexample: Some((config, permuted)),
            };
        }
    }
    InvarianceVerdict {
        invariant: true,
        exhaustive: false,
        counterexample: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::EdgeSet;

    fn chain_edges(d: usize) -> EdgeSet {
        let mut edges = Vec::new();
        for x in 0..d - 1 {
            edges.push((x, x + 1));
            edges.push((x + 1, x));
        }
        EdgeSet::new(d, edges).unwrap()
    }

    #[test]
    fn small_grids_enumerate_expected_points() {
        let grid = SimplexGrid::build(2, 2, &chain_edges(2)).unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid.counts(0), &[2, 0]);
        assert_eq!(grid.counts(1), &[1, 1]);
        assert_eq!(grid.counts(2), &[0, 2]);

        let grid = SimplexGrid::build(3, 3, &chain_edges(3)).unwrap();
        assert_eq!(grid.len(), 10);
        assert_eq!(point_count(3, 3), 10);

        let grid = SimplexGrid::build(1, 4, &chain_edges(4)).unwrap();
        assert_eq!(grid.len(), 4);
        for i in 0..4 {
            assert_eq!(grid.counts(i).iter().sum::<u32>(), 1);
        }
    }

    #[test]
    fn index_round_trips_and_counts_sum() {
        let grid = SimplexGrid::build(6, 3, &chain_edges(3)).unwrap();
        for i in 0..grid.len() as u32 {
            assert_eq!(grid.index_of(grid.counts(i)), Some(i));
            assert_eq!(grid.counts(i).iter().sum::<u32>(), 6);
        }
    }

    #[test]
    fn capacity_cap_is_enforced() {
        let err = SimplexGrid::build_with_cap(100, 4, &chain_edges(4), 1000).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
        // default cap trips too: C(503, 3) ~ 2.1e7
        assert!(SimplexGrid::build(500, 4, &chain_edges(4)).is_err());
    }

    #[test]
    fn transitions_move_one_unit_and_mark_boundary() {
        let edges = chain_edges(2);
        let grid = SimplexGrid::build(2, 2, &edges).unwrap();
        let mid = grid.index_of(&[1, 1]).unwrap();
        let fwd = edges.position(0, 1).unwrap();
        let to = grid.transition(mid, fwd).unwrap();
        assert_eq!(grid.counts(to), &[0, 2]);
        // no agent at state 0 there, so the forward edge leaves the lattice
        assert_eq!(grid.transition(to, fwd), None);
    }

    #[test]
    fn neighbor_table_is_reversible() {
        let edges = chain_edges(3);
        let grid = SimplexGrid::build(5, 3, &edges).unwrap();
        for i in 0..grid.len() as u32 {
            for e in 0..edges.len() {
                if let Some(j) = grid.transition(i, e) {
                    let back = edges.reverse(e).unwrap();
                    assert_eq!(grid.transition(j, back), Some(i));
                }
            }
        }
    }

    #[test]
    fn empirical_projection() {
        let grid = SimplexGrid::build(3, 2, &chain_edges(2)).unwrap();
        let config = AgentConfig::new(vec![0, 0, 1], 2).unwrap();
        let i = grid.project_empirical(&config).unwrap();
        assert_eq!(grid.counts(i), &[2, 1]);
        // permuting the agents leaves the projection unchanged
        let config = AgentConfig::new(vec![1, 0, 0], 2).unwrap();
        assert_eq!(grid.project_empirical(&config).unwrap(), i);
        // all agents at state 0 projects to the vertex
        let config = AgentConfig::new(vec![0, 0, 0], 2).unwrap();
        let v = grid.project_empirical(&config).unwrap();
        assert_eq!(grid.counts(v), &[3, 0]);
    }

    #[test]
    fn target_resolution_and_fattening() {
        let edges = chain_edges(2);
        let grid = SimplexGrid::build(4, 2, &edges).unwrap();
        let k = TargetSet::resolve(
            TargetSpec::ExplicitCounts {
                points: vec![vec![4, 0]],
            },
            &grid,
        )
        .unwrap();
        assert_eq!(k.len(), 1);

        // delta = 0 is K itself
        let same = fatten(&grid, &k, 0.0).unwrap();
        assert_eq!(same.ordinals(), k.ordinals());

        // (3/4, 1/4) sits at distance sqrt(2)/4 ~ 0.354 > 0.3: excluded
        let tight = fatten(&grid, &k, 0.3).unwrap();
        assert_eq!(tight.ordinals(), k.ordinals());
        // but included once delta exceeds that distance
        let wider = fatten(&grid, &k, 0.36).unwrap();
        assert_eq!(wider.len(), 2);

        // delta at the simplex diameter swallows the whole grid
        let all = fatten(&grid, &k, 2f64.sqrt()).unwrap();
        assert_eq!(all.len(), grid.len());

        // fattening is monotone in delta
        for (small, large) in [(0.1, 0.2), (0.2, 0.9), (0.9, 1.5)] {
            let a = fatten(&grid, &k, small).unwrap();
            let b = fatten(&grid, &k, large).unwrap();
            assert!(a.ordinals().iter().all(|o| b.contains(*o)));
        }
    }

    #[test]
    fn half_space_and_ball_targets() {
        let edges = chain_edges(2);
        let grid = SimplexGrid::build(4, 2, &edges).unwrap();
        let k = TargetSet::resolve(
            TargetSpec::HalfSpace {
                coord: 0,
                threshold: 0.75,
                direction: Direction::Geq,
            },
            &grid,
        )
        .unwrap();
        let counts: Vec<&[u32]> = k.ordinals().iter().map(|&i| grid.counts(i)).collect();
        assert_eq!(counts, vec![&[4, 0][..], &[3, 1][..]]);

        let ball = TargetSet::resolve(
            TargetSpec::Ball {
                center: vec![0.0, 1.0],
                radius: 0.4,
            },
            &grid,
        )
        .unwrap();
        assert_eq!(ball.len(), 2); // (0,4) and (1,3) at distance sqrt(2)/4

        let empty = TargetSet::resolve(
            TargetSpec::Ball {
                center: vec![0.5, 0.5],
                radius: 0.01,
            },
            &SimplexGrid::build(3, 2, &edges).unwrap(),
        );
        assert!(empty.is_err(), "no n=3 lattice point within 0.01 of (1/2, 1/2)");
    }

    #[test]
    fn permutation_invariance_verdicts() {
        // at least half the agents at state 0: depends only on counts
        let invariant = check_permutation_invariance(
            &|cfg| cfg.iter().filter(|&&s| s == 0).count() * 2 >= cfg.len(),
            3,
            2,
            200,
            7,
        );
        assert!(invariant.invariant && invariant.exhaustive);

        // agent #1 pinned to state 0: not exchangeable
        let pinned = check_permutation_invariance(&|cfg| cfg[0] == 0, 3, 2, 200, 7);
        assert!(!pinned.invariant && pinned.exhaustive);
        assert!(pinned.counterexample.is_some());

        // sampled regime agrees with the exhaustive verdict
        let sampled = check_permutation_invariance(&|cfg| cfg[0] == 0, 24, 3, 500, 11);
        assert!(!sampled.invariant && !sampled.exhaustive);
    }
}
