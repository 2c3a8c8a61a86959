//! Cost machinery for rate-controlled jump processes.
//!
//! A model consists of an edge set `Z` (the allowed transitions of an
//! ergodic base chain), nominal rates `gamma_xy > 0`, a per-edge cost
//! `C_xy` for deviating from the nominal rate, and a reward `R` on the
//! simplex. From these we build
//!
//! ```text
//! ell(q)    = q log q - q + 1
//! G(u, q)   = u ell(q/u) - gamma C(u / gamma)
//! F(q)      = sup_{u > 0} G(u, q)
//! C*(z)     = sup_{u > 0} [ z u - C(u) ],   z < 1
//! H(m, xi)  = sum_{(x,y)} m_x gamma_xy C*(1 - exp(-xi_xy))
//! ```
//!
//! `F` is the running cost of the risk-neutral problem equivalent to the
//! risk-sensitive one, and `H` is the closed form of the Hamiltonian
//! `inf_q sum m_x (q xi + F(q))`. The closed form relies on exchanging
//! inf and sup in the game-form Hamiltonian; `check_isaacs` verifies that
//! exchange numerically, and `check_admissibility` verifies the structural
//! conditions on `C` (convexity, `u C'(u) - u` increasing, `C(1) = 0`)
//! under which the exchange is known to hold.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar;

/// Relative entropy integrand `ell(q) = q log q - q + 1`, continuously
/// extended with `ell(0) = 1`. Negative arguments are a domain error.
pub fn ell(q: f64) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(Error::Domain(format!("ell needs q >= 0, got {q}")));
    }
    Ok(ell_raw(q))
}

#[inline]
pub(crate) fn ell_raw(q: f64) -> f64 {
    debug_assert!(q >= 0.0);
    if q == 0.0 {
        1.0
    } else {
        q * q.ln() - q + 1.0
    }
}

/// Directed edge set of allowed transitions between `d` states.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeSet {
    d: usize,
    edges: Vec<(usize, usize)>,
    #[serde(skip)]
    by_pair: HashMap<(usize, usize), usize>,
}

impl EdgeSet {
    /// Builds and validates an edge set. Edges must connect distinct valid
    /// states, contain no duplicates, and form a strongly connected digraph
    /// (ergodicity of the base chain).
    pub fn new(d: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if d < 2 {
            return Err(Error::Argument(format!("need at least 2 states, got {d}")));
        }
        let mut by_pair = HashMap::new();
        for (i, &(x, y)) in edges.iter().enumerate() {
            if x >= d || y >= d {
                return Err(Error::Argument(format!(
                    "edge ({x},{y}) out of range for d={d}"
                )));
            }
            if x == y {
                return Err(Error::Argument(format!("self-loop ({x},{x}) not allowed")));
            }
            if by_pair.insert((x, y), i).is_some() {
                return Err(Error::Argument(format!("duplicate edge ({x},{y})")));
            }
        }
        let set = Self { d, edges, by_pair };
        if !set.strongly_connected() {
            return Err(Error::Argument(
                "transition graph is not strongly connected".into(),
            ));
        }
        Ok(set)
    }

    fn strongly_connected(&self) -> bool {
        let reach = |reverse: bool| {
            let mut seen = vec![false; self.d];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(x) = stack.pop() {
                for &(a, b) in &self.edges {
                    let (from, to) = if reverse { (b, a) } else { (a, b) };
                    if from == x && !seen[to] {
                        seen[to] = true;
                        stack.push(to);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(false) && reach(true)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge(&self, idx: usize) -> (usize, usize) {
        self.edges[idx]
    }

    /// Index of the edge `(x, y)` if present.
    pub fn position(&self, x: usize, y: usize) -> Option<usize> {
        self.by_pair.get(&(x, y)).copied()
    }

    /// Index of the reverse edge, when the graph contains it.
    pub fn reverse(&self, idx: usize) -> Option<usize> {
        let (x, y) = self.edges[idx];
        self.position(y, x)
    }

    /// Rebuilds the lookup table (used after deserialization).
    pub fn rebuild_index(&mut self) {
        self.by_pair = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i))
            .collect();
    }
}

/// Per-edge cost family for deviating from the nominal rate.
///
/// `Power { p, q }` is `C(u) = 1/(p u^p) + u^q / q - (1/p + 1/q)`,
/// `Log` is `C(u) = -log u + u - 1`, and `Tabulated` interpolates
/// user-provided `(u, C(u))` samples linearly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CostFamily {
    Power { p: f64, q: f64 },
    Log,
    Tabulated { samples: Vec<(f64, f64)> },
}

impl CostFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            CostFamily::Power { p, q } => {
                if !(*p >= 1.0) || !(*q >= 1.0) {
                    return Err(Error::Config(format!(
                        "power family needs p >= 1 and q >= 1, got p={p}, q={q}"
                    )));
                }
            }
            CostFamily::Log => {}
            CostFamily::Tabulated { samples } => {
                if samples.len() < 3 {
                    return Err(Error::Config("tabulated cost needs >= 3 samples".into()));
                }
                if !samples.windows(2).all(|w| w[1].0 > w[0].0) {
                    return Err(Error::Config("tabulated u samples must be increasing".into()));
                }
                if samples[0].0 <= 0.0 {
                    return Err(Error::Config("tabulated u samples must be positive".into()));
                }
            }
        }
        let at_one = self.value(1.0);
        if at_one.abs() > 1e-10 {
            return Err(Error::Config(format!(
                "cost family violates C(1) = 0 (got {at_one:.3e})"
            )));
        }
        Ok(())
    }

    /// `C(u)`; `+inf` outside the finiteness interval.
    pub fn value(&self, u: f64) -> f64 {
        match self {
            CostFamily::Power { p, q } => {
                if u <= 0.0 {
                    return f64::INFINITY;
                }
                // constant written as 1/p + 1/q so that C(1) == 0 exactly
                u.powf(-p) / p + u.powf(*q) / q - (1.0 / p + 1.0 / q)
            }
            CostFamily::Log => {
                if u <= 0.0 {
                    f64::INFINITY
                } else {
                    -u.ln() + u - 1.0
                }
            }
            CostFamily::Tabulated { samples } => {
                let (lo, hi) = (samples[0].0, samples[samples.len() - 1].0);
                if u < lo || u > hi {
                    return f64::INFINITY;
                }
                let pos = samples.partition_point(|s| s.0 <= u);
                if pos == 0 {
                    return samples[0].1;
                }
                if pos == samples.len() {
                    return samples[samples.len() - 1].1;
                }
                let (u0, c0) = samples[pos - 1];
                let (u1, c1) = samples[pos];
                c0 + (c1 - c0) * (u - u0) / (u1 - u0)
            }
        }
    }

    /// `C'(u)`. Analytic for the closed-form families; for tabulated costs a
    /// central finite difference with a grid-adaptive step (the sample
    /// spacing around `u`) is used.
    pub fn derivative(&self, u: f64) -> f64 {
        match self {
            CostFamily::Power { p, q } => -u.powf(-(p + 1.0)) + u.powf(q - 1.0),
            CostFamily::Log => -1.0 / u + 1.0,
            CostFamily::Tabulated { samples } => {
                let (lo, hi) = (samples[0].0, samples[samples.len() - 1].0);
                let local = samples
                    .windows(2)
                    .filter(|w| w[0].0 <= u && u <= w[1].0)
                    .map(|w| w[1].0 - w[0].0)
                    .next()
                    .unwrap_or((hi - lo) / samples.len() as f64);
                let h = (0.5 * local).min(u - lo).min(hi - u).max(1e-12);
                (self.value(u + h) - self.value(u - h)) / (2.0 * h)
            }
        }
    }

    /// Open interval on which `C` is finite.
    pub fn finiteness_interval(&self) -> (f64, f64) {
        match self {
            CostFamily::Power { .. } | CostFamily::Log => (0.0, f64::INFINITY),
            CostFamily::Tabulated { samples } => {
                (samples[0].0, samples[samples.len() - 1].0)
            }
        }
    }

    /// `u - gamma C(u / gamma)`, written per family so that the linear
    /// parts cancel symbolically. Evaluating `G` through this term avoids
    /// the `u - u` cancellation that would otherwise swallow logarithmic
    /// growth at large `u` (and with it the divergence detection for
    /// costs like `-log u + u - 1`).
    fn linear_defect(&self, gamma: f64, u: f64) -> f64 {
        match self {
            CostFamily::Power { p, q } if *q == 1.0 => {
                gamma * (1.0 / p + 1.0) - gamma * (gamma / u).powf(*p) / p
            }
            CostFamily::Log => gamma * (u / gamma).ln() + gamma,
            _ => u - gamma * self.value(u / gamma),
        }
    }
}

/// Reward (running gain) on the simplex, `R >= 0` and continuous.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Constant { value: f64 },
    /// `R(m) = offset + sum_x weights[x] m_x`.
    Affine { weights: Vec<f64>, offset: f64 },
    /// `R(m) = scale * ||m - center||`.
    Radial { center: Vec<f64>, scale: f64 },
}

impl RewardSpec {
    pub fn eval(&self, m: &[f64]) -> f64 {
        match self {
            RewardSpec::Constant { value } => *value,
            RewardSpec::Affine { weights, offset } => {
                offset + m.iter().zip(weights).map(|(mi, w)| mi * w).sum::<f64>()
            }
            RewardSpec::Radial { center, scale } => {
                let dist2: f64 = m
                    .iter()
                    .zip(center)
                    .map(|(mi, ci)| (mi - ci) * (mi - ci))
                    .sum();
                scale * dist2.sqrt()
            }
        }
    }

    /// Nonnegativity on the simplex, by construction per kind plus a
    /// vertex/sample sweep.
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            RewardSpec::Constant { value } => {
                if *value < 0.0 {
                    return Err(Error::Config("constant reward must be >= 0".into()));
                }
            }
            RewardSpec::Affine { weights, offset } => {
                if weights.len() != d {
                    return Err(Error::Config(format!(
                        "affine reward needs {d} weights, got {}",
                        weights.len()
                    )));
                }
                // affine min over the simplex sits at a vertex
                let min = weights.iter().cloned().fold(f64::INFINITY, f64::min) + offset;
                if min < 0.0 {
                    return Err(Error::Config(format!(
                        "affine reward dips to {min:.3e} at a vertex"
                    )));
                }
            }
            RewardSpec::Radial { center, scale } => {
                if center.len() != d {
                    return Err(Error::Config(format!(
                        "radial reward center needs {d} coordinates"
                    )));
                }
                if *scale < 0.0 {
                    return Err(Error::Config("radial reward scale must be >= 0".into()));
                }
            }
        }
        // sample sweep over vertices and edge midpoints
        for x in 0..d {
            let mut m = vec![0.0; d];
            m[x] = 1.0;
            if self.eval(&m) < 0.0 {
                return Err(Error::Config(format!("reward negative at vertex {x}")));
            }
            for y in 0..d {
                if y == x {
                    continue;
                }
                let mut mid = vec![0.0; d];
                mid[x] = 0.5;
                mid[y] = 0.5;
                if self.eval(&mid) < 0.0 {
                    return Err(Error::Config("reward negative on an edge midpoint".into()));
                }
            }
        }
        Ok(())
    }

    /// Upper bound of `R` over the simplex (attained at a vertex for each
    /// supported kind).
    pub fn max_on_simplex(&self, d: usize) -> f64 {
        (0..d)
            .map(|x| {
                let mut m = vec![0.0; d];
                m[x] = 1.0;
                self.eval(&m)
            })
            .fold(0.0, f64::max)
    }
}

/// How the supremum in a Legendre dual evaluation was attained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualAttainment {
    Interior,
    /// Maximizer pinned to the edge of the searchable interval.
    Boundary,
    /// Objective grew past the divergence ceiling.
    Unbounded,
}

/// One evaluation of `C*(z) = sup_u [z u - C(u)]` with its maximizer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DualGradientSample {
    pub z: f64,
    pub value: f64,
    pub maximizer: f64,
    pub attained: DualAttainment,
}

/// Optimal game pair for one edge at discrete gradient `xi`:
/// `u* = gamma (C')^{-1}(1 - e^{-xi})` and `q* = u* e^{-xi}`.
#[derive(Clone, Copy, Debug)]
pub struct OptimalPair {
    pub u: f64,
    pub q: f64,
    pub attained: DualAttainment,
}

/// Objective ceiling above which a supremum is declared divergent.
const DIVERGENCE_CEILING: f64 = 1e12;

/// Cap for dual arguments built as `1 - e^w`: for `w < -36` the difference
/// rounds to exactly 1.0 in f64, which would leave the open domain of the
/// dual. Evaluating at the cap instead perturbs admissible duals by well
/// under any solver tolerance.
pub(crate) const DUAL_ARG_MAX: f64 = 1.0 - 1e-13;

/// Cost model: edges, nominal rates, per-edge cost families, reward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostModel {
    edges: EdgeSet,
    gamma: Vec<f64>,
    families: Vec<CostFamily>,
    reward: RewardSpec,
    /// The tail exponent `p` from the controllability growth condition,
    /// required by `check_f_bounds` and the convergence experiments.
    pub tail_exponent_p: Option<f64>,
}

impl CostModel {
    pub fn new(
        edges: EdgeSet,
        gamma: Vec<f64>,
        families: Vec<CostFamily>,
        reward: RewardSpec,
    ) -> Result<Self> {
        if gamma.len() != edges.len() || families.len() != edges.len() {
            return Err(Error::Argument(
                "gamma and cost families must match the edge count".into(),
            ));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0)) {
            return Err(Error::Config(format!("nominal rates must be > 0, got {g}")));
        }
        for f in &families {
            f.validate()?;
        }
        reward.validate(edges.d())?;
        Ok(Self {
            edges,
            gamma,
            families,
            reward,
            tail_exponent_p: None,
        })
    }

    /// Same cost family and rate on every edge of a complete-over-`edges`
    /// model.
    pub fn uniform(
        edges: EdgeSet,
        gamma: f64,
        family: CostFamily,
        reward: RewardSpec,
    ) -> Result<Self> {
        let ne = edges.len();
        Self::new(edges, vec![gamma; ne], vec![family; ne], reward)
    }

    /// Builds edges and rates from a `d x d` rate matrix with zero diagonal;
    /// the edge set is the positive support.
    pub fn from_gamma_matrix(
        matrix: &[Vec<f64>],
        families: impl Fn(usize, usize) -> CostFamily,
        reward: RewardSpec,
    ) -> Result<Self> {
        let d = matrix.len();
        let mut edges = Vec::new();
        let mut gamma = Vec::new();
        let mut fams = Vec::new();
        for (x, row) in matrix.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Config("gamma matrix must be square".into()));
            }
            for (y, &g) in row.iter().enumerate() {
                if x == y {
                    if g != 0.0 {
                        return Err(Error::Config("gamma matrix diagonal must be zero".into()));
                    }
                    continue;
                }
                if g < 0.0 {
                    return Err(Error::Config(format!("gamma[{x}][{y}] is negative")));
                }
                if g > 0.0 {
                    edges.push((x, y));
                    gamma.push(g);
                    fams.push(families(x, y));
                }
            }
        }
        let set = EdgeSet::new(d, edges).map_err(|e| match e {
            Error::Argument(msg) => Error::Config(msg),
            other => other,
        })?;
        Self::new(set, gamma, fams, reward)
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn d(&self) -> usize {
        self.edges.d()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn gamma(&self, edge: usize) -> f64 {
        self.gamma[edge]
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma.iter().cloned().fold(0.0, f64::max)
    }

    pub fn family(&self, edge: usize) -> &CostFamily {
        &self.families[edge]
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.reward
    }

    pub fn reward(&self, m: &[f64]) -> f64 {
        self.reward.eval(m)
    }

    /// `gamma C(u / gamma)` for one edge.
    pub fn scaled_cost(&self, edge: usize, u: f64) -> f64 {
        let g = self.gamma[edge];
        g * self.families[edge].value(u / g)
    }

    /// `G(u, q) = u ell(q/u) - gamma C(u/gamma)`.
    pub fn g_value(&self, edge: usize, u: f64, q: f64) -> Result<f64> {
        if !(u > 0.0) {
            return Err(Error::Domain(format!("G needs u > 0, got {u}")));
        }
        if !(q >= 0.0) {
            return Err(Error::Domain(format!("G needs q >= 0, got {q}")));
        }
        Ok(self.g_raw(edge, u, q))
    }

    #[inline]
    fn g_raw(&self, edge: usize, u: f64, q: f64) -> f64 {
        // u ell(q/u) - gamma C(u/gamma) = q log(q/u) - q + [u - gamma C(u/gamma)]
        let defect = self.families[edge].linear_defect(self.gamma[edge], u);
        if q == 0.0 {
            defect
        } else {
            q * (q / u).ln() - q + defect
        }
    }

    /// `C*(z) = sup_{u>0} [z u - C(u)]` for one edge, by bracketed scan,
    /// golden-section search and a Newton polish of `C'(u) = z`. The domain
    /// is `z < 1`; at or above 1 the supremum is infinite for every
    /// admissible family and the call is a domain error.
    pub fn legendre_dual(&self, edge: usize, z: f64) -> Result<DualGradientSample> {
        if !(z < 1.0) {
            return Err(Error::Domain(format!(
                "legendre dual is defined for z < 1, got {z}"
            )));
        }
        let family = &self.families[edge];
        let objective = |u: f64| z * u - family.value(u);
        let (flo, fhi) = family.finiteness_interval();
        let lo = if flo > 0.0 { flo } else { 1e-12 };
        let hi = if fhi.is_finite() { fhi } else { 1e12 };
        let sup = maximize_on_ray(objective, lo, hi, flo > 0.0, fhi.is_finite())?;
        let sample = match sup {
            RaySup::Unbounded => DualGradientSample {
                z,
                value: f64::INFINITY,
                maximizer: f64::NAN,
                attained: DualAttainment::Unbounded,
            },
            RaySup::Boundary(u, v) => DualGradientSample {
                z,
                value: v,
                maximizer: u,
                attained: DualAttainment::Boundary,
            },
            RaySup::Interior(u, _) => {
                // polish the stationarity condition C'(u) = z
                let u = scalar::newton_polish(
                    |x| family.derivative(x) - z,
                    u,
                    flo.max(0.0),
                    if fhi.is_finite() { fhi } else { f64::INFINITY },
                    5,
                );
                DualGradientSample {
                    z,
                    value: objective(u),
                    maximizer: u,
                    attained: DualAttainment::Interior,
                }
            }
        };
        Ok(sample)
    }

    /// Transformed cost `F(q) = sup_{u>0} G(u, q)`, or `+inf` when the
    /// supremum diverges along either end of the ray (detected by a
    /// geometric walk past the divergence ceiling).
    pub fn transformed_cost(&self, edge: usize, q: f64) -> Result<f64> {
        if !(q >= 0.0) {
            return Err(Error::Domain(format!("F needs q >= 0, got {q}")));
        }
        let family = &self.families[edge];
        let g = self.gamma[edge];
        let objective = |u: f64| self.g_raw(edge, u, q);
        let (flo, fhi) = family.finiteness_interval();
        let lo = if flo > 0.0 { flo * g } else { 1e-12 * g };
        let hi = if fhi.is_finite() { fhi * g } else { 1e12 * g };
        let sup = maximize_on_ray(objective, lo, hi, flo > 0.0, fhi.is_finite())?;
        let value = match sup {
            RaySup::Unbounded => f64::INFINITY,
            RaySup::Boundary(_, v) | RaySup::Interior(_, v) => {
                // F(q) >= G(gamma, q) = gamma ell(q/gamma) since C(1) = 0
                v.max(g * ell_raw(q / g))
            }
        };
        Ok(value)
    }

    /// Closed-form Hamiltonian
    /// `H(m, xi) = sum_{(x,y)} m_x gamma_xy C*(1 - e^{-xi_xy})`.
    /// Edges with `m_x = 0` contribute nothing and are skipped exactly; an
    /// unbounded dual on a contributing edge propagates as `+inf`.
    pub fn hamiltonian(&self, m: &[f64], xi: &[f64]) -> Result<f64> {
        if m.len() != self.d() || xi.len() != self.n_edges() {
            return Err(Error::Argument("hamiltonian dimension mismatch".into()));
        }
        let mut total = 0.0;
        for (e, &(x, _)) in self.edges.edges().iter().enumerate() {
            if m[x] == 0.0 {
                continue;
            }
            if !xi[e].is_finite() {
                return Err(Error::Domain("hamiltonian needs finite xi".into()));
            }
            let z = (1.0 - (-xi[e]).exp()).min(DUAL_ARG_MAX);
            let dual = self.legendre_dual(e, z)?;
            if dual.attained == DualAttainment::Unbounded {
                return Ok(f64::INFINITY);
            }
            total += m[x] * self.gamma[e] * dual.value;
        }
        Ok(total)
    }

    /// First-order optimal pair for one edge at gradient `xi`:
    /// the maximizing `u*` of the dual at `z = 1 - e^{-xi}` and the
    /// minimizing rate `q* = u* e^{-xi}` of `q xi + F(q)`.
    pub fn optimal_pair(&self, edge: usize, xi: f64) -> Result<OptimalPair> {
        if !xi.is_finite() {
            return Err(Error::Domain("optimal_pair needs finite xi".into()));
        }
        let z = (1.0 - (-xi).exp()).min(DUAL_ARG_MAX);
        let dual = self.legendre_dual(edge, z)?;
        let u = self.gamma[edge] * dual.maximizer;
        Ok(OptimalPair {
            u,
            q: u * (-xi).exp(),
            attained: dual.attained,
        })
    }

    /// Checks the structural admissibility conditions on every edge over a
    /// user grid: convexity of `C` (nonnegative second differences),
    /// `C(1) = 0`, and monotonicity of `u C'(u) - u` with a finite
    /// difference derivative.
    pub fn check_admissibility(&self, u_grid: &[f64]) -> Result<AdmissibilityReport> {
        if u_grid.len() < 3 {
            return Err(Error::Argument(
                "admissibility check needs a grid of at least 3 points".into(),
            ));
        }
        if !u_grid.windows(2).all(|w| w[1] > w[0]) || u_grid[0] <= 0.0 {
            return Err(Error::Argument(
                "admissibility grid must be positive and strictly increasing".into(),
            ));
        }
        let mut edges = Vec::with_capacity(self.n_edges());
        for e in 0..self.n_edges() {
            let family = &self.families[e];
            let c: Vec<f64> = u_grid.iter().map(|&u| family.value(u)).collect();
            // convexity: second divided differences >= 0 up to roundoff
            let mut convex = true;
            let mut convexity_violation = None;
            for i in 1..u_grid.len() - 1 {
                let s_left = (c[i] - c[i - 1]) / (u_grid[i] - u_grid[i - 1]);
                let s_right = (c[i + 1] - c[i]) / (u_grid[i + 1] - u_grid[i]);
                if s_right - s_left < -1e-8 * (1.0 + s_left.abs() + s_right.abs()) {
                    convex = false;
                    convexity_violation.get_or_insert(u_grid[i]);
                }
            }
            let c_at_one = family.value(1.0);
            // phi(u) = u C'(u) - u with C' from centered differences; only
            // interior grid points carry a symmetric estimate
            let phi: Vec<(f64, f64)> = (1..u_grid.len() - 1)
                .map(|i| {
                    let deriv = (c[i + 1] - c[i - 1]) / (u_grid[i + 1] - u_grid[i - 1]);
                    (u_grid[i], u_grid[i] * deriv - u_grid[i])
                })
                .collect();
            let mut monotone = true;
            let mut first_violation = None;
            let mut max_rise: f64 = 0.0;
            for w in phi.windows(2) {
                let rise = w[1].1 - w[0].1;
                max_rise = max_rise.max(rise);
                if rise < -1e-6 * (1.0 + w[0].1.abs()) {
                    monotone = false;
                    first_violation.get_or_insert(w[0].0);
                }
            }
            edges.push(EdgeAdmissibility {
                edge: self.edges.edge(e),
                convex,
                convexity_violation,
                c_one: c_at_one,
                rate_gap_monotone: monotone,
                strictly_increasing: monotone && max_rise > 1e-9,
                first_violation,
            });
        }
        let pass = edges
            .iter()
            .all(|e| e.convex && e.c_one.abs() <= 1e-10 && e.rate_gap_monotone);
        Ok(AdmissibilityReport { pass, edges })
    }

    /// Grid minimax check of the inf/sup exchange for one edge at gradient
    /// `xi`, for `L(u, q) = q xi + u ell(q/u) - gamma C(u/gamma)`. Both
    /// orders are evaluated on the grids and refined by golden-section
    /// around the grid optima; the signed gap `inf sup - sup inf` is
    /// reported together with the worst deviation of the inner closed form
    /// `inf_q L = u (1 - e^{-xi}) - gamma C(u/gamma)` from the grid inf.
    pub fn check_isaacs(
        &self,
        edge: usize,
        xi: f64,
        u_grid: &[f64],
        q_grid: &[f64],
    ) -> Result<IsaacsReport> {
        for grid in [u_grid, q_grid] {
            if grid.len() < 2 || grid[0] <= 0.0 || !grid.windows(2).all(|w| w[1] > w[0]) {
                return Err(Error::Argument(
                    "isaacs grids must be positive and strictly increasing".into(),
                ));
            }
        }
        let lagrangian = |u: f64, q: f64| q * xi + self.g_raw(edge, u, q);

        let sup_over_u = |q: f64| -> f64 {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, &u) in u_grid.iter().enumerate() {
                let v = lagrangian(u, q);
                if v > best.1 {
                    best = (i, v);
                }
            }
            let lo = u_grid[best.0.saturating_sub(1)];
            let hi = u_grid[(best.0 + 1).min(u_grid.len() - 1)];
            scalar::golden_max(|u| lagrangian(u, q), lo, hi, 1e-10).1
        };
        let inf_over_q = |u: f64| -> f64 {
            let mut best = (0usize, f64::INFINITY);
            for (i, &q) in q_grid.iter().enumerate() {
                let v = lagrangian(u, q);
                if v < best.1 {
                    best = (i, v);
                }
            }
            let lo = q_grid[best.0.saturating_sub(1)];
            let hi = q_grid[(best.0 + 1).min(q_grid.len() - 1)];
            // q = 0 is admissible; include the endpoint when the grid start is hit
            let refined = -scalar::golden_max(|q| -lagrangian(u, q), lo, hi, 1e-10).1;
            if best.0 == 0 {
                refined.min(lagrangian(u, 0.0))
            } else {
                refined
            }
        };

        // inf over q of sup over u
        let mut inf_sup = (0usize, f64::INFINITY);
        for (j, &q) in q_grid.iter().enumerate() {
            let v = sup_over_u(q);
            if v < inf_sup.1 {
                inf_sup = (j, v);
            }
        }
        let lo = q_grid[inf_sup.0.saturating_sub(1)];
        let hi = q_grid[(inf_sup.0 + 1).min(q_grid.len() - 1)];
        let mut inf_sup_val = -scalar::golden_max(|q| -sup_over_u(q), lo, hi, 1e-8).1;
        if inf_sup.0 == 0 {
            inf_sup_val = inf_sup_val.min(sup_over_u(0.0));
        }

        // sup over u of inf over q
        let mut sup_inf = (0usize, f64::NEG_INFINITY);
        for (i, &u) in u_grid.iter().enumerate() {
            let v = inf_over_q(u);
            if v > sup_inf.1 {
                sup_inf = (i, v);
            }
        }
        let lo = u_grid[sup_inf.0.saturating_sub(1)];
        let hi = u_grid[(sup_inf.0 + 1).min(u_grid.len() - 1)];
        let sup_inf_val = scalar::golden_max(&inf_over_q, lo, hi, 1e-8).1;

        // inner closed form against the grid inf, sampled at u where the
        // minimizing q = u e^{-xi} is interior to the q grid
        let z = 1.0 - (-xi).exp();
        let mut inner_dev: f64 = 0.0;
        for &u in u_grid.iter().step_by((u_grid.len() / 32).max(1)) {
            let q_star = u * (-xi).exp();
            if q_star < q_grid[0] * 1.5 || q_star > q_grid[q_grid.len() - 1] / 1.5 {
                continue;
            }
            let closed = u * z - self.scaled_cost(edge, u);
            let grid_inf = inf_over_q(u);
            if closed.is_finite() && grid_inf.is_finite() {
                inner_dev = inner_dev.max((closed - grid_inf).abs());
            }
        }

        Ok(IsaacsReport {
            xi,
            inf_sup: inf_sup_val,
            sup_inf: sup_inf_val,
            gap: inf_sup_val - sup_inf_val,
            inner_closed_form_dev: inner_dev,
        })
    }

    /// Verifies the two-sided envelope of the transformed cost on a grid:
    /// `gamma ell(q/gamma) <= F(q) <= q log(q / M1(q)) + Mbar(eps)` with the
    /// constants built by growth detection, plus midpoint convexity.
    /// Requires the model to carry `tail_exponent_p`.
    pub fn check_f_bounds(
        &self,
        edge: usize,
        epsilon: f64,
        q_grid: &[f64],
    ) -> Result<FBoundsReport> {
        let p = self.tail_exponent_p.ok_or_else(|| {
            Error::Unsupported("check_f_bounds needs tail_exponent_p on the model".into())
        })?;
        if !(epsilon > 0.0) {
            return Err(Error::Argument("epsilon must be positive".into()));
        }
        if q_grid.iter().any(|&q| q < epsilon) {
            return Err(Error::Argument("q grid must lie in [epsilon, inf)".into()));
        }
        let g = self.gamma[edge];

        let m_cap = self
            .detect_growth_cap(edge, p, q_grid)
            .ok_or_else(|| Error::Unsupported(
                "growth detection found no cap M: the cost does not satisfy the small-u growth condition".into(),
            ))?;
        let m1 = |q: f64| (g * (g / q).powf(1.0 / p)).min(m_cap);
        let m2_eps = self.decrease_threshold(edge, epsilon).max(m1(epsilon));
        let mbar = m2_eps;

        let mut rows = Vec::with_capacity(q_grid.len());
        let mut pass = true;
        for &q in q_grid {
            let f = self.transformed_cost(edge, q)?;
            let lower = g * ell_raw(q / g);
            let upper = q * (q / m1(q)).ln() + mbar;
            let lower_ok = f >= lower - 1e-9 * (1.0 + lower.abs());
            let upper_ok = f <= upper + 1e-9 * (1.0 + upper.abs());
            pass &= lower_ok && upper_ok;
            rows.push(FBoundRow {
                q,
                f,
                lower,
                upper,
                lower_ok,
                upper_ok,
            });
        }

        // midpoint convexity on pairs drawn from the grid
        let mut convex_ok = true;
        let step = (q_grid.len() / 10).max(1);
        for (a, &qa) in q_grid.iter().enumerate().step_by(step) {
            for &qb in q_grid.iter().skip(a + 1).step_by(step) {
                let fa = self.transformed_cost(edge, qa)?;
                let fb = self.transformed_cost(edge, qb)?;
                let fm = self.transformed_cost(edge, 0.5 * (qa + qb))?;
                if fm > 0.5 * (fa + fb) + 1e-8 * (1.0 + fa.abs() + fb.abs()) {
                    convex_ok = false;
                }
            }
        }

        Ok(FBoundsReport {
            edge: self.edges.edge(edge),
            m_cap,
            m_bar: mbar,
            pass: pass && convex_ok,
            midpoint_convex: convex_ok,
            rows,
        })
    }

    /// Largest cap `M` from a descending geometric scan such that
    /// `G(., q)` is non-decreasing in `u` on `(0, min{gamma (gamma/q)^{1/p}, M}]`
    /// for every probe `q`, i.e. `1 - q/u - C'(u/gamma) >= 0` there.
    fn detect_growth_cap(&self, edge: usize, p: f64, q_grid: &[f64]) -> Option<f64> {
        let g = self.gamma[edge];
        let family = &self.families[edge];
        let probes: Vec<f64> = {
            let mut qs = vec![q_grid[0], q_grid[q_grid.len() - 1]];
            qs.extend(q_grid.iter().step_by((q_grid.len() / 16).max(1)));
            qs
        };
        'candidates: for k in (-40..=12).rev() {
            let cap = g * 2f64.powi(k);
            for &q in &probes {
                let ceil = (g * (g / q).powf(1.0 / p)).min(cap);
                for u in scalar::geometric_grid(ceil * 1e-8, ceil, 48) {
                    let slope = 1.0 - q / u - family.derivative(u / g);
                    if slope < -1e-9 {
                        continue 'candidates;
                    }
                }
            }
            return Some(cap);
        }
        None
    }

    /// Threshold above which `G(., q)` is decreasing: the point where the
    /// increasing map `v C'(v) - v` crosses `-q/gamma` (scaled back to `u`).
    fn decrease_threshold(&self, edge: usize, q: f64) -> f64 {
        let g = self.gamma[edge];
        let family = &self.families[edge];
        let h = |v: f64| v * family.derivative(v) - v;
        let target = -q / g;
        let mut hi = 1.0;
        while h(hi) < target && hi < 1e12 {
            hi *= 2.0;
        }
        let mut lo = hi / 2.0;
        while h(lo) > target && lo > 1e-12 {
            lo /= 2.0;
        }
        g * scalar::bisect(|v| h(v) - target, lo, hi, 1e-12)
    }
}

/// Outcome of a supremum search along the positive ray.
enum RaySup {
    Interior(f64, f64),
    Boundary(f64, f64),
    Unbounded,
}

/// Maximizes `f` over `[lo, hi]` by geometric scan plus golden refinement.
/// When the scan peaks at an open end of the ray, the bracket is extended
/// geometrically; if the objective keeps rising past the divergence
/// ceiling the supremum is reported unbounded, and if the hard search
/// limits are hit while still rising it is reported as a boundary value.
fn maximize_on_ray(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    lo_closed: bool,
    hi_closed: bool,
) -> Result<RaySup> {
    let grid = scalar::geometric_grid(lo, hi, 181);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &u) in grid.iter().enumerate() {
        let v = f(u);
        if v > best.1 {
            best = (i, v);
        }
    }
    if !best.1.is_finite() && best.1 == f64::NEG_INFINITY {
        return Err(Error::Domain(
            "objective is -inf on the whole search interval".into(),
        ));
    }

    let extend = |mut u: f64, factor: f64, limit: f64, mut value: f64| -> RaySup {
        loop {
            let next = u * factor;
            let out_of_range = if factor < 1.0 { next < limit } else { next > limit };
            if out_of_range {
                // still rising at the search wall: the supremum is not
                // attained on the open ray (slow divergences, e.g.
                // logarithmic, never cross the ceiling)
                return RaySup::Unbounded;
            }
            let v = f(next);
            if v > DIVERGENCE_CEILING {
                return RaySup::Unbounded;
            }
            if v <= value {
                // peak bracketed between u/factor^2-ish and next
                let (a, b) = if factor < 1.0 { (next, u / factor) } else { (u / factor, next) };
                let (x, fx) = scalar::golden_max(&f, a, b, 1e-12);
                return RaySup::Interior(x, fx);
            }
            u = next;
            value = v;
        }
    };

    if best.0 == 0 && !lo_closed {
        return Ok(extend(grid[0], 0.1, 1e-290, best.1));
    }
    if best.0 == grid.len() - 1 && !hi_closed {
        return Ok(extend(grid[grid.len() - 1], 10.0, 1e290, best.1));
    }
    if best.0 == 0 || best.0 == grid.len() - 1 {
        // closed endpoint: refine against the adjacent cell, keep endpoint
        let (a, b) = if best.0 == 0 {
            (grid[0], grid[1])
        } else {
            (grid[grid.len() - 2], grid[grid.len() - 1])
        };
        let (x, fx) = scalar::golden_max(&f, a, b, 1e-12);
        let end = grid[best.0];
        return Ok(if fx > best.1 {
            RaySup::Interior(x, fx)
        } else {
            RaySup::Boundary(end, best.1)
        });
    }
    let (x, fx) = scalar::golden_max(&f, grid[best.0 - 1], grid[best.0 + 1], 1e-12);
    Ok(RaySup::Interior(x, fx.max(best.1)))
}

/// Per-edge admissibility findings.
#[derive(Clone, Debug, Serialize)]
pub struct EdgeAdmissibility {
    pub edge: (usize, usize),
    pub convex: bool,
    pub convexity_violation: Option<f64>,
    pub c_one: f64,
    /// `u C'(u) - u` non-decreasing on the grid.
    pub rate_gap_monotone: bool,
    /// False when the map is only weakly increasing (e.g. constant, as for
    /// the logarithmic cost where it is identically -1).
    pub strictly_increasing: bool,
    pub first_violation: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibilityReport {
    pub pass: bool,
    pub edges: Vec<EdgeAdmissibility>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IsaacsReport {
    pub xi: f64,
    pub inf_sup: f64,
    pub sup_inf: f64,
    pub gap: f64,
    pub inner_closed_form_dev: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FBoundRow {
    pub q: f64,
    pub f: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FBoundsReport {
    pub edge: (usize, usize),
    pub m_cap: f64,
    pub m_bar: f64,
    pub pass: bool,
    pub midpoint_convex: bool,
    pub rows: Vec<FBoundRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_model(family: CostFamily) -> CostModel {
        let edges = EdgeSet::new(2, vec![(0, 1), (1, 0)]).unwrap();
        CostModel::uniform(edges, 1.0, family, RewardSpec::Constant { value: 1.0 }).unwrap()
    }

    #[test]
    fn ell_anchor_values() {
        assert_eq!(ell(1.0).unwrap(), 0.0);
        assert_eq!(ell(0.0).unwrap(), 1.0);
        assert!((ell(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!(ell(-0.1).is_err());
    }

    #[test]
    fn ell_nonnegative_and_zero_only_at_one() {
        for q in scalar::geometric_grid(1e-6, 1e4, 400) {
            let v = ell_raw(q);
            assert!(v >= 0.0, "ell({q}) = {v}");
            if (q - 1.0).abs() > 1e-3 {
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn power_family_c_one_is_exactly_zero() {
        for (p, q) in [(1.0, 1.0), (2.0, 2.0), (1.5, 3.0)] {
            let fam = CostFamily::Power { p, q };
            assert_eq!(fam.value(1.0), 0.0);
            fam.validate().unwrap();
        }
        assert_eq!(CostFamily::Log.value(1.0), 0.0);
    }

    #[test]
    fn edge_set_requires_strong_connectivity() {
        assert!(EdgeSet::new(2, vec![(0, 1)]).is_err());
        assert!(EdgeSet::new(3, vec![(0, 1), (1, 2), (2, 0)]).is_ok());
        assert!(EdgeSet::new(2, vec![(0, 1), (1, 0), (0, 1)]).is_err());
    }

    #[test]
    fn log_cost_dual_closed_form() {
        // C*(z) = -log(1-z) with maximizer 1/(1-z), from z + 1/u - 1 = 0
        let model = two_state_model(CostFamily::Log);
        let s = model.legendre_dual(0, 0.5).unwrap();
        assert!((s.value - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((s.maximizer - 2.0).abs() < 1e-7);
        assert_eq!(s.attained, DualAttainment::Interior);
    }

    #[test]
    fn dual_at_zero_is_zero_with_unit_maximizer() {
        for fam in [CostFamily::Power { p: 1.0, q: 1.0 }, CostFamily::Log] {
            let model = two_state_model(fam);
            let s = model.legendre_dual(0, 0.0).unwrap();
            assert!(s.value.abs() < 1e-12, "value {}", s.value);
            assert!((s.maximizer - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dual_rejects_z_at_or_above_one() {
        let model = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        assert!(matches!(model.legendre_dual(0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(model.legendre_dual(0, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn dual_matches_grid_search_power11() {
        let model = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        let z = 0.9;
        // brute-force oracle: geometric grid over (0, 1e3] with local refinement
        let c = |u: f64| 1.0 / u + u - 2.0;
        let grid = scalar::geometric_grid(1e-6, 1e3, 20_000);
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &u) in grid.iter().enumerate() {
            let v = z * u - c(u);
            if v > best.1 {
                best = (i, v);
            }
        }
        let (_, oracle) = scalar::golden_max(
            |u| z * u - c(u),
            grid[best.0 - 1],
            grid[best.0 + 1],
            1e-13,
        );
        let s = model.legendre_dual(0, z).unwrap();
        assert!((s.value - oracle).abs() < 1e-8, "{} vs {}", s.value, oracle);
        // closed form for this family: 2 - 2 sqrt(1 - z)
        assert!((s.value - (2.0 - 2.0 * (1.0 - z).sqrt())).abs() < 1e-9);
    }

    #[test]
    fn dual_maximizer_monotone_in_z() {
        let model = two_state_model(CostFamily::Power { p: 2.0, q: 2.0 });
        let mut last = 0.0;
        for i in 0..40 {
            let z = -5.0 + i as f64 * 0.14; // up to 0.46
            let s = model.legendre_dual(0, z).unwrap();
            assert!(s.maximizer >= last - 1e-9, "not monotone at z={z}");
            assert!(s.value >= z - 1e-12); // value >= z*1 - C(1)
            last = s.maximizer;
        }
    }

    #[test]
    fn g_anchor_values() {
        let model = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        // u = gamma, q = gamma -> 0 because ell(1) = 0 and C(1) = 0
        assert_eq!(model.g_value(0, 1.0, 1.0).unwrap(), 0.0);
        // independent scalar evaluation: 2 ell(1/2) - C(2)
        let expected = 2.0 * (0.5 * 0.5f64.ln() - 0.5 + 1.0) - 0.5;
        assert!((model.g_value(0, 2.0, 1.0).unwrap() - expected).abs() < 1e-14);
        assert!(model.g_value(0, 0.0, 1.0).is_err());
        assert!(model.g_value(0, -1.0, 1.0).is_err());
    }

    #[test]
    fn g_log_cost_matches_special_form() {
        // for the log cost at gamma = 1: G(u,q) = q log q + (gamma - q) log u - q + gamma
        let model = two_state_model(CostFamily::Log);
        assert!(model.g_value(0, 1.0, 1.0).unwrap().abs() < 1e-15);
        for (u, q) in [(0.5, 2.0), (3.0, 0.7), (2.0, 2.0)] {
            let expected = q * f64::ln(q) + (1.0 - q) * f64::ln(u) - q + 1.0;
            assert!((model.g_value(0, u, q).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn f_zero_at_gamma_and_oracle_values() {
        let model = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        assert!(model.transformed_cost(0, 1.0).unwrap().abs() <= 1e-8);
        // brute-force oracle over a u grid with refinement
        for q in [0.5, 2.0] {
            let g_fun = |u: f64| u * ell_raw(q / u) - (1.0 / u + u - 2.0);
            let grid = scalar::geometric_grid(1e-8, 1e8, 40_000);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, &u) in grid.iter().enumerate() {
                let v = g_fun(u);
                if v > best.1 {
                    best = (i, v);
                }
            }
            let (_, oracle) =
                scalar::golden_max(g_fun, grid[best.0 - 1], grid[best.0 + 1], 1e-13);
            let f = model.transformed_cost(0, q).unwrap();
            assert!((f - oracle).abs() < 1e-6, "F({q}) = {f} vs oracle {oracle}");
            assert!(f >= ell_raw(q) - 1e-12);
        }
    }

    #[test]
    fn f_log_cost_is_infinite_off_gamma() {
        let model = two_state_model(CostFamily::Log);
        assert!(model.transformed_cost(0, 2.0).unwrap().is_infinite());
        assert!(model.transformed_cost(0, 0.5).unwrap().is_infinite());
        // and exactly zero at the nominal rate (G(u, gamma) == 0 for all u)
        assert!(model.transformed_cost(0, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_zero_gradient_and_single_edge_value() {
        let model = two_state_model(CostFamily::Log);
        let h = model.hamiltonian(&[0.3, 0.7], &[0.0, 0.0]).unwrap();
        assert!(h.abs() < 1e-10);
        // m = (1,0) silences the reverse edge; C*(1 - 1/2) = log 2
        let h = model
            .hamiltonian(&[1.0, 0.0], &[std::f64::consts::LN_2, -4.0])
            .unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-8);
    }

    #[test]
    fn optimal_pair_anchors() {
        let model = two_state_model(CostFamily::Log);
        let p = model.optimal_pair(0, 0.0).unwrap();
        assert!((p.u - 1.0).abs() < 1e-7 && (p.q - 1.0).abs() < 1e-7);
        let p = model.optimal_pair(0, std::f64::consts::LN_2).unwrap();
        assert!((p.u - 2.0).abs() < 1e-6, "u* = {}", p.u);
        assert!((p.q - 1.0).abs() < 1e-6, "q* = {}", p.q);
    }

    #[test]
    fn optimal_pair_attains_both_optima_power11() {
        let model = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        for xi in [-1.0, -0.2, 0.4, 1.3] {
            let pair = model.optimal_pair(0, xi).unwrap();
            // q* minimizes q xi + F(q) against a refinement grid
            let phi = |q: f64| q * xi + model.transformed_cost(0, q).unwrap();
            let at_star = phi(pair.q);
            let mut best = f64::INFINITY;
            for q in scalar::geometric_grid(pair.q * 1e-2, pair.q * 1e2, 4000) {
                best = best.min(phi(q));
            }
            assert!(at_star <= best + 1e-5, "xi={xi}: {at_star} vs grid {best}");

            // u* maximizes the inner form u(1 - e^{-xi}) - gamma C(u/gamma)
            let z = 1.0 - (-xi as f64).exp();
            let inner = |u: f64| u * z - model.scaled_cost(0, u);
            let mut sup = f64::NEG_INFINITY;
            for u in scalar::geometric_grid(pair.u * 1e-2, pair.u * 1e2, 4000) {
                sup = sup.max(inner(u));
            }
            assert!(
                inner(pair.u) >= sup - 1e-6,
                "xi={xi}: inner({}) = {} vs grid sup {sup}",
                pair.u,
                inner(pair.u)
            );
        }
    }

    #[test]
    fn admissibility_verdicts() {
        let grid = scalar::geometric_grid(1e-2, 1e2, 200);
        let power = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        let report = power.check_admissibility(&grid).unwrap();
        assert!(report.pass);
        assert!(report.edges[0].strictly_increasing);

        let log = two_state_model(CostFamily::Log);
        let report = log.check_admissibility(&grid).unwrap();
        assert!(report.pass);
        assert!(!report.edges[0].strictly_increasing, "u C'(u) - u is constant");

        // C(u) = (u-1)^2 fails: u C'(u) - u = 2u^2 - 3u decreases on (0, 3/4)
        let mut us = scalar::geometric_grid(1e-3, 10.0, 2000);
        us.push(1.0); // exact sample at u = 1 so that C(1) = 0 holds
        us.sort_by(f64::total_cmp);
        us.dedup();
        let samples: Vec<(f64, f64)> = us
            .into_iter()
            .map(|u| (u, (u - 1.0) * (u - 1.0)))
            .collect();
        let quad = two_state_model(CostFamily::Tabulated { samples });
        let fine: Vec<f64> = scalar::geometric_grid(1e-2, 5.0, 300);
        let report = quad.check_admissibility(&fine).unwrap();
        assert!(!report.pass);
        let viol = report.edges[0].first_violation.expect("violation point");
        assert!(viol < 0.75, "violation at {viol} should precede 3/4");
        assert!(report.edges[0].convex, "the square is still convex");

        assert!(power.check_admissibility(&grid[..2]).is_err());
    }

    #[test]
    fn isaacs_gap_small_for_power_family() {
        let model = two_state_model(CostFamily::Power { p: 1.0, q: 1.0 });
        let u_grid = scalar::geometric_grid(1e-2, 1e2, 200);
        let q_grid = scalar::geometric_grid(1e-2, 1e2, 200);
        let report = model.check_isaacs(0, 0.3, &u_grid, &q_grid).unwrap();
        assert!(report.gap.abs() <= 1e-3, "gap {}", report.gap);
        assert!(report.inner_closed_form_dev <= 1e-6);
    }

    #[test]
    fn f_bounds_power22() {
        let mut model = two_state_model(CostFamily::Power { p: 2.0, q: 2.0 });
        model.tail_exponent_p = Some(2.0);
        let q_grid = scalar::geometric_grid(0.1, 50.0, 200);
        let report = model.check_f_bounds(0, 0.1, &q_grid).unwrap();
        assert!(report.pass, "rows: {:?}", report.rows.iter().filter(|r| !r.lower_ok || !r.upper_ok).take(3).collect::<Vec<_>>());
        assert!(report.midpoint_convex);

        let plain = two_state_model(CostFamily::Power { p: 2.0, q: 2.0 });
        assert!(matches!(
            plain.check_f_bounds(0, 0.1, &q_grid),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn reward_specs_validate_and_evaluate() {
        RewardSpec::Constant { value: 1.0 }.validate(2).unwrap();
        assert!(RewardSpec::Constant { value: -1.0 }.validate(2).is_err());
        let affine = RewardSpec::Affine {
            weights: vec![1.0, 2.0],
            offset: 0.5,
        };
        affine.validate(2).unwrap();
        assert!((affine.eval(&[0.5, 0.5]) - 2.0).abs() < 1e-15);
        assert!(RewardSpec::Affine {
            weights: vec![-1.0, 0.0],
            offset: 0.5
        }
        .validate(2)
        .is_err());
        let radial = RewardSpec::Radial {
            center: vec![1.0, 0.0],
            scale: 2.0,
        };
        radial.validate(2).unwrap();
        assert!((radial.max_on_simplex(2) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }
}
