//! Experiment configuration: a single JSON document with explicit
//! parameters and closed vocabularies (no expression language), validated
//! at load time. The same structure is echoed verbatim into every output
//! file, so a run is reproducible from any of its artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{CostFamily, CostModel, RewardSpec};
use crate::error::{Error, Result};
use crate::lattice::TargetSpec;
use crate::limit::OptimizeOpts;
use crate::solver::{SolveOpts, WOpts};

/// Cost family assignment: one family shared by every edge, or an explicit
/// per-edge list.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CostConfig {
    Shared(CostFamily),
    PerEdge(Vec<EdgeCostEntry>),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EdgeCostEntry {
    pub from: usize,
    pub to: usize,
    #[serde(flatten)]
    pub family: CostFamily,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    pub w_tol: f64,
    pub log_w_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 100_000,
            q_min: None,
            q_max: None,
            w_tol: 1e-10,
            log_w_floor: -1e6,
        }
    }
}

impl SolverConfig {
    pub fn solve_opts(&self) -> SolveOpts {
        SolveOpts {
            q_min: self.q_min,
            q_max: self.q_max,
            tol: self.tol,
            max_sweeps: self.max_sweeps,
        }
    }

    pub fn w_opts(&self) -> WOpts {
        WOpts {
            tol: self.w_tol,
            max_sweeps: self.max_sweeps,
            log_w_floor: self.log_w_floor,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub trials: usize,
    pub seed: u64,
    /// Start point as simplex fractions; must be exactly representable on
    /// the lattice for the configured `n`.
    pub m0: Vec<f64>,
    /// Horizon multiple of the pilot-run mean exit time.
    #[serde(default = "default_t_max_multiplier")]
    pub t_max_multiplier: f64,
    /// Number of leading trials to dump as path CSVs (0 = none).
    #[serde(default)]
    pub dump_paths: usize,
}

fn default_t_max_multiplier() -> f64 {
    50.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LimitConfig {
    pub m0: Vec<f64>,
    pub horizon: f64,
    pub segments: usize,
    pub restarts: usize,
    pub h_factor: f64,
    pub penalty_factor: f64,
    pub interior_margin: f64,
    pub seed: u64,
    pub max_passes: usize,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self {
            m0: Vec::new(),
            horizon: 4.0,
            segments: 8,
            restarts: 4,
            h_factor: 1e-3,
            penalty_factor: 1e3,
            interior_margin: 0.01,
            seed: 0,
            max_passes: 60,
        }
    }
}

impl LimitConfig {
    pub fn optimize_opts(&self, r_max: f64) -> OptimizeOpts {
        OptimizeOpts {
            horizon: self.horizon,
            segments: self.segments,
            h: Some(self.h_factor * self.horizon),
            restarts: self.restarts,
            penalty: Some(self.penalty_factor * r_max * self.horizon),
            interior_margin: self.interior_margin,
            seed: self.seed,
            max_passes: self.max_passes,
            warm_start: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LlnConfig {
    pub horizon: f64,
    pub trials: usize,
    pub m0: Vec<f64>,
    pub seed: u64,
}

impl Default for LlnConfig {
    fn default() -> Self {
        Self {
            horizon: 2.0,
            trials: 1000,
            m0: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IsaacsConfig {
    pub xi_values: Vec<f64>,
    pub grid_points: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub gap_tol: f64,
}

impl Default for IsaacsConfig {
    fn default() -> Self {
        Self {
            xi_values: vec![-2.0, -1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0, 2.0],
            grid_points: 200,
            grid_lo: 1e-2,
            grid_hi: 1e2,
            gap_tol: 1e-3,
        }
    }
}

/// Top-level experiment description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub n_list: Option<Vec<usize>>,
    /// `d x d` nominal rate matrix with zero diagonal; the edge set is its
    /// positive support.
    pub gamma: Vec<Vec<f64>>,
    pub cost: CostConfig,
    #[serde(default)]
    pub tail_exponent_p: Option<f64>,
    pub reward: RewardSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: Option<SimConfig>,
    #[serde(default)]
    pub limit: Option<LimitConfig>,
    #[serde(default)]
    pub lln: Option<LlnConfig>,
    #[serde(default)]
    pub isaacs: Option<IsaacsConfig>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config("d must be at least 2".into()));
        }
        if self.gamma.len() != self.d {
            return Err(Error::Config(format!(
                "gamma must be a {0} x {0} matrix",
                self.d
            )));
        }
        if let Some(n) = self.n {
            if n < 1 {
                return Err(Error::Config("n must be >= 1".into()));
            }
        }
        if let Some(list) = &self.n_list {
            if list.is_empty() || list.iter().any(|&n| n < 1) {
                return Err(Error::Config("n_list must hold positive entries".into()));
            }
        }
        if !(self.solver.tol > 0.0) || !(self.solver.w_tol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if let Some(sim) = &self.simulation {
            if sim.trials == 0 {
                return Err(Error::Config("simulation.trials must be positive".into()));
            }
            if sim.m0.len() != self.d {
                return Err(Error::Config("simulation.m0 dimension mismatch".into()));
            }
        }
        // building the model exercises the remaining invariants (positive
        // rates, strong connectivity, admissible families, reward sign)
        self.build_model()?;
        Ok(())
    }

    /// The agent count for single-`n` commands.
    pub fn require_n(&self) -> Result<usize> {
        self.n
            .ok_or_else(|| Error::Config("this command needs the `n` field".into()))
    }

    pub fn require_n_list(&self) -> Result<&[usize]> {
        self.n_list
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs the `n_list` field".into()))
    }

    pub fn build_model(&self) -> Result<CostModel> {
        let families = |x: usize, y: usize| -> Result<CostFamily> {
            match &self.cost {
                CostConfig::Shared(f) => Ok(f.clone()),
                CostConfig::PerEdge(list) => list
                    .iter()
                    .find(|e| e.from == x && e.to == y)
                    .map(|e| e.family.clone())
                    .ok_or_else(|| {
                        Error::Config(format!("no cost family declared for edge ({x},{y})"))
                    }),
            }
        };
        // probe all positive entries first so per-edge lookups can fail
        // with a config error instead of a panic inside the constructor
        for (x, row) in self.gamma.iter().enumerate() {
            for (y, &g) in row.iter().enumerate() {
                if x != y && g > 0.0 {
                    families(x, y)?;
                }
            }
        }
        let mut model = CostModel::from_gamma_matrix(
            &self.gamma,
            |x, y| families(x, y).expect("probed above"),
            self.reward.clone(),
        )?;
        model.tail_exponent_p = self.tail_exponent_p;
        Ok(model)
    }

    /// Lattice counts for a fraction vector at a given `n`; errors when the
    /// fractions are not exactly representable.
    pub fn counts_for(&self, fractions: &[f64], n: usize) -> Result<Vec<u32>> {
        if fractions.len() != self.d {
            return Err(Error::Config("start point dimension mismatch".into()));
        }
        let counts: Vec<u32> = fractions
            .iter()
            .map(|&f| {
                let k = (f * n as f64).round();
                if (k - f * n as f64).abs() > 1e-9 || k < 0.0 {
                    return Err(Error::Config(format!(
                        "fraction {f} is not a multiple of 1/{n}"
                    )));
                }
                Ok(k as u32)
            })
            .collect::<Result<_>>()?;
        if counts.iter().map(|&k| k as usize).sum::<usize>() != n {
            return Err(Error::Config("start fractions do not sum to 1".into()));
        }
        Ok(counts)
    }

    /// Canonical JSON echo of the resolved configuration.
    pub fn resolved_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}
