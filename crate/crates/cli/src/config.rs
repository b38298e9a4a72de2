use std::path::{Path, PathBuf};

use graph_whs::control::{BellmanOptions, ControlClass, ControlSignal, CostFamily, CostSpec};
use graph_whs::dynamics::SdeConfig;
use graph_whs::energy::{EnergySpec, EnergyVariant, DEFAULT_FISHER_COEFF};
use graph_whs::graph::{DensityState, Graph, GraphDoc, MomentumState};
use graph_whs::hjb::SimplexGrid;
use graph_whs::weight::{ProbabilityWeight, WeightKind};
use graph_whs::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphDoc,
    pub energy: EnergySection,
    pub cost: CostSection,
    pub control: ControlSection,
    pub initial: InitialSection,
    pub solver: SolverSection,
    #[serde(default)]
    pub check: CheckSection,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    pub variant: EnergyVariant,
    pub weight: WeightKind,
    /// Row-major `n × n`; omitted means no interaction.
    #[serde(default)]
    pub interaction: Option<Vec<f64>>,
    pub sigma: Vec<f64>,
    #[serde(default = "default_fisher")]
    pub fisher_coeff: f64,
}

fn default_fisher() -> f64 {
    DEFAULT_FISHER_COEFF
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub family: CostFamily,
    pub control_coeff: f64,
    #[serde(default)]
    pub target_rho: Option<Vec<f64>>,
    #[serde(default)]
    pub target_x: Option<Vec<f64>>,
    #[serde(default)]
    pub kappa_rho: f64,
    #[serde(default)]
    pub kappa_x: f64,
    #[serde(default = "one")]
    pub bound: f64,
    #[serde(default)]
    pub running_weight: f64,
    #[serde(default)]
    pub terminal_weight: f64,
    #[serde(default)]
    pub terminal_offset: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub ell: f64,
    pub class: ControlClass,
    /// Piece values for `simulate`, `transform` and `cost`; zero when omitted.
    #[serde(default)]
    pub values: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub rho: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub refine: u32,
    #[serde(default = "default_floor")]
    pub boundary_floor: f64,
    /// Paths written by `simulate`.
    #[serde(default = "default_simulate_paths")]
    pub simulate_paths: usize,
    pub n_paths: usize,
    pub budget: usize,
    pub t_bar: f64,
    #[serde(default)]
    pub bellman: BellmanOptions,
    pub grid: GridSection,
    pub wasserstein: WassersteinSection,
    pub convolution: ConvolutionSection,
}

fn default_floor() -> f64 {
    1e-6
}

fn default_simulate_paths() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub margin: f64,
    pub rho_points: usize,
    pub x_max: f64,
    pub x_points: usize,
    pub time_steps: usize,
    #[serde(default = "default_stride")]
    pub layer_stride: usize,
    #[serde(default = "default_samples")]
    pub residual_samples: usize,
}

fn default_stride() -> usize {
    8
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WassersteinSection {
    pub target: Vec<f64>,
    pub steps: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvolutionSection {
    pub thetas: Vec<f64>,
    /// Grid points per axis of the value function that is convolved.
    pub points: usize,
    /// Time layers kept from that solution.
    pub time_layers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub criteria: Vec<u32>,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            criteria: (1..=13).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks; building every derived object validates the rest.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n;
        if !(self.control.ell > 0.0 && self.control.ell.is_finite()) {
            return Err(Error::Config(format!("ell must be positive, got {}", self.control.ell)));
        }
        if self.initial.rho.len() != n || self.initial.x.len() != n || self.solver.wasserstein.target.len() != n {
            return Err(Error::Config(format!("state vectors must have length {n}")));
        }
        if self.solver.convolution.thetas.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config("convolution thetas must lie in (0, 1)".into()));
        }
        if self.solver.convolution.time_layers < 2 {
            return Err(Error::Config("convolution needs at least two time layers".into()));
        }
        if let Some(&bad) = self.check.criteria.iter().find(|&&c| !(1..=13).contains(&c)) {
            return Err(Error::Config(format!("no acceptance criterion {bad}")));
        }
        self.energy_spec()?;
        self.cost_spec()?;
        self.sde_config()?;
        self.initial_state()?;
        self.control_signal()?;
        if n == 2 {
            self.grid()?;
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<Graph> {
        Graph::from_doc(&self.graph)
    }

    pub fn energy_spec(&self) -> Result<EnergySpec> {
        let mut spec = EnergySpec::new(self.graph()?, ProbabilityWeight::new(self.energy.weight), self.energy.variant)
            .with_fisher_coeff(self.energy.fisher_coeff)?
            .with_sigma(self.energy.sigma.clone())?;
        if let Some(w) = &self.energy.interaction {
            spec = spec.with_interaction(w.clone())?;
        }
        Ok(spec)
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let c = &self.cost;
        let g = self.graph()?;
        let n = g.n();
        let mut spec = CostSpec::new(c.family, &g, c.control_coeff)?
            .with_weights(c.running_weight, c.terminal_weight)?
            .with_terminal_offset(c.terminal_offset)?
            .with_bound(c.bound)?;
        if c.target_rho.is_some() || c.target_x.is_some() || c.kappa_rho > 0.0 || c.kappa_x > 0.0 {
            spec = spec.with_tracking(
                c.target_rho.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]),
                c.target_x.clone().unwrap_or_else(|| vec![0.0; n]),
                c.kappa_rho,
                c.kappa_x,
            )?;
        }
        Ok(spec)
    }

    pub fn sde_config(&self) -> Result<SdeConfig> {
        let s = &self.solver;
        SdeConfig::new(self.energy_spec()?, s.t0, s.t_end, s.dt)?
            .with_refine(s.refine)?
            .with_floor(s.boundary_floor)
    }

    /// The SDE configuration driven by the configured open-loop control.
    pub fn controlled_sde(&self) -> Result<SdeConfig> {
        self.sde_config()?.with_control(self.control_signal()?)
    }

    pub fn control_signal(&self) -> Result<ControlSignal> {
        let s = &self.solver;
        match &self.control.values {
            Some(v) => ControlSignal::uniform(v.clone(), s.t0, s.t_end, self.control.ell),
            None => Ok(ControlSignal::zero(self.graph.n, s.t0, s.t_end)),
        }
    }

    pub fn initial_state(&self) -> Result<(DensityState, MomentumState)> {
        Ok((
            DensityState::with_floor(self.initial.rho.clone(), self.solver.boundary_floor)?,
            MomentumState::new(self.initial.x.clone())?,
        ))
    }

    pub fn grid(&self) -> Result<SimplexGrid> {
        let g = &self.solver.grid;
        SimplexGrid::new(g.margin, g.rho_points, g.x_max, g.x_points, self.solver.t_end - self.solver.t0, g.time_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled() -> ExperimentConfig {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.json");
        ExperimentConfig::load(&path).unwrap()
    }

    #[test]
    fn bundled_config_is_valid() {
        let cfg = bundled();
        assert_eq!(cfg.graph.n, 2);
        assert_eq!(cfg.check.criteria.len(), 13);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut cfg = bundled();
        cfg.initial.x.push(0.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_nonpositive_radius() {
        let mut cfg = bundled();
        cfg.control.ell = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_errors() {
        let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["energy"]["temperature"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }
}
