//! Run configuration: model choice, planner options and experiment settings.

use std::f64::consts::PI;
use std::path::PathBuf;

use rddp_core::backward::{PassOptions, QMethod, StrategyChoice};
use rddp_core::driver::PlanOptions;
use rddp_core::models::{ChannelMode, PendulumParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[default]
    CartPendulum,
    Scalar,
    DoubleIntegrator,
    RandomStable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: ModelName,
    /// Cart-pendulum parameter overrides.
    pub params: PendulumParams,
    /// Channel construction the planner sees.
    pub planning_mode: ChannelMode,
    /// Channel construction used to simulate the "true" system.
    pub truth_mode: ChannelMode,
    /// `random_stable` only.
    pub seed: u64,
    /// `random_stable` only: add the box channel.
    pub uncertain: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: ModelName::CartPendulum,
            params: PendulumParams::default(),
            planning_mode: ChannelMode::Held,
            truth_mode: ChannelMode::PerStage,
            seed: 1,
            uncertain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub strategy: StrategyChoice,
    pub qmethod: QMethod,
    /// `None`: `1e-6 (1 + |x|)`.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub rho: f64,
    /// Regularization floor. `None` picks the model default (0.01 for the
    /// pendulum, off for the linear fixtures).
    pub mu_min: Option<f64>,
    /// Feedforward step halvings for nonlinear plants; `null` disables the search.
    pub line_search: Option<u32>,
    /// `false` plans with the uncertainty channels removed (the nominal baseline).
    pub robust: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            strategy: StrategyChoice::Auto,
            qmethod: QMethod::Linearized,
            epsilon: None,
            max_iters: 50,
            rho: 1e-2,
            mu_min: None,
            line_search: Some(10),
            robust: true,
        }
    }
}

/// Uncertainty realization for `simulate`, in normalized parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SampleSpec {
    #[default]
    Nominal,
    /// The same parameters at every step.
    Constant { delta: Vec<f64> },
    /// Independent uniform draws per step.
    Random { seed: u64 },
}

pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub samples: usize,
    pub seed: u64,
    pub theta0: Range,
    pub omega0: Range,
    pub s0: Range,
    pub v0: Range,
    /// A shot fails when the final state norm exceeds this.
    pub failure_threshold: f64,
    /// Replan from every sampled start state; otherwise one plan per method from `x0`.
    pub replan: bool,
    /// Start state for `plan` (and for Monte Carlo without replanning).
    pub x0: Option<Vec<f64>>,
    pub sample: SampleSpec,
    /// Worker threads for Monte Carlo; `None` uses the available parallelism.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            samples: 50,
            seed: 1,
            theta0: [PI - 1.0, PI + 1.0],
            omega0: [-0.5, 0.5],
            s0: [-1.0, 1.0],
            v0: [-1.0, 1.0],
            failure_threshold: 0.1,
            replan: true,
            x0: None,
            sample: SampleSpec::Nominal,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn ranges(&self) -> [Range; 4] {
        [self.theta0, self.omega0, self.s0, self.v0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub planner: PlannerConfig,
    pub experiment: ExperimentConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            planner: PlannerConfig::default(),
            experiment: ExperimentConfig::default(),
            output: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.experiment;
        if e.samples == 0 {
            return Err(CliError::Config("experiment.samples must be at least 1".into()));
        }
        for (name, [lo, hi]) in ["theta0", "omega0", "s0", "v0"].iter().zip(e.ranges()) {
            if !(lo <= hi) {
                return Err(CliError::Config(format!("experiment.{name}: lower end {lo} exceeds upper end {hi}")));
            }
        }
        if !(e.failure_threshold > 0.0) {
            return Err(CliError::Config("experiment.failure_threshold must be positive".into()));
        }
        if e.threads == Some(0) {
            return Err(CliError::Config("experiment.threads must be at least 1".into()));
        }
        let p = &self.planner;
        if p.max_iters == 0 {
            return Err(CliError::Config("planner.max_iters must be at least 1".into()));
        }
        if !(p.rho > 0.0) {
            return Err(CliError::Config("planner.rho must be positive".into()));
        }
        if matches!(p.mu_min, Some(m) if !(m > 0.0)) {
            return Err(CliError::Config("planner.mu_min must be positive".into()));
        }
        self.model.params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn plan_options(&self) -> PlanOptions {
        let p = &self.planner;
        let mu_min = p.mu_min.or(match self.model.name {
            ModelName::CartPendulum => Some(0.01),
            _ => None,
        });
        PlanOptions {
            epsilon: p.epsilon,
            max_iters: p.max_iters,
            pass: PassOptions { strategy: p.strategy, qmethod: p.qmethod, rho: p.rho, mu_min, ..Default::default() },
            line_search: p.line_search,
            ..Default::default()
        }
    }
}
