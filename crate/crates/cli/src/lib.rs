//! Plan, simulate and Monte Carlo commands behind the `rddp` binary.
//!
//! Every command reads a [`RunConfig`] and writes its artifacts to the
//! configured output directory:
//!
//! - `plan`: `plan.json` (the driver's versioned schema) and `trajectory.csv`
//! - `simulate`: `simulated_trajectory.csv` and `simulation.json`
//! - `montecarlo`: `shots.csv` and `summary.json`
//!
//! Trajectory CSVs have one row per time index `t = 0..T`; the input column of
//! the final row is empty. Floats are written in shortest round-trip form, so
//! reruns with the same seed are byte-identical.

pub mod config;
pub mod montecarlo;

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rddp_core::driver::{plan, simulate_uncertain, CertificateLabel, DriverError, RobustPlan, Trajectory};
use rddp_core::models::{build_pendulum_plant, linear_fixture, LinearKind, LinearPlant, ModelError, PendulumPlant};
use rddp_core::plant::{GeneralizedPlant, UncertaintySample};
use serde::{Deserialize, Serialize};

pub use config::{ModelName, RunConfig, SampleSpec};
pub use montecarlo::{cmd_montecarlo, MonteCarloSummary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(io_err(&path))?;
    Ok(path)
}

/// A built-in model: the plant to plan on and the plant that plays reality.
#[derive(Debug, Clone)]
pub enum Model {
    Pendulum { planning: PendulumPlant, truth: PendulumPlant },
    Linear(LinearPlant),
}

impl Model {
    pub fn build(cfg: &config::ModelConfig) -> Result<Model, CliError> {
        Ok(match cfg.name {
            ModelName::CartPendulum => Model::Pendulum {
                planning: build_pendulum_plant(cfg.params.clone(), cfg.planning_mode)?,
                truth: build_pendulum_plant(cfg.params.clone(), cfg.truth_mode)?,
            },
            ModelName::Scalar => Model::Linear(linear_fixture(LinearKind::Scalar)),
            ModelName::DoubleIntegrator => Model::Linear(linear_fixture(LinearKind::DoubleIntegrator)),
            ModelName::RandomStable => {
                Model::Linear(linear_fixture(LinearKind::RandomStable { seed: cfg.seed, uncertain: cfg.uncertain }))
            }
        })
    }

    /// The planning plant; `robust = false` drops the uncertainty channels.
    pub fn planning(&self, robust: bool) -> Box<dyn GeneralizedPlant> {
        match (self, robust) {
            (Model::Pendulum { planning, .. }, true) => Box::new(planning.clone()),
            (Model::Pendulum { planning, .. }, false) => Box::new(planning.nominal()),
            (Model::Linear(p), true) => Box::new(p.clone()),
            (Model::Linear(p), false) => Box::new(p.without_uncertainty()),
        }
    }

    pub fn truth(&self) -> &dyn GeneralizedPlant {
        match self {
            Model::Pendulum { truth, .. } => truth,
            Model::Linear(p) => p,
        }
    }

    /// Hanging pendulum at rest, or the all-ones state for linear fixtures.
    pub fn default_x0(&self) -> DVector<f64> {
        match self {
            Model::Pendulum { .. } => DVector::from_vec(vec![std::f64::consts::PI, 0.0, 0.0, 0.0]),
            Model::Linear(p) => DVector::from_element(p.a.nrows(), 1.0),
        }
    }

    pub fn column_names(&self) -> (Vec<String>, Vec<String>) {
        match self {
            Model::Pendulum { .. } => (["theta", "omega", "s", "v"].map(String::from).to_vec(), vec!["u".into()]),
            Model::Linear(p) => (
                (1..=p.a.nrows()).map(|i| format!("x{i}")).collect(),
                (1..=p.bu.ncols()).map(|i| format!("u{i}")).collect(),
            ),
        }
    }
}

pub(crate) fn csv_string(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii fields")
}

pub fn trajectory_csv(model: &Model, traj: &Trajectory) -> String {
    let (xs, us) = model.column_names();
    let header: Vec<String> = std::iter::once("t".to_string()).chain(xs).chain(us.iter().cloned()).collect();
    let rows = traj.states.iter().enumerate().map(|(t, x)| {
        let mut row: Vec<String> = vec![t.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        match traj.inputs.get(t) {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(us.iter().map(|_| String::new())),
        }
        row
    });
    csv_string(&header, rows)
}

fn start_state(cfg: &RunConfig, model: &Model) -> Result<DVector<f64>, CliError> {
    match &cfg.experiment.x0 {
        Some(x) if x.len() != model.truth().dims().n => {
            Err(CliError::Config(format!("experiment.x0 has {} entries, the model has {} states", x.len(), model.truth().dims().n)))
        }
        Some(x) => Ok(DVector::from_vec(x.clone())),
        None => Ok(model.default_x0()),
    }
}

/// Plans from the configured start state and writes `plan.json` and `trajectory.csv`.
pub fn cmd_plan(cfg: &RunConfig) -> Result<RobustPlan, CliError> {
    let model = Model::build(&cfg.model)?;
    let x0 = start_state(cfg, &model)?;
    let plant = model.planning(cfg.planner.robust);
    let p = plan(plant.as_ref(), &x0, &cfg.plan_options())?;
    write_file(&cfg.output, "plan.json", &(p.to_json() + "\n"))?;
    write_file(&cfg.output, "trajectory.csv", &trajectory_csv(&model, &p.trajectory))?;
    let last = p.log.last().expect("at least one iteration");
    log::info!(
        "plan: {:?} after {} iterations, cost {:.6}, bound {:.6}",
        p.status,
        p.log.len(),
        last.nominal_cost,
        last.certified_bound
    );
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub x0: Vec<f64>,
    pub sample: SampleSpec,
    pub cost: f64,
    pub terminal_norm: f64,
    /// `V_0(x0)` from the plan; a guarantee only when `label` is `exact`.
    pub certified_bound: f64,
    pub label: CertificateLabel,
}

pub fn sample_for(spec: &SampleSpec, horizon: usize, channels: usize) -> Result<UncertaintySample, CliError> {
    Ok(match spec {
        SampleSpec::Nominal => UncertaintySample::nominal(horizon, channels),
        SampleSpec::Constant { delta } => {
            if delta.len() != channels {
                return Err(CliError::Config(format!("sample has {} parameters, the model has {channels} channels", delta.len())));
            }
            if delta.iter().any(|d| !(d.abs() <= 1.0)) {
                return Err(CliError::Config("sample parameters must lie in [-1, 1]".into()));
            }
            UncertaintySample::constant_box(horizon, delta.clone())
        }
        SampleSpec::Random { seed } => UncertaintySample::random_box(horizon, channels, &mut ChaCha8Rng::seed_from_u64(*seed)),
    })
}

/// Replays a stored plan on the model's true plant under the configured sample.
pub fn cmd_simulate(cfg: &RunConfig, plan_path: &Path) -> Result<SimulationReport, CliError> {
    let model = Model::build(&cfg.model)?;
    let text = std::fs::read_to_string(plan_path).map_err(io_err(plan_path))?;
    let p = RobustPlan::from_json(&text)?;
    let truth = model.truth();
    let n = truth.dims().n;
    if p.trajectory.states[0].len() != n || p.policies.len() != truth.horizon() {
        return Err(CliError::Config("plan does not match the configured model".into()));
    }
    let x0 = match &cfg.experiment.x0 {
        Some(_) => start_state(cfg, &model)?,
        None => p.trajectory.states[0].clone(),
    };
    let sample = sample_for(&cfg.experiment.sample, truth.horizon(), truth.channels().len())?;
    let (traj, cost) = simulate_uncertain(truth, &p, &x0, &sample)?;
    let report = SimulationReport {
        x0: x0.iter().copied().collect(),
        sample: cfg.experiment.sample.clone(),
        cost,
        terminal_norm: traj.states.last().expect("nonempty").norm(),
        certified_bound: p.bound(&x0),
        label: p.label,
    };
    write_file(&cfg.output, "simulated_trajectory.csv", &trajectory_csv(&model, &traj))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&cfg.output, "simulation.json", &(json + "\n"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::from_json(r#"{"model": {"name": "random_stable", "seed": 2}}"#).unwrap();
        cfg.output = dir.to_path_buf();
        cfg
    }

    #[test]
    fn plan_then_simulate_nominal_reproduces_trajectory() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let cfg = linear_cfg(dir);
        let p = cmd_plan(&cfg).unwrap();
        assert!(p.is_converged());
        let csv = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2,u1");
        assert_eq!(lines.len(), 1 + 21);
        assert!(lines[21].ends_with(','));
        let r = cmd_simulate(&cfg, &dir.join("plan.json")).unwrap();
        let sim = std::fs::read_to_string(dir.join("simulated_trajectory.csv")).unwrap();
        assert_eq!(sim, csv);
        assert!(r.cost <= r.certified_bound * (1.0 + 1e-9));
    }

    #[test]
    fn corner_sample_stays_below_bound_for_linear_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let mut cfg = linear_cfg(dir);
        cmd_plan(&cfg).unwrap();
        for delta in [1.0, -1.0] {
            cfg.experiment.sample = SampleSpec::Constant { delta: vec![delta] };
            let r = cmd_simulate(&cfg, &dir.join("plan.json")).unwrap();
            assert_eq!(r.label, CertificateLabel::Exact);
            assert!(r.cost <= r.certified_bound + 1e-6 * r.certified_bound.abs());
        }
        cfg.experiment.sample = SampleSpec::Constant { delta: vec![2.0] };
        assert!(matches!(cmd_simulate(&cfg, &dir.join("plan.json")), Err(CliError::Config(_))));
    }

    #[test]
    fn pendulum_column_names() {
        let m = Model::build(&config::ModelConfig::default()).unwrap();
        let (xs, us) = m.column_names();
        assert_eq!(format!("{},{}", xs.join(","), us.join(",")), "theta,omega,s,v,u");
        assert_eq!(m.truth().channels().len(), 2);
        assert_eq!(m.planning(false).dims().d, 0);
    }
}
