//! The outer robust-DDP loop: backward passes alternating with nominal rollouts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backward::{run_backward_pass, AffinePolicy, BackwardError, PassOptions, Strategy};
use crate::plant::{close_loop, Delta, GeneralizedPlant, PlantError, UncertaintySample};
use crate::quadform::ValueQuad;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriverError {
    #[error("backward pass failed at timestep {t} in iteration {iter}: {source}")]
    BackwardInfeasible { t: usize, iter: usize, source: BackwardError },
    #[error("state became non-finite at timestep {0}")]
    NonFiniteState(usize),
    #[error("timestep {t}: {source}")]
    Plant { t: usize, source: PlantError },
    #[error("{0}")]
    Invalid(String),
    #[error("plan schema version {found}, expected {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
}

/// `x_0..x_T`, `u_0..u_{T-1}`, `w_0..w_{T-1}`, `z_0..z_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// l2 norm of the stacked states.
    pub fn state_norm(&self) -> f64 {
        self.states.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
    }

    /// l2 norm of the stacked state differences.
    pub fn state_distance(&self, other: &Trajectory) -> f64 {
        self.states.iter().zip(&other.states).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateLabel {
    /// Linear plant: the value bounds hold globally.
    Exact,
    /// Nonlinear plant: bounds rest on a local Q estimate.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Converged,
    MaxIters,
    /// A later backward pass or rollout failed; the best plan so far is returned.
    Truncated { iter: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    /// Accepted feedforward step length.
    pub alpha: f64,
    pub dx_norm: f64,
    pub nominal_cost: f64,
    pub certified_bound: f64,
    /// Worst-vertex closed-loop cost of this iteration's plan; `None` for linear
    /// plants or when some vertex diverges.
    pub merit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustPlan {
    pub version: u32,
    /// Anchored at `trajectory`.
    pub policies: Vec<AffinePolicy>,
    /// `V_0 .. V_T`, anchored at `trajectory`.
    pub values: Vec<ValueQuad>,
    pub trajectory: Trajectory,
    pub log: Vec<IterationLog>,
    pub label: CertificateLabel,
    pub status: PlanStatus,
    pub strategies: Vec<Strategy>,
}

impl RobustPlan {
    /// `u_t(x)` of the affine policy.
    pub fn input(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.policies[t];
        &self.trajectory.inputs[t] + &p.k1 + &p.k2 * (x - &self.trajectory.states[t])
    }

    /// Certified bound `V_0(x)`.
    pub fn bound(&self, x: &DVector<f64>) -> f64 {
        self.values[0].eval(x)
    }

    pub fn is_converged(&self) -> bool {
        self.status == PlanStatus::Converged
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DriverError> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| DriverError::Invalid(e.to_string()))?;
        let found = v.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != PLAN_SCHEMA_VERSION {
            return Err(DriverError::SchemaMismatch { found, expected: PLAN_SCHEMA_VERSION });
        }
        serde_json::from_value(v).map_err(|e| DriverError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct PlanOptions {
    /// Convergence threshold on the stacked state change; `None` uses `1e-6 (1 + |x|)`.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub pass: PassOptions,
    /// Inputs of the initial open-loop rollout (zero when `None`).
    pub initial_inputs: Option<Vec<DVector<f64>>>,
    /// Backtracking on the feedforward term for nonlinear plants: the step
    /// `alpha k1` is halved until the worst-vertex closed-loop cost decreases, down to `2^-max`.
    pub line_search: Option<u32>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { epsilon: None, max_iters: 50, pass: PassOptions::default(), initial_inputs: None, line_search: Some(10) }
    }
}

fn finite(x: &DVector<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Open-loop nominal rollout (`w = 0`).
pub fn rollout_open(plant: &dyn GeneralizedPlant, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Trajectory, DriverError> {
    let dims = plant.dims();
    let w = DVector::zeros(dims.d);
    let mut traj = Trajectory { states: vec![x0.clone()], inputs: Vec::new(), disturbances: Vec::new(), outputs: Vec::new() };
    for (t, u) in inputs.iter().enumerate() {
        let x = traj.states.last().expect("nonempty");
        let next = plant.dynamics(x, u, &w);
        if !finite(&next) {
            return Err(DriverError::NonFiniteState(t + 1));
        }
        traj.outputs.push(plant.uncertainty_output(x, u, &w));
        traj.inputs.push(u.clone());
        traj.disturbances.push(w.clone());
        traj.states.push(next);
    }
    Ok(traj)
}

/// Closed-loop nominal rollout of policies anchored at `anchor`.
pub fn rollout(
    plant: &dyn GeneralizedPlant,
    anchor: &Trajectory,
    policies: &[AffinePolicy],
    x0: &DVector<f64>,
) -> Result<Trajectory, DriverError> {
    if policies.len() != anchor.horizon() {
        return Err(DriverError::Invalid(format!("{} policies for horizon {}", policies.len(), anchor.horizon())));
    }
    let dims = plant.dims();
    let w = DVector::zeros(dims.d);
    let mut traj = Trajectory { states: vec![x0.clone()], inputs: Vec::new(), disturbances: Vec::new(), outputs: Vec::new() };
    for (t, p) in policies.iter().enumerate() {
        let x = traj.states.last().expect("nonempty").clone();
        let u = &anchor.inputs[t] + &p.k1 + &p.k2 * (&x - &anchor.states[t]);
        let next = plant.dynamics(&x, &u, &w);
        if !finite(&next) || !finite(&u) {
            return Err(DriverError::NonFiniteState(t + 1));
        }
        traj.outputs.push(plant.uncertainty_output(&x, &u, &w));
        traj.inputs.push(u);
        traj.disturbances.push(w.clone());
        traj.states.push(next);
    }
    Ok(traj)
}

/// `sum_t f0(x_t, u_t) + V_T(x_T)`.
pub fn evaluate_cost(plant: &dyn GeneralizedPlant, traj: &Trajectory) -> f64 {
    let stage: f64 = traj.inputs.iter().zip(&traj.states).map(|(u, x)| plant.stage_cost(x, u)).sum();
    let xt = traj.states.last().expect("nonempty");
    let terminal = ValueQuad::new(plant.terminal_cost(), DVector::zeros(xt.len())).eval(xt);
    stage + terminal
}

/// Closed loop with `w_t = Delta_t(z_t)` resolved by fixed-point iteration each step.
pub fn simulate_uncertain(
    plant: &dyn GeneralizedPlant,
    plan: &RobustPlan,
    x0: &DVector<f64>,
    sample: &UncertaintySample,
) -> Result<(Trajectory, f64), DriverError> {
    let horizon = plan.policies.len();
    if sample.deltas.len() < horizon && plant.dims().d > 0 {
        return Err(DriverError::Invalid(format!("{} uncertainty steps for horizon {horizon}", sample.deltas.len())));
    }
    let mut traj = Trajectory { states: vec![x0.clone()], inputs: Vec::new(), disturbances: Vec::new(), outputs: Vec::new() };
    for t in 0..horizon {
        let x = traj.states.last().expect("nonempty").clone();
        let u = plan.input(t, &x);
        let delta = sample.deltas.get(t).cloned().unwrap_or(Delta::Box(Vec::new()));
        let w = close_loop(plant, &x, &u, &delta).map_err(|source| DriverError::Plant { t, source })?;
        let next = plant.dynamics(&x, &u, &w);
        if !finite(&next) || !finite(&u) {
            return Err(DriverError::NonFiniteState(t + 1));
        }
        traj.outputs.push(plant.uncertainty_output(&x, &u, &w));
        traj.inputs.push(u);
        traj.disturbances.push(w);
        traj.states.push(next);
    }
    let cost = evaluate_cost(plant, &traj);
    Ok((traj, cost))
}

fn reanchored(pass_values: &[ValueQuad], steps_k2: Vec<DMatrix<f64>>, traj: &Trajectory) -> (Vec<AffinePolicy>, Vec<ValueQuad>) {
    let policies = steps_k2.into_iter().map(|k2| AffinePolicy { k1: DVector::zeros(k2.nrows()), k2 }).collect();
    let values = pass_values.iter().zip(&traj.states).map(|(v, x)| v.reanchor(x)).collect();
    (policies, values)
}

fn closed_loop_cost(
    plant: &dyn GeneralizedPlant,
    anchor: &Trajectory,
    policies: &[AffinePolicy],
    x0: &DVector<f64>,
    delta: &Delta,
) -> f64 {
    let mut x = x0.clone();
    let mut cost = 0.0;
    for (t, p) in policies.iter().enumerate() {
        let u = &anchor.inputs[t] + &p.k1 + &p.k2 * (&x - &anchor.states[t]);
        let Ok(w) = close_loop(plant, &x, &u, delta) else { return f64::INFINITY };
        cost += plant.stage_cost(&x, &u);
        x = plant.dynamics(&x, &u, &w);
        if !finite(&x) {
            return f64::INFINITY;
        }
    }
    let v = ValueQuad::new(plant.terminal_cost(), DVector::zeros(x.len())).eval(&x);
    if (cost + v).is_finite() { cost + v } else { f64::INFINITY }
}

/// Line-search merit: worst closed-loop cost over the vertices of the box
/// (time-constant parameters), or the nominal cost without channels.
fn merit(plant: &dyn GeneralizedPlant, anchor: &Trajectory, policies: &[AffinePolicy], x0: &DVector<f64>) -> f64 {
    let k = plant.channels().len();
    if plant.dims().d == 0 || k == 0 || k > MERIT_MAX_CHANNELS {
        return closed_loop_cost(plant, anchor, policies, x0, &Delta::Box(vec![0.0; k]));
    }
    (0..1usize << k)
        .map(|bits| {
            let v = (0..k).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            closed_loop_cost(plant, anchor, policies, x0, &Delta::Box(v))
        })
        .fold(0.0, f64::max)
}

const MERIT_MAX_CHANNELS: usize = 4;

/// Robust DDP: iterate backward pass and rollout until the trajectory settles.
pub fn plan(plant: &dyn GeneralizedPlant, x0: &DVector<f64>, opts: &PlanOptions) -> Result<RobustPlan, DriverError> {
    let dims = plant.dims();
    let horizon = plant.horizon();
    if x0.len() != dims.n {
        return Err(DriverError::Invalid(format!("x0 has {} entries, expected {}", x0.len(), dims.n)));
    }
    let inputs = match &opts.initial_inputs {
        Some(u) if u.len() == horizon => u.clone(),
        Some(u) => return Err(DriverError::Invalid(format!("{} initial inputs for horizon {horizon}", u.len()))),
        None => vec![DVector::zeros(dims.m); horizon],
    };
    let label = if plant.is_linear() { CertificateLabel::Exact } else { CertificateLabel::Local };
    let v_terminal = ValueQuad::new(plant.terminal_cost(), DVector::zeros(dims.n));
    let mut traj = rollout_open(plant, x0, &inputs)?;
    let mut log = Vec::new();
    let mut best: Option<RobustPlan> = None;

    for iter in 1..=opts.max_iters.max(1) {
        let pass = match run_backward_pass(plant, &traj, &v_terminal, &opts.pass) {
            Ok(p) => p,
            Err(source) => {
                let t = match &source {
                    BackwardError::Step { t, .. } | BackwardError::QApprox { t, .. } | BackwardError::Plant { t, .. } => *t,
                    BackwardError::TrajectoryMismatch => 0,
                };
                return match best {
                    Some(mut p) if iter > 1 => {
                        log::warn!("backward pass failed in iteration {iter}: {source}");
                        p.status = PlanStatus::Truncated { iter, reason: source.to_string() };
                        p.log = log;
                        Ok(p)
                    }
                    _ => Err(DriverError::BackwardInfeasible { t, iter, source }),
                };
            }
        };
        let policies: Vec<AffinePolicy> = pass.steps.iter().map(|s| s.policy.clone()).collect();
        let halvings = if plant.is_linear() { 0 } else { opts.line_search.unwrap_or(0) };
        // Current policy re-expressed around `traj`: feedback only.
        let prev_merit = if halvings > 0 {
            let held: Vec<AffinePolicy> = policies.iter().map(|p| AffinePolicy { k1: p.k1.map(|_| 0.0), k2: p.k2.clone() }).collect();
            merit(plant, &traj, &held, x0)
        } else {
            0.0
        };
        let mut alpha = 1.0;
        let mut attempt = Err(DriverError::Invalid("no rollout".into()));
        let mut trial_merit = f64::NAN;
        let mut full: Option<(Result<Trajectory, DriverError>, f64)> = None;
        for k in 0..=halvings {
            let scaled: Vec<AffinePolicy> =
                policies.iter().map(|p| AffinePolicy { k1: &p.k1 * alpha, k2: p.k2.clone() }).collect();
            attempt = rollout(plant, &traj, &scaled, x0);
            if plant.is_linear() {
                break;
            }
            trial_merit = if attempt.is_ok() { merit(plant, &traj, &scaled, x0) } else { f64::INFINITY };
            if trial_merit < prev_merit {
                break;
            }
            if k == 0 {
                full = Some((attempt.clone(), trial_merit));
            }
            if k == halvings {
                // No decrease anywhere: a stalled search is worse than the undamped
                // step, unless that step diverges.
                if let Some((a, m)) = full.take().filter(|(_, m)| m.is_finite()) {
                    attempt = a;
                    trial_merit = m;
                    alpha = 1.0;
                }
                break;
            }
            alpha *= 0.5;
        }
        let next = match attempt {
            Ok(n) => n,
            Err(e) => {
                return match best {
                    Some(mut p) => {
                        p.status = PlanStatus::Truncated { iter, reason: e.to_string() };
                        p.log = log;
                        Ok(p)
                    }
                    None => Err(e),
                }
            }
        };
        let dx = next.state_distance(&traj);
        let (pols, values) = reanchored(&pass.values, pass.steps.iter().map(|s| s.policy.k2.clone()).collect(), &next);
        let entry = IterationLog {
            iter,
            alpha,
            dx_norm: dx,
            nominal_cost: evaluate_cost(plant, &next),
            certified_bound: values[0].eval(x0),
            merit: trial_merit.is_finite().then_some(trial_merit),
        };
        log::debug!("iter {iter}: alpha {alpha} dx {:.3e} cost {:.6e} bound {:.6e}", entry.dx_norm, entry.nominal_cost, entry.certified_bound);
        log.push(entry);
        let eps = opts.epsilon.unwrap_or(1e-6 * (1.0 + next.state_norm()));
        // A damped step says nothing about the full step being small.
        let converged = dx < eps && alpha == 1.0;
        let current = RobustPlan {
            version: PLAN_SCHEMA_VERSION,
            policies: pols,
            values,
            trajectory: next.clone(),
            log: log.clone(),
            label,
            status: if converged { PlanStatus::Converged } else { PlanStatus::MaxIters },
            strategies: pass.steps.iter().map(|s| s.strategy).collect(),
        };
        if converged {
            return Ok(current);
        }
        // Linear plants: the bound is exact. Otherwise it is only a local prediction,
        // so rank by the simulated merit.
        let key = |p: &RobustPlan| {
            let l = p.log.last().expect("logged");
            if plant.is_linear() { l.certified_bound } else { l.merit.unwrap_or(f64::INFINITY) }
        };
        let better = best.as_ref().map_or(true, |b| key(&current) < key(b));
        if better {
            best = Some(current.clone());
        }
        traj = next;
    }
    let mut out = best.expect("at least one iteration");
    out.log = log;
    out.status = PlanStatus::MaxIters;
    Ok(out)
}
