//! Robust versus nominal planning on the cart-pendulum under sampled friction
//! and start states.
//!
//! Shot `k` draws from its own ChaCha8 stream (`seed`, stream `k`): first the
//! two normalized friction parameters, then `theta0, omega0, s0, v0`. Each
//! method plans once per shot (or once overall without replanning) and is
//! simulated on the true plant with the friction held for the whole horizon.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rddp_core::driver::{plan, simulate_uncertain, RobustPlan};
use rddp_core::plant::UncertaintySample;
use serde::{Deserialize, Serialize};

use crate::{csv_string, write_file, CliError, Model, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nominal,
    Robust,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Nominal, Method::Robust];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nominal => "nominal",
            Method::Robust => "robust",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub shot: usize,
    pub method: Method,
    pub d1: f64,
    pub d2: f64,
    pub x0: [f64; 4],
    /// `+inf` when planning or simulation failed.
    pub cost: f64,
    pub terminal_norm: f64,
    pub planned: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Mean of the first `k` costs, `k = 1..N`.
    pub running_mean: Vec<f64>,
    /// Sample standard deviation of the first `k` costs (0 for `k = 1`).
    pub running_std: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Shots whose terminal state norm exceeds the threshold (planner failures included).
    pub failures: usize,
    pub planner_failures: usize,
    pub converged: usize,
}

/// Non-finite statistics (a failed shot has infinite cost) serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub samples: usize,
    pub seed: u64,
    pub failure_threshold: f64,
    pub replan: bool,
    pub nominal: MethodSummary,
    pub robust: MethodSummary,
}

impl MonteCarloSummary {
    pub fn method(&self, m: Method) -> &MethodSummary {
        match m {
            Method::Nominal => &self.nominal,
            Method::Robust => &self.robust,
        }
    }
}

/// Normalized friction parameters and start state of shot `k`.
pub fn draw_shot(cfg: &RunConfig, k: usize) -> ([f64; 2], [f64; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed);
    rng.set_stream(k as u64);
    let delta = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
    let x0 = cfg.experiment.ranges().map(|[lo, hi]| rng.gen_range(lo..=hi));
    (delta, x0)
}

fn plans_for(model: &Model, cfg: &RunConfig, x0: &DVector<f64>) -> [Option<RobustPlan>; 2] {
    let opts = cfg.plan_options();
    Method::ALL.map(|m| {
        let plant = model.planning(m == Method::Robust);
        match plan(plant.as_ref(), x0, &opts) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("{} planner failed from {x0:?}: {e}", m.name());
                None
            }
        }
    })
}

/// Both methods on shot `k`; `fixed` holds shared plans when not replanning.
pub fn run_shot(model: &Model, cfg: &RunConfig, k: usize, fixed: Option<&[Option<RobustPlan>; 2]>) -> [ShotRecord; 2] {
    let Model::Pendulum { planning, .. } = model else { unreachable!("checked by cmd_montecarlo") };
    let (delta, x0a) = draw_shot(cfg, k);
    let (d1, d2) = planning.friction((delta[0], delta[1]));
    let x0 = DVector::from_row_slice(&x0a);
    let own;
    let plans = match fixed {
        Some(p) => p,
        None => {
            own = plans_for(model, cfg, &x0);
            &own
        }
    };
    let truth = model.truth();
    let sample = UncertaintySample::constant_box(truth.horizon(), delta.to_vec());
    let mut i = 0;
    Method::ALL.map(|method| {
        let p = &plans[i];
        i += 1;
        let (cost, terminal_norm) = match p.as_ref().map(|p| simulate_uncertain(truth, p, &x0, &sample)) {
            Some(Ok((tr, c))) if c.is_finite() => (c, tr.states.last().expect("nonempty").norm()),
            _ => (f64::INFINITY, f64::INFINITY),
        };
        ShotRecord {
            shot: k,
            method,
            d1,
            d2,
            x0: x0a,
            cost,
            terminal_norm,
            planned: p.is_some(),
            converged: p.as_ref().is_some_and(|p| p.is_converged()),
        }
    })
}

pub const SHOTS_HEADER: [&str; 10] = ["shot", "method", "d1", "d2", "theta0", "omega0", "s0", "v0", "cost", "terminal_norm"];

pub fn shots_csv(records: &[ShotRecord]) -> String {
    let header = SHOTS_HEADER.map(String::from);
    let rows = records.iter().map(|r| {
        let mut row = vec![r.shot.to_string(), r.method.name().to_string(), r.d1.to_string(), r.d2.to_string()];
        row.extend(r.x0.iter().map(|v| v.to_string()));
        row.extend([r.cost.to_string(), r.terminal_norm.to_string()]);
        row
    });
    csv_string(&header, rows)
}

fn summarize_method(records: &[&ShotRecord], threshold: f64) -> MethodSummary {
    let (mut running_mean, mut running_std) = (Vec::new(), Vec::new());
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, r) in records.iter().enumerate() {
        // Welford's update.
        let k = (i + 1) as f64;
        let delta = r.cost - mean;
        mean += delta / k;
        m2 += delta * (r.cost - mean);
        running_mean.push(mean);
        running_std.push(if i == 0 { 0.0 } else { (m2 / (k - 1.0)).sqrt() });
    }
    MethodSummary {
        mean: *running_mean.last().unwrap_or(&f64::NAN),
        std: *running_std.last().unwrap_or(&f64::NAN),
        running_mean,
        running_std,
        failures: records.iter().filter(|r| !(r.terminal_norm <= threshold)).count(),
        planner_failures: records.iter().filter(|r| !r.planned).count(),
        converged: records.iter().filter(|r| r.converged).count(),
    }
}

pub fn summarize(cfg: &RunConfig, records: &[ShotRecord]) -> MonteCarloSummary {
    let threshold = cfg.experiment.failure_threshold;
    let of = |m: Method| {
        let rs: Vec<&ShotRecord> = records.iter().filter(|r| r.method == m).collect();
        summarize_method(&rs, threshold)
    };
    MonteCarloSummary {
        samples: cfg.experiment.samples,
        seed: cfg.experiment.seed,
        failure_threshold: threshold,
        replan: cfg.experiment.replan,
        nominal: of(Method::Nominal),
        robust: of(Method::Robust),
    }
}

/// All shots in shot order; independent shots run on worker threads.
pub fn run_shots(model: &Model, cfg: &RunConfig) -> Result<Vec<ShotRecord>, CliError> {
    if !matches!(model, Model::Pendulum { .. }) {
        return Err(CliError::Config("montecarlo needs the cart_pendulum model".into()));
    }
    let n = cfg.experiment.samples;
    let fixed = if cfg.experiment.replan {
        None
    } else {
        let x0 = match &cfg.experiment.x0 {
            Some(x) if x.len() == 4 => DVector::from_vec(x.clone()),
            Some(_) => return Err(CliError::Config("experiment.x0 needs 4 entries".into())),
            None => model.default_x0(),
        };
        Some(plans_for(model, cfg, &x0))
    };
    let threads = cfg
        .experiment
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()))
        .min(n);
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<[ShotRecord; 2]>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= n {
                    break;
                }
                let rec = run_shot(model, cfg, k, fixed.as_ref());
                log::info!(
                    "shot {k}: nominal {:.4} robust {:.4} ({}/{n})",
                    rec[0].cost,
                    rec[1].cost,
                    done.fetch_add(1, Ordering::Relaxed) + 1
                );
                slots.lock().expect("no poisoned workers")[k] = Some(rec);
            });
        }
    });
    Ok(slots.into_inner().expect("workers joined").into_iter().flat_map(|r| r.expect("every shot ran")).collect())
}

/// Runs the comparison and writes `shots.csv` and `summary.json`.
pub fn cmd_montecarlo(cfg: &RunConfig) -> Result<MonteCarloSummary, CliError> {
    let model = Model::build(&cfg.model)?;
    let records = run_shots(&model, cfg)?;
    let summary = summarize(cfg, &records);
    write_file(&cfg.output, "shots.csv", &shots_csv(&records))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&cfg.output, "summary.json", &(json + "\n"))?;
    Ok(summary)
}
