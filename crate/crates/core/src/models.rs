//! Built-in plants: the cart-pendulum with uncertain friction and small linear fixtures.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::plant::{Derivatives, Dims, GeneralizedPlant};
use crate::qapprox::{Linearization, OutputLinearization, StageQuadCost};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("integration produced a non-finite state")]
    NonFiniteState,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    pub g: f64,
    pub l: f64,
    /// Nominal friction on the pendulum rate.
    pub d1: f64,
    /// Nominal friction on the cart velocity.
    pub d2: f64,
    /// Half-width of the friction intervals.
    pub radius: f64,
    /// Horizon length in seconds.
    pub horizon: f64,
    pub steps: usize,
    pub terminal_weight: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams { g: 9.81, l: 1.0, d1: 0.05, d2: 0.05, radius: 0.05, horizon: 10.0, steps: 50, terminal_weight: 1000.0 }
    }
}

impl PendulumParams {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.radius >= 0.0) {
            return Err(ModelError::InvalidParameter(format!("radius {} < 0", self.radius)));
        }
        if self.steps < 1 {
            return Err(ModelError::InvalidParameter("steps must be at least 1".into()));
        }
        if !(self.horizon > 0.0) || !(self.l > 0.0) {
            return Err(ModelError::InvalidParameter("horizon and length must be positive".into()));
        }
        Ok(())
    }
}

/// Cart-pendulum derivative with `theta` measured from upright and extra friction
/// forces `w = (w1, w2)` subtracted from the rate equations.
fn derivative_w(x: &DVector<f64>, u: f64, w: (f64, f64), p: &PendulumParams) -> DVector<f64> {
    let (th, om, v) = (x[0], x[1], x[3]);
    let vd = -p.d2 * v - w.1 + u;
    let od = -p.d1 * om - w.0 + p.g / p.l * th.sin() + th.cos() * vd;
    DVector::from_vec(vec![om, od, v, vd])
}

/// Jacobian of `derivative_w` over `(x, u, w1, w2)`.
fn derivative_jac(x: &DVector<f64>, u: f64, w: (f64, f64), p: &PendulumParams) -> DMatrix<f64> {
    let (th, v) = (x[0], x[3]);
    let vd = -p.d2 * v - w.1 + u;
    let (s, c) = th.sin_cos();
    let mut j = DMatrix::zeros(4, 7);
    j[(0, 1)] = 1.0;
    j[(1, 0)] = p.g / p.l * c - s * vd;
    j[(1, 1)] = -p.d1;
    j[(1, 3)] = -c * p.d2;
    j[(1, 4)] = c;
    j[(1, 5)] = -1.0;
    j[(1, 6)] = -c;
    j[(2, 3)] = 1.0;
    j[(3, 3)] = -p.d2;
    j[(3, 4)] = 1.0;
    j[(3, 6)] = -1.0;
    j
}

/// `(theta, omega, s, v)' ` under input `u` and the parameters' friction.
pub fn pendulum_derivative(x: &DVector<f64>, u: f64, p: &PendulumParams) -> DVector<f64> {
    derivative_w(x, u, (0.0, 0.0), p)
}

/// Classical RK4 step with `u` held over the interval.
pub fn rk4_step(
    f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, ModelError> {
    let k1 = f(x, u);
    let k2 = f(&(x + &k1 * (dt / 2.0)), u);
    let k3 = f(&(x + &k2 * (dt / 2.0)), u);
    let k4 = f(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(ModelError::NonFiniteState)
    }
}

/// One step of the parametric model with friction `(d1, d2)` substituted directly.
pub fn parametric_step(p: &PendulumParams, d1: f64, d2: f64, x: &DVector<f64>, u: f64) -> DVector<f64> {
    let q = PendulumParams { d1, d2, ..p.clone() };
    let f = |y: &DVector<f64>, _: &DVector<f64>| pendulum_derivative(y, u, &q);
    rk4_step(f, x, &DVector::zeros(0), p.dt()).unwrap_or_else(|_| DVector::from_element(4, f64::NAN))
}

/// How the friction channels enter the discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// `w = delta * radius * (omega, v)` at the step start, held over the RK4 stages (`d = 2`).
    #[default]
    Held,
    /// One `w` pair per RK4 stage, taken at that stage's point (`d = 8`); exact parametric substitution.
    PerStage,
}

#[derive(Debug, Clone)]
pub struct PendulumPlant {
    pub params: PendulumParams,
    pub mode: ChannelMode,
}

pub fn build_pendulum_plant(params: PendulumParams, mode: ChannelMode) -> Result<PendulumPlant, ModelError> {
    params.validate()?;
    Ok(PendulumPlant { params, mode })
}

impl PendulumPlant {
    /// The nominal model: no uncertainty channels.
    pub fn nominal(&self) -> PendulumPlant {
        PendulumPlant { params: PendulumParams { radius: 0.0, ..self.params.clone() }, mode: self.mode }
    }

    /// Friction values realized by normalized parameters.
    pub fn friction(&self, delta: (f64, f64)) -> (f64, f64) {
        (self.params.d1 + self.params.radius * delta.0, self.params.d2 + self.params.radius * delta.1)
    }

    fn uncertain(&self) -> bool {
        self.params.radius > 0.0
    }

    /// RK4 stages `y_1..y_4` and the end state, with per-stage `w`.
    fn stages(&self, x: &DVector<f64>, u: f64, w: impl Fn(usize) -> (f64, f64)) -> ([DVector<f64>; 4], DVector<f64>) {
        let p = &self.params;
        let dt = p.dt();
        let y1 = x.clone();
        let k1 = derivative_w(&y1, u, w(0), p);
        let y2 = x + &k1 * (dt / 2.0);
        let k2 = derivative_w(&y2, u, w(1), p);
        let y3 = x + &k2 * (dt / 2.0);
        let k3 = derivative_w(&y3, u, w(2), p);
        let y4 = x + &k3 * dt;
        let k4 = derivative_w(&y4, u, w(3), p);
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        ([y1, y2, y3, y4], next)
    }

    fn w_at(&self, w: &DVector<f64>, k: usize) -> (f64, f64) {
        match (self.uncertain(), self.mode) {
            (false, _) => (0.0, 0.0),
            (true, ChannelMode::Held) => (w[0], w[1]),
            (true, ChannelMode::PerStage) => (w[k], w[4 + k]),
        }
    }

    /// Held mode: Jacobian of the RK4 map over `(x, u, w)` by chaining stage Jacobians.
    fn held_linearization(&self, x: &DVector<f64>, u: f64, w: (f64, f64)) -> Linearization {
        let p = &self.params;
        let dt = p.dt();
        let mut dnext = DMatrix::zeros(4, 7);
        dnext.view_mut((0, 0), (4, 4)).copy_from(&DMatrix::identity(4, 4));
        let mut y = x.clone();
        let mut dy = dnext.clone();
        let weights = [1.0, 2.0, 2.0, 1.0];
        let advance = [0.5, 0.5, 1.0];
        let mut ks = Vec::with_capacity(4);
        for k in 0..4 {
            let kv = derivative_w(&y, u, w, p);
            let j = derivative_jac(&y, u, w, p);
            // d k / d(x, u, w) = J [dy; 0 I]
            let mut aug = DMatrix::identity(7, 7);
            aug.view_mut((0, 0), (4, 7)).copy_from(&dy);
            let dk = &j * aug;
            dnext += &dk * (dt / 6.0 * weights[k]);
            if k < 3 {
                y = x + &kv * (dt * advance[k]);
                dy = DMatrix::zeros(4, 7);
                dy.view_mut((0, 0), (4, 4)).copy_from(&DMatrix::identity(4, 4));
                dy += &dk * (dt * advance[k]);
            }
            ks.push(kv);
        }
        let f = x + (&ks[0] + &ks[1] * 2.0 + &ks[2] * 2.0 + &ks[3]) * (dt / 6.0);
        Linearization {
            f,
            a: dnext.columns(0, 4).into_owned(),
            bu: dnext.columns(4, 1).into_owned(),
            bw: if self.uncertain() { dnext.columns(5, 2).into_owned() } else { DMatrix::zeros(4, 0) },
        }
    }
}

impl GeneralizedPlant for PendulumPlant {
    fn dims(&self) -> Dims {
        let d = match (self.uncertain(), self.mode) {
            (false, _) => 0,
            (true, ChannelMode::Held) => 2,
            (true, ChannelMode::PerStage) => 8,
        };
        Dims { n: 4, m: 1, d, l: d }
    }

    fn horizon(&self) -> usize {
        self.params.steps
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.stages(x, u[0], |k| self.w_at(w, k)).1
    }

    fn uncertainty_output(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let r = self.params.radius;
        match (self.uncertain(), self.mode) {
            (false, _) => DVector::zeros(0),
            (true, ChannelMode::Held) => DVector::from_vec(vec![r * x[1], r * x[3]]),
            (true, ChannelMode::PerStage) => {
                let (ys, _) = self.stages(x, u[0], |k| self.w_at(w, k));
                let mut z = DVector::zeros(8);
                for (k, y) in ys.iter().enumerate() {
                    z[k] = r * y[1];
                    z[4 + k] = r * y[3];
                }
                z
            }
        }
    }

    fn stage_cost(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        u[0] * u[0] * self.params.dt()
    }

    fn terminal_cost(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(5, 5);
        for i in 1..5 {
            m[(i, i)] = self.params.terminal_weight;
        }
        m
    }

    fn channels(&self) -> Vec<Vec<usize>> {
        match (self.uncertain(), self.mode) {
            (false, _) => Vec::new(),
            (true, ChannelMode::Held) => vec![vec![0], vec![1]],
            (true, ChannelMode::PerStage) => vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
        }
    }

    fn derivatives(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Option<Derivatives> {
        let dt = self.params.dt();
        let mut cost = DMatrix::zeros(6, 6);
        cost[(0, 0)] = u[0] * u[0] * dt;
        cost[(0, 5)] = u[0] * dt;
        cost[(5, 0)] = u[0] * dt;
        cost[(5, 5)] = dt;
        let cost = Some(StageQuadCost { mat: cost });
        if self.mode == ChannelMode::PerStage && self.uncertain() {
            return Some(Derivatives { dynamics: None, output: None, cost });
        }
        let wp = self.w_at(w, 0);
        let dynamics = Some(self.held_linearization(x, u[0], wp));
        let d = self.dims().d;
        let r = self.params.radius;
        let mut cx = DMatrix::zeros(d, 4);
        if d == 2 {
            cx[(0, 1)] = r;
            cx[(1, 3)] = r;
        }
        let output = Some(OutputLinearization {
            z: self.uncertainty_output(x, u, w),
            cx,
            cu: DMatrix::zeros(d, 1),
            cw: DMatrix::zeros(d, d),
        });
        Some(Derivatives { dynamics, output, cost })
    }
}

/// Linear-quadratic plant `x+ = A x + Bu u + Bw w`, `z = Cz x + Dz u`,
/// stage cost `x'Qx + u'Ru`, terminal cost `x'Qf x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    pub bw: DMatrix<f64>,
    pub cz: DMatrix<f64>,
    pub dz: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Scalar,
    DoubleIntegrator,
    /// Two states, one input; `uncertain` adds one box channel.
    RandomStable { seed: u64, uncertain: bool },
}

pub const LINEAR_HORIZON: usize = 20;

pub fn linear_fixture(kind: LinearKind) -> LinearPlant {
    match kind {
        LinearKind::Scalar => LinearPlant::certain(
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        ),
        LinearKind::DoubleIntegrator => {
            let dt = 0.1;
            LinearPlant::certain(
                DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
                DMatrix::from_column_slice(2, 1, &[dt * dt / 2.0, dt]),
                DMatrix::identity(2, 2),
                DMatrix::identity(1, 1) * 0.1,
            )
        }
        LinearKind::RandomStable { seed, uncertain } => random_stable(seed, 2, 1, uncertain),
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Random stable plant (spectral radius in `[0.5, 0.9]`) with PD costs.
pub fn random_stable(seed: u64, n: usize, m: usize, uncertain: bool) -> LinearPlant {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let mut a = mat(n, n, &mut rng);
    let rho = spectral_radius(&a).max(1e-3);
    let target = rng.gen_range(0.5..0.9);
    a *= target / rho;
    let bu = mat(n, m, &mut rng);
    let g = mat(n, n, &mut rng);
    let q = &g * g.transpose() * 0.5 + DMatrix::identity(n, n) * 0.5;
    let r = DMatrix::identity(m, m) * rng.gen_range(0.5..1.5);
    let mut plant = LinearPlant::certain(a, bu, q, r);
    if uncertain {
        let mut bw = mat(n, 1, &mut rng);
        bw *= 0.3 / bw.norm().max(1e-12);
        let mut cz = mat(1, n, &mut rng);
        cz *= 0.5 / cz.norm().max(1e-12);
        plant.bw = bw;
        plant.cz = cz;
        plant.dz = DMatrix::zeros(1, m);
    }
    plant
}

impl LinearPlant {
    pub fn certain(a: DMatrix<f64>, bu: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let (n, m) = (a.nrows(), bu.ncols());
        LinearPlant {
            qf: q.clone(),
            a,
            bu,
            bw: DMatrix::zeros(n, 0),
            cz: DMatrix::zeros(0, n),
            dz: DMatrix::zeros(0, m),
            q,
            r,
            horizon: LINEAR_HORIZON,
        }
    }

    /// The same plant with the uncertainty channel removed.
    pub fn without_uncertainty(&self) -> Self {
        let mut p = self.clone();
        p.bw = DMatrix::zeros(self.a.nrows(), 0);
        p.cz = DMatrix::zeros(0, self.a.nrows());
        p.dz = DMatrix::zeros(0, self.bu.ncols());
        p
    }
}

impl GeneralizedPlant for LinearPlant {
    fn dims(&self) -> Dims {
        Dims { n: self.a.nrows(), m: self.bu.ncols(), d: self.bw.ncols(), l: self.cz.nrows() }
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.bu * u + &self.bw * w
    }

    fn uncertainty_output(&self, x: &DVector<f64>, u: &DVector<f64>, _w: &DVector<f64>) -> DVector<f64> {
        &self.cz * x + &self.dz * u
    }

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[0] + (u.transpose() * &self.r * u)[0]
    }

    fn terminal_cost(&self) -> DMatrix<f64> {
        let n = self.a.nrows();
        let mut m = DMatrix::zeros(1 + n, 1 + n);
        m.view_mut((1, 1), (n, n)).copy_from(&self.qf);
        m
    }

    fn derivatives(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Option<Derivatives> {
        let Dims { n, m, d, l } = self.dims();
        let mut cost = DMatrix::zeros(1 + n + m, 1 + n + m);
        let (qx, ru) = (&self.q * x, &self.r * u);
        cost[(0, 0)] = self.stage_cost(x, u);
        cost.view_mut((1, 0), (n, 1)).copy_from(&qx);
        cost.view_mut((0, 1), (1, n)).copy_from(&qx.transpose());
        cost.view_mut((1 + n, 0), (m, 1)).copy_from(&ru);
        cost.view_mut((0, 1 + n), (1, m)).copy_from(&ru.transpose());
        cost.view_mut((1, 1), (n, n)).copy_from(&self.q);
        cost.view_mut((1 + n, 1 + n), (m, m)).copy_from(&self.r);
        Some(Derivatives {
            dynamics: Some(Linearization { f: self.dynamics(x, u, w), a: self.a.clone(), bu: self.bu.clone(), bw: self.bw.clone() }),
            output: Some(OutputLinearization {
                z: self.uncertainty_output(x, u, w),
                cx: self.cz.clone(),
                cu: self.dz.clone(),
                cw: DMatrix::zeros(l, d),
            }),
            cost: Some(StageQuadCost { mat: cost }),
        })
    }

    fn is_linear(&self) -> bool {
        true
    }
}
