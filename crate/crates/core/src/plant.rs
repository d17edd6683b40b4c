//! Uncertain discrete-time generalized plants, multiplier sets and uncertainty samples.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::qapprox::{Linearization, OutputLinearization, StageQuadCost};
use crate::quadform::symmetrize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch { what: String, expected: usize, got: usize },
    #[error("terminal cost is not symmetric (asymmetry {0:.3e})")]
    NonSymmetricTerminalCost(f64),
    #[error("terminal cost is not positive semidefinite (min eigenvalue {0:.3e})")]
    IndefiniteTerminalCost(f64),
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("generator {0} is not symmetric")]
    NonSymmetricGenerator(usize),
    #[error("factor of generator {0} has deficient row rank")]
    RankDeficientFactor(usize),
    #[error("factors of generator {index} do not reconstruct it (error {err:.3e})")]
    FactorMismatch { index: usize, err: f64 },
    #[error("uncertainty loop did not converge after {0} iterations")]
    WellPosednessFailure(usize),
    #[error("uncertainty sample is not admissible: {0}")]
    InadmissibleSample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub l: usize,
}

impl Dims {
    /// Size of the quadratic basis `(1, dx, du, dw)`.
    pub fn basis(&self) -> usize {
        1 + self.n + self.m + self.d
    }
}

/// Analytic derivatives at a point; anything left `None` falls back to finite differences.
#[derive(Debug, Clone, Default)]
pub struct Derivatives {
    pub dynamics: Option<Linearization>,
    pub output: Option<OutputLinearization>,
    pub cost: Option<StageQuadCost>,
}

/// `x+ = f(x, u, w)`, `z = g(x, u, w)`, closed by `w = Delta(z)`.
///
/// Evaluators must be pure. The terminal cost is a quadratic over `(1, x)`.
pub trait GeneralizedPlant: Send + Sync {
    fn dims(&self) -> Dims;
    fn horizon(&self) -> usize;
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    fn uncertainty_output(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self) -> DMatrix<f64>;

    /// Rows of `z` feeding each box channel. Channel `k` drives the next
    /// `channels()[k].len()` entries of `w` as `w_k = delta_k z_k`, `|delta_k| <= 1`.
    fn channels(&self) -> Vec<Vec<usize>> {
        let d = self.dims().d;
        (0..d).map(|i| vec![i]).collect()
    }

    fn derivatives(&self, _x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>) -> Option<Derivatives> {
        None
    }

    /// Affine dynamics, affine output and quadratic cost: local certificates are global.
    fn is_linear(&self) -> bool {
        false
    }
}

/// Generators `M^(i)` over `(1, dx, du, dw)` with factors `M = Mp'Mp - Mm'Mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub size: usize,
    pub generators: Vec<DMatrix<f64>>,
    pub factors: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

fn full_row_rank(f: &DMatrix<f64>) -> bool {
    if f.nrows() == 0 {
        return true;
    }
    if f.nrows() > f.ncols() {
        return false;
    }
    let sv = f.clone().singular_values();
    sv.min() > 1e-9 * (1.0 + sv.max())
}

impl MultiplierSet {
    pub fn empty(size: usize) -> Self {
        MultiplierSet { size, generators: Vec::new(), factors: Vec::new() }
    }

    pub fn new(size: usize, generators: Vec<DMatrix<f64>>, factors: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self, PlantError> {
        if generators.len() != factors.len() {
            return Err(PlantError::DimensionMismatch {
                what: "factor list".into(),
                expected: generators.len(),
                got: factors.len(),
            });
        }
        for (i, (g, (mp, mm))) in generators.iter().zip(&factors).enumerate() {
            if g.nrows() != size || g.ncols() != size || mp.ncols() != size || mm.ncols() != size {
                return Err(PlantError::DimensionMismatch { what: format!("generator {i}"), expected: size, got: g.nrows() });
            }
            let scale = 1.0 + g.norm();
            if (g - g.transpose()).norm() > 1e-12 * scale {
                return Err(PlantError::NonSymmetricGenerator(i));
            }
            if !full_row_rank(mp) || !full_row_rank(mm) {
                return Err(PlantError::RankDeficientFactor(i));
            }
            let err = (mp.transpose() * mp - mm.transpose() * mm - g).norm();
            if err > 1e-10 * scale {
                return Err(PlantError::FactorMismatch { index: i, err });
            }
        }
        Ok(MultiplierSet { size, generators, factors })
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }
}

/// Full-row-rank factor `F` with `F'F = S` for a PSD matrix `S`.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(s).symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-12 * top.max(1e-300)).collect();
    let mut f = DMatrix::zeros(keep.len(), s.ncols());
    for (r, &i) in keep.iter().enumerate() {
        let v = eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt();
        f.row_mut(r).copy_from(&v.transpose());
    }
    f
}

/// One generator per box channel `w_k = delta_k z_k`, `|delta_k| <= 1`, encoding
/// `|z_k|^2 - |w_k|^2 >= 0` with `z` linearized over `(1, dx, du, dw)`.
pub fn box_multipliers(
    out: &OutputLinearization,
    dims: Dims,
    channel_dims: &[usize],
    output_rows: &[Vec<usize>],
) -> Result<MultiplierSet, PlantError> {
    let size = dims.basis();
    if channel_dims.len() != output_rows.len() {
        return Err(PlantError::DimensionMismatch { what: "channel list".into(), expected: channel_dims.len(), got: output_rows.len() });
    }
    let total: usize = channel_dims.iter().sum();
    if total != dims.d {
        return Err(PlantError::DimensionMismatch { what: "channel sizes".into(), expected: dims.d, got: total });
    }
    let rows_all = out.rows_over_basis();
    let mut gens = Vec::new();
    let mut factors = Vec::new();
    let mut w0 = 0;
    for (k, (&s, rows)) in channel_dims.iter().zip(output_rows).enumerate() {
        if rows.len() != s || rows.iter().any(|&r| r >= dims.l) {
            return Err(PlantError::DimensionMismatch { what: format!("channel {k} rows"), expected: s, got: rows.len() });
        }
        let cbar = rows_all.select_rows(rows);
        let mut e = DMatrix::zeros(s, size);
        for j in 0..s {
            e[(j, 1 + dims.n + dims.m + w0 + j)] = 1.0;
        }
        let g = symmetrize(&(cbar.transpose() * &cbar - e.transpose() * &e));
        // z may be degenerate at a point (e.g. zero output): factor c'c instead of using c directly.
        let mp = if full_row_rank(&cbar) { cbar } else { psd_factor(&(cbar.transpose() * &cbar)) };
        gens.push(g);
        factors.push((mp, e));
        w0 += s;
    }
    MultiplierSet::new(size, gens, factors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    /// One normalized parameter per box channel.
    Box(Vec<f64>),
    /// Static gain `w = G z`.
    Gain(DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Nominal,
    Sampled,
    WorstCaseEstimate,
}

/// Per-timestep uncertainty realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySample {
    pub deltas: Vec<Delta>,
    pub provenance: Provenance,
}

impl UncertaintySample {
    pub fn nominal(horizon: usize, channels: usize) -> Self {
        UncertaintySample { deltas: vec![Delta::Box(vec![0.0; channels]); horizon], provenance: Provenance::Nominal }
    }

    /// The same box parameters at every timestep (time-invariant parametric uncertainty).
    pub fn constant_box(horizon: usize, delta: Vec<f64>) -> Self {
        UncertaintySample { deltas: vec![Delta::Box(delta); horizon], provenance: Provenance::Sampled }
    }

    pub fn random_box(horizon: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let deltas = (0..horizon).map(|_| Delta::Box((0..channels).map(|_| rng.gen_range(-1.0..=1.0)).collect())).collect();
        UncertaintySample { deltas, provenance: Provenance::Sampled }
    }
}

/// `w = Delta(z)` for the plant's channel layout.
pub fn apply_delta(delta: &Delta, z: &DVector<f64>, channels: &[Vec<usize>], d: usize) -> Result<DVector<f64>, PlantError> {
    match delta {
        Delta::Box(p) => {
            if p.len() != channels.len() {
                return Err(PlantError::InadmissibleSample(format!("{} parameters for {} channels", p.len(), channels.len())));
            }
            if let Some(v) = p.iter().find(|v| !(v.abs() <= 1.0)) {
                return Err(PlantError::InadmissibleSample(format!("box parameter {v} outside [-1, 1]")));
            }
            let mut w = DVector::zeros(d);
            let mut off = 0;
            for (dk, rows) in p.iter().zip(channels) {
                for (j, &r) in rows.iter().enumerate() {
                    w[off + j] = dk * z[r];
                }
                off += rows.len();
            }
            Ok(w)
        }
        Delta::Gain(g) => {
            if g.nrows() != d || g.ncols() != z.len() {
                return Err(PlantError::InadmissibleSample("gain has wrong shape".into()));
            }
            Ok(g * z)
        }
    }
}

pub const LOOP_MAX_ITERS: usize = 100;
pub const LOOP_TOL: f64 = 1e-10;

/// Resolves `w = Delta(g(x, u, w))` by fixed-point iteration from `w0`.
pub fn close_loop_from(
    plant: &dyn GeneralizedPlant,
    x: &DVector<f64>,
    u: &DVector<f64>,
    delta: &Delta,
    w0: DVector<f64>,
) -> Result<DVector<f64>, PlantError> {
    let dims = plant.dims();
    if dims.d == 0 {
        return Ok(DVector::zeros(0));
    }
    let channels = plant.channels();
    let mut w = w0;
    for _ in 0..LOOP_MAX_ITERS {
        let z = plant.uncertainty_output(x, u, &w);
        let next = apply_delta(delta, &z, &channels, dims.d)?;
        let step = (&next - &w).norm();
        w = next;
        if !w.iter().all(|v| v.is_finite()) {
            break;
        }
        if step <= LOOP_TOL * (1.0 + w.norm()) {
            return Ok(w);
        }
    }
    Err(PlantError::WellPosednessFailure(LOOP_MAX_ITERS))
}

pub fn close_loop(plant: &dyn GeneralizedPlant, x: &DVector<f64>, u: &DVector<f64>, delta: &Delta) -> Result<DVector<f64>, PlantError> {
    close_loop_from(plant, x, u, delta, DVector::zeros(plant.dims().d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// No uncertainty channel.
    Skipped,
    Passed { samples: usize },
    Failed { sample: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<PlantError>,
    pub probe: Probe,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty() && !matches!(self.probe, Probe::Failed { .. })
    }

    pub fn into_result(self) -> Result<Self, PlantError> {
        match self.issues.first() {
            Some(e) => Err(e.clone()),
            None => Ok(self),
        }
    }
}

pub const PROBE_SAMPLES: usize = 32;

/// Structural checks plus a sampled well-posedness probe (deterministic for a given seed).
pub fn validate_plant(plant: &dyn GeneralizedPlant, seed: u64) -> ValidationReport {
    let dims = plant.dims();
    let mut issues = Vec::new();
    let mut check = |what: &str, expected: usize, got: usize| {
        if expected != got {
            issues.push(PlantError::DimensionMismatch { what: what.into(), expected, got });
        }
    };
    let (x, u, w) = (DVector::zeros(dims.n), DVector::zeros(dims.m), DVector::zeros(dims.d));
    check("dynamics output", dims.n, plant.dynamics(&x, &u, &w).len());
    check("uncertainty output", dims.l, plant.uncertainty_output(&x, &u, &w).len());
    let vt = plant.terminal_cost();
    check("terminal cost rows", 1 + dims.n, vt.nrows());
    check("terminal cost cols", 1 + dims.n, vt.ncols());
    let channels = plant.channels();
    check("channel sizes", dims.d, channels.iter().map(|c| c.len()).sum());
    if let Some(r) = channels.iter().flatten().find(|&&r| r >= dims.l) {
        issues.push(PlantError::DimensionMismatch { what: "channel output row".into(), expected: dims.l, got: *r + 1 });
    }
    if plant.horizon() == 0 {
        issues.push(PlantError::InvalidHorizon);
    }
    if vt.is_square() && vt.nrows() == 1 + dims.n {
        let asym = (&vt - vt.transpose()).amax();
        if asym > 1e-12 * (1.0 + vt.amax()) {
            issues.push(PlantError::NonSymmetricTerminalCost(asym));
        } else {
            let lo = vt.clone().symmetric_eigenvalues().min();
            if lo < -1e-9 * (1.0 + vt.norm()) {
                issues.push(PlantError::IndefiniteTerminalCost(lo));
            }
        }
    }
    if !issues.is_empty() || dims.d == 0 {
        return ValidationReport { issues, probe: Probe::Skipped };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |k: usize| DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));
    for s in 0..PROBE_SAMPLES {
        let (x, u) = (sym(dims.n), sym(dims.m));
        let delta = Delta::Box(sym(channels.len()).iter().copied().collect());
        let start = sym(dims.d);
        let a = close_loop(plant, &x, &u, &delta);
        let b = close_loop_from(plant, &x, &u, &delta, start);
        let probe = match (a, b) {
            (Ok(a), Ok(b)) if (&a - &b).norm() <= 1e-8 * (1.0 + a.norm()) => continue,
            (Ok(_), Ok(_)) => Probe::Failed { sample: s, reason: "fixed point depends on the starting guess".into() },
            (Err(e), _) | (_, Err(e)) => Probe::Failed { sample: s, reason: e.to_string() },
        };
        return ValidationReport { issues, probe };
    }
    ValidationReport { issues, probe: Probe::Passed { samples: PROBE_SAMPLES } }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// x+ = a x + u + w, z = c x + e w.
    struct Toy {
        c: f64,
        e: f64,
        lbad: bool,
    }

    impl GeneralizedPlant for Toy {
        fn dims(&self) -> Dims {
            Dims { n: 1, m: 1, d: 1, l: 1 }
        }
        fn horizon(&self) -> usize {
            3
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            x * 0.9 + u + w
        }
        fn uncertainty_output(&self, x: &DVector<f64>, _u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            let z = x * self.c + w * self.e;
            if self.lbad {
                DVector::from_vec(vec![z[0], 0.0])
            } else {
                z
            }
        }
        fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            x.norm_squared() + u.norm_squared()
        }
        fn terminal_cost(&self) -> DMatrix<f64> {
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]))
        }
    }

    #[test]
    fn probe_passes_for_contractive_loop() {
        let r = validate_plant(&Toy { c: 0.5, e: 0.5, lbad: false }, 1);
        assert!(r.is_valid(), "{r:?}");
        assert_eq!(r.probe, Probe::Passed { samples: PROBE_SAMPLES });
        assert_eq!(r, validate_plant(&Toy { c: 0.5, e: 0.5, lbad: false }, 1));
    }

    #[test]
    fn probe_fails_for_ill_posed_loop() {
        // |delta e| may exceed one: the iteration w <- delta (c x + e w) diverges.
        let r = validate_plant(&Toy { c: 0.5, e: 3.0, lbad: false }, 1);
        assert!(matches!(r.probe, Probe::Failed { .. }));
    }

    #[test]
    fn wrong_output_length_is_reported() {
        let r = validate_plant(&Toy { c: 0.5, e: 0.0, lbad: true }, 1);
        assert!(matches!(r.clone().into_result(), Err(PlantError::DimensionMismatch { .. })));
        assert!(!r.is_valid());
    }

    #[test]
    fn box_multiplier_single_channel() {
        // z = dx_1 with n = 2, m = 1, d = 1.
        let dims = Dims { n: 2, m: 1, d: 1, l: 1 };
        let out = OutputLinearization {
            z: DVector::zeros(1),
            cx: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            cu: DMatrix::zeros(1, 1),
            cw: DMatrix::zeros(1, 1),
        };
        let set = box_multipliers(&out, dims, &[1], &[vec![0]]).unwrap();
        assert_eq!(set.len(), 1);
        let g = &set.generators[0];
        let mut expect = DMatrix::zeros(5, 5);
        expect[(1, 1)] = 1.0;
        expect[(4, 4)] = -1.0;
        assert_eq!(g, &expect);
    }

    #[test]
    fn box_multipliers_two_channels_are_disjoint() {
        let dims = Dims { n: 2, m: 0, d: 2, l: 2 };
        let out = OutputLinearization {
            z: DVector::zeros(2),
            cx: DMatrix::identity(2, 2),
            cu: DMatrix::zeros(2, 0),
            cw: DMatrix::zeros(2, 2),
        };
        let set = box_multipliers(&out, dims, &[1, 1], &[vec![0], vec![1]]).unwrap();
        assert_eq!(set.len(), 2);
        let prod = set.generators[0].component_mul(&set.generators[1]);
        assert!(prod.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn degenerate_output_still_factors() {
        let dims = Dims { n: 1, m: 0, d: 1, l: 1 };
        let out = OutputLinearization { z: DVector::zeros(1), cx: DMatrix::zeros(1, 1), cu: DMatrix::zeros(1, 0), cw: DMatrix::zeros(1, 1) };
        let set = box_multipliers(&out, dims, &[1], &[vec![0]]).unwrap();
        assert_eq!(set.factors[0].0.nrows(), 0);
    }

    #[test]
    fn multiplier_set_rejects_bad_factors() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let mp = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mm = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        assert!(matches!(MultiplierSet::new(2, vec![g.clone()], vec![(mp.clone(), mm)]), Err(PlantError::FactorMismatch { .. })));
        let dup = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let mm = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(matches!(MultiplierSet::new(2, vec![g.clone()], vec![(dup, mm.clone())]), Err(PlantError::RankDeficientFactor(0))));
        assert!(MultiplierSet::new(2, vec![g], vec![(mp, mm)]).is_ok());
    }

    #[test]
    fn box_delta_rejects_out_of_range() {
        let z = DVector::from_vec(vec![2.0]);
        let ch = vec![vec![0]];
        assert!(apply_delta(&Delta::Box(vec![1.5]), &z, &ch, 1).is_err());
        assert_eq!(apply_delta(&Delta::Box(vec![-0.5]), &z, &ch, 1).unwrap()[0], -1.0);
    }
}
