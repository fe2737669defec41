//! Local observability of the augmented system.
//!
//! With outputs `h1 = b` and `h2 = s`, the observability matrix stacks the
//! gradients of the Lie derivatives `L_f^j h_i`, `j = 0..=4`, along the
//! drift of `[b, s, x, mu_max, Ks, c, Y]` with the parameters held constant.
//!
//! The Lie derivatives are the time derivatives of `h` along the flow, so
//! `L_f^j h = j! * [t^j] h(z(t))`. The Taylor coefficients of the trajectory
//! are generated by propagating truncated power series through the drift,
//! with every coefficient carried as a value plus its exact gradient with
//! respect to the initial point. Row entries are therefore exact up to
//! rounding.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AugmentedState, ControlInput, KineticParams, PlantConstants};

pub const NZ: usize = 7;
/// Highest Lie derivative order.
pub const ORDER: usize = 4;
pub const N_ROWS: usize = 2 * (ORDER + 1);
pub const DEFAULT_TOL_RATIO: f64 = 1e-8;

pub type ObsMatrix = SMatrix<f64, N_ROWS, NZ>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservabilityError {
    #[error("non-finite Lie derivative at {0:?}")]
    NonFinite(AugmentedState),
    #[error("invalid ranges: {0}")]
    Ranges(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub z: AugmentedState,
    pub u: ControlInput,
}

/// Value and gradient with respect to the augmented state.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dual {
    v: f64,
    g: [f64; NZ],
}

impl Dual {
    const ZERO: Dual = Dual { v: 0.0, g: [0.0; NZ] };

    fn constant(v: f64) -> Dual {
        Dual { v, g: [0.0; NZ] }
    }

    fn variable(v: f64, i: usize) -> Dual {
        let mut g = [0.0; NZ];
        g[i] = 1.0;
        Dual { v, g }
    }

    fn scale(self, a: f64) -> Dual {
        Dual {
            v: a * self.v,
            g: self.g.map(|x| a * x),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            g: std::array::from_fn(|i| self.g[i] + o.g[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            g: std::array::from_fn(|i| self.g[i] - o.g[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            g: std::array::from_fn(|i| self.v * o.g[i] + o.v * self.g[i]),
        }
    }
}

const NC: usize = ORDER + 1;

/// Power series in `t` truncated after `t^ORDER`, with dual coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Jet([Dual; NC]);

impl Jet {
    fn constant(c: Dual) -> Jet {
        let mut a = [Dual::ZERO; NC];
        a[0] = c;
        Jet(a)
    }

    fn scalar(v: f64) -> Jet {
        Jet::constant(Dual::constant(v))
    }

    fn scale(self, a: f64) -> Jet {
        Jet(self.0.map(|d| d.scale(a)))
    }

    fn div(self, o: Jet) -> Jet {
        let b0 = o.0[0];
        let mut q = [Dual::ZERO; NC];
        for k in 0..NC {
            let mut r = self.0[k];
            for j in 0..k {
                r = r - q[j] * o.0[k - j];
            }
            let v = r.v / b0.v;
            q[k] = Dual {
                v,
                g: std::array::from_fn(|i| (r.g[i] - v * b0.g[i]) / b0.v),
            };
        }
        Jet(q)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet(std::array::from_fn(|k| self.0[k] + o.0[k]))
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet(std::array::from_fn(|k| self.0[k] - o.0[k]))
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet(std::array::from_fn(|k| {
            (0..=k).fold(Dual::ZERO, |acc, j| acc + self.0[j] * o.0[k - j])
        }))
    }
}

/// Drift of the augmented system on jets.
fn drift(z: &[Jet; NZ], u: &ControlInput, k: &PlantConstants) -> [Jet; NZ] {
    let [b, s, x, mu_max, ks, c, y] = *z;
    let one = Jet::scalar(1.0);
    let d = u.dilution;
    let mu = (mu_max * s).div(ks + s) * (one - x.scale(1.0 / k.x_crit));
    let d_rec = Jet::scalar(d * (k.s_in - k.s_h)).div(s - Jet::scalar(k.s_h));
    let growth = mu * b;
    let zero = Jet::scalar(0.0);
    [
        growth - b.scale(d),
        zero - growth.div(y) + (Jet::scalar(k.s_in) - s).scale(d),
        c * growth - (Jet::scalar(d) - d_rec) * x - x.scale(u.delta() * k.d_f * k.alpha),
        zero,
        zero,
        zero,
        zero,
    ]
}

/// Gradients of `L_f^j h_i`; row `i * 5 + j` holds output `i` (`b`, then `s`) at order `j`.
pub fn lie_rows(p: &OperatingPoint, k: &PlantConstants) -> Result<ObsMatrix, ObservabilityError> {
    let z0 = p.z.to_array();
    let mut z: [Jet; NZ] = std::array::from_fn(|i| Jet::constant(Dual::variable(z0[i], i)));
    for order in 0..ORDER {
        let f = drift(&z, &p.u, k);
        for i in 0..NZ {
            z[i].0[order + 1] = f[i].0[order].scale(1.0 / (order + 1) as f64);
        }
    }
    let mut m = ObsMatrix::zeros();
    let mut factorial = 1.0;
    for j in 0..=ORDER {
        if j > 0 {
            factorial *= j as f64;
        }
        for (i, state) in [0usize, 1].into_iter().enumerate() {
            let coef = z[state].0[j];
            for col in 0..NZ {
                m[(i * NC + j, col)] = factorial * coef.g[col];
            }
        }
    }
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(ObservabilityError::NonFinite(p.z))
    }
}

/// Closed-form `d(L_f h1)/dx`, `d(L_f h2)/dY` and `d(L_f^2 h1)/dc`.
pub fn analytic_partials(p: &OperatingPoint, k: &PlantConstants) -> [f64; 3] {
    let AugmentedState { xi, theta } = p.z;
    let (b, s, x) = (xi.b, xi.s, xi.x);
    let KineticParams { mu_max, ks, y, .. } = theta;
    let xc = k.x_crit;
    let sat = s / (ks + s);
    [
        -mu_max * sat * b / xc,
        mu_max * sat * (xc - x) * b / (y * y * xc),
        -mu_max * mu_max * sat * sat * (xc - x) * b * b / (xc * xc),
    ]
}

/// Matrix entries that the closed forms above evaluate, in the same order.
pub fn oracle_entries(m: &ObsMatrix) -> [f64; 3] {
    [m[(1, 2)], m[(NC + 1, 6)], m[(2, 5)]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub rank: usize,
    /// Singular values in decreasing order.
    pub singular_values: Vec<f64>,
}

impl RankResult {
    /// Smallest over largest singular value.
    pub fn ratio(&self) -> f64 {
        match (self.singular_values.first(), self.singular_values.last()) {
            (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
            _ => 0.0,
        }
    }
}

/// Rank as the number of singular values above `tol_ratio` times the largest.
pub fn rank_of(m: &DMatrix<f64>, tol_ratio: f64) -> RankResult {
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|&&v| v / top > tol_ratio).count()
    } else {
        0
    };
    RankResult {
        rank,
        singular_values: sv,
    }
}

pub fn rank_at(p: &OperatingPoint, k: &PlantConstants, tol_ratio: f64) -> Result<RankResult, ObservabilityError> {
    let m = lie_rows(p, k)?;
    Ok(rank_of(&DMatrix::from_column_slice(N_ROWS, NZ, m.as_slice()), tol_ratio))
}

/// Sampling box for operating points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRanges {
    pub b: [f64; 2],
    pub s: [f64; 2],
    pub x: [f64; 2],
    pub dilution: [f64; 2],
    /// Half-width of the parameter box, as a fraction of `theta_nominal`.
    pub theta_frac: f64,
    pub theta_nominal: KineticParams,
}

impl SampleRanges {
    pub fn default_for(k: &PlantConstants, theta_nominal: KineticParams) -> Self {
        SampleRanges {
            b: [0.1, 8.0],
            s: [1e-3, k.s_in],
            x: [0.0, 0.9 * k.x_crit],
            dilution: [0.05, k.d_max],
            theta_frac: 0.15,
            theta_nominal,
        }
    }

    pub fn validate(&self, k: &PlantConstants) -> Result<(), ObservabilityError> {
        let bad = |m: &str| Err(ObservabilityError::Ranges(m.to_string()));
        for (name, r, lo_min) in [("b", self.b, 0.0), ("s", self.s, 0.0), ("x", self.x, 0.0), ("dilution", self.dilution, 0.0)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] >= lo_min && r[0] <= r[1]) {
                return bad(&format!("{name} range {r:?}"));
            }
        }
        if self.x[1] >= k.x_crit {
            return bad("x range must stay below x_crit");
        }
        if self.s[1] > k.s_in || self.dilution[1] > k.d_max {
            return bad("s or D range exceeds plant limits");
        }
        if !(0.0..1.0).contains(&self.theta_frac) {
            return bad("theta_frac must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> OperatingPoint {
        let mut u = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.gen::<f64>();
        let b = u(self.b);
        let s = u(self.s);
        let x = u(self.x);
        let d = u(self.dilution);
        let f: [f64; 4] = std::array::from_fn(|_| u([-self.theta_frac, self.theta_frac]));
        let filter = rng.gen::<bool>();
        OperatingPoint {
            z: AugmentedState::new(
                crate::model::ProcessState::new(b, s, x),
                self.theta_nominal.perturbed(f),
            ),
            u: ControlInput::new(d, filter),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point_index: usize,
    pub rank: usize,
    pub sigma_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub points_tested: usize,
    pub full_rank_count: usize,
    /// Smallest `sigma_7 / sigma_1` over all evaluated points.
    pub min_singular_value_ratio: f64,
    /// Indices of points below full rank or with a fault.
    pub deficient_points: Vec<usize>,
    pub points: Vec<PointResult>,
}

impl RankReport {
    pub fn summary_line(&self) -> String {
        format!(
            "points_tested={} full_rank={} deficient={} min_sigma_ratio={:e}",
            self.points_tested,
            self.full_rank_count,
            self.deficient_points.len(),
            self.min_singular_value_ratio
        )
    }
}

/// Ranks at `n_points` uniformly sampled points. Faulted points count as deficient.
pub fn rank_campaign(
    n_points: usize,
    ranges: &SampleRanges,
    seed: u64,
    k: &PlantConstants,
    tol_ratio: f64,
) -> Result<RankReport, ObservabilityError> {
    if n_points == 0 {
        return Err(ObservabilityError::Ranges("n_points must be at least 1".into()));
    }
    ranges.validate(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<OperatingPoint> = (0..n_points).map(|_| ranges.sample(&mut rng)).collect();
    let points: Vec<PointResult> = pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| match rank_at(p, k, tol_ratio) {
            Ok(r) => PointResult {
                point_index: i,
                rank: r.rank,
                sigma_ratio: r.ratio(),
            },
            Err(_) => PointResult {
                point_index: i,
                rank: 0,
                sigma_ratio: f64::NAN,
            },
        })
        .collect();
    let full_rank_count = points.iter().filter(|p| p.rank == NZ).count();
    Ok(RankReport {
        points_tested: n_points,
        full_rank_count,
        min_singular_value_ratio: points
            .iter()
            .map(|p| p.sigma_ratio)
            .filter(|r| r.is_finite())
            .fold(f64::INFINITY, f64::min),
        deficient_points: points.iter().filter(|p| p.rank < NZ).map(|p| p.point_index).collect(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derivatives, ProcessState};

    fn point(b: f64, s: f64, x: f64, theta: KineticParams, d: f64, filter: bool) -> OperatingPoint {
        OperatingPoint {
            z: AugmentedState::new(ProcessState::new(b, s, x), theta),
            u: ControlInput::new(d, filter),
        }
    }

    fn k() -> PlantConstants {
        PlantConstants::default()
    }

    #[test]
    fn zeroth_order_rows_are_unit_vectors() {
        let m = lie_rows(&point(5.0, 0.3, 0.1, KineticParams::NOMINAL, 0.2, true), &k()).unwrap();
        for col in 0..NZ {
            assert_eq!(m[(0, col)], if col == 0 { 1.0 } else { 0.0 });
            assert_eq!(m[(NC, col)], if col == 1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn first_order_rows_match_drift_jacobian() {
        let p = point(3.0, 0.7, 0.2, KineticParams::NOMINAL, 0.3, true);
        let m = lie_rows(&p, &k()).unwrap();
        let f = |z: [f64; 7]| {
            let a = AugmentedState::from_array(z);
            derivatives(&a.xi, &p.u, &a.theta, &k()).unwrap()
        };
        let z0 = p.z.to_array();
        for col in 0..NZ {
            let h = 1e-6 * z0[col].abs().max(1e-3);
            let mut zp = z0;
            let mut zm = z0;
            zp[col] += h;
            zm[col] -= h;
            let (fp, fm) = (f(zp), f(zm));
            for (row, state) in [(1, 0), (NC + 1, 1)] {
                let fd = (fp[state] - fm[state]) / (2.0 * h);
                assert!((m[(row, col)] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{row},{col}");
            }
        }
    }

    #[test]
    fn worked_entries() {
        let th = KineticParams::NOMINAL;
        let m = lie_rows(&point(5.0, th.ks, 0.0, th, 0.2, false), &k()).unwrap();
        let expect = -th.mu_max * 0.5 * 5.0 / 0.48;
        assert!((m[(1, 2)] / expect - 1.0).abs() < 1e-3);
        assert!((expect + 2.4271).abs() < 1e-4);
        let (b, s) = (5.0, 0.4);
        let m = lie_rows(&point(b, s, 0.0, th, 0.2, false), &k()).unwrap();
        let expect = th.mu_max * s * b / (th.y * th.y * (th.ks + s));
        assert!((m[(NC + 1, 6)] / expect - 1.0).abs() < 1e-3);
    }

    #[test]
    fn analytic_degenerate_cases() {
        let th = KineticParams::NOMINAL;
        assert_eq!(analytic_partials(&point(0.0, 1.0, 0.1, th, 0.2, true), &k()).map(f64::abs), [0.0; 3]);
        let a = analytic_partials(&point(2.0, 1.0, k().x_crit, th, 0.2, true), &k());
        assert_eq!(a[1], 0.0);
        assert_eq!(a[2].abs(), 0.0);
    }

    #[test]
    fn oracle_agreement_on_random_points() {
        let ranges = SampleRanges::default_for(&k(), KineticParams::NOMINAL);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = ranges.sample(&mut rng);
            let num = oracle_entries(&lie_rows(&p, &k()).unwrap());
            let ana = analytic_partials(&p, &k());
            for (n, a) in num.iter().zip(&ana) {
                assert!((n - a).abs() <= 1e-6 * a.abs(), "{n} vs {a}");
            }
        }
    }

    #[test]
    fn rank_cases() {
        let th = KineticParams::NOMINAL;
        let r = rank_at(&point(4.0, 0.5, 0.1, th, 0.2, true), &k(), DEFAULT_TOL_RATIO).unwrap();
        assert_eq!(r.rank, 7);
        let r = rank_at(&point(1e-12, 0.5, 0.1, th, 0.2, true), &k(), DEFAULT_TOL_RATIO).unwrap();
        assert!(r.rank < 7);

        let m = lie_rows(&point(4.0, 0.5, 0.1, th, 0.2, true), &k()).unwrap();
        let mut d = DMatrix::from_column_slice(N_ROWS, NZ, m.as_slice());
        let full = rank_of(&d, DEFAULT_TOL_RATIO);
        assert_eq!(rank_of(&(d.clone() * 1e6), DEFAULT_TOL_RATIO).rank, full.rank);
        // keep only six independent rows and duplicate one of them
        let row = d.row(3).clone_owned();
        for i in 6..N_ROWS {
            d.set_row(i, &row);
        }
        assert!(rank_of(&d, DEFAULT_TOL_RATIO).rank <= 6);
    }

    #[test]
    fn campaign_determinism_and_degenerate_box() {
        let ranges = SampleRanges::default_for(&k(), KineticParams::NOMINAL);
        assert!(rank_campaign(0, &ranges, 1, &k(), DEFAULT_TOL_RATIO).is_err());
        let a = rank_campaign(50, &ranges, 9, &k(), DEFAULT_TOL_RATIO).unwrap();
        let b = rank_campaign(50, &ranges, 9, &k(), DEFAULT_TOL_RATIO).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.full_rank_count, 50);
        let dead = SampleRanges { b: [0.0, 0.0], ..ranges };
        let r = rank_campaign(20, &dead, 9, &k(), DEFAULT_TOL_RATIO).unwrap();
        assert_eq!(r.full_rank_count, 0);
        assert_eq!(r.deficient_points.len(), 20);
    }
}
