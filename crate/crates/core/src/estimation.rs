//! Unscented Kalman filter on the augmented state `[b, s, x, mu_max, Ks, c, Y]`.
//!
//! Parameters follow a random walk; the physical states follow the plant
//! model integrated with each sigma point's own parameter values. Biomass and
//! substrate are measured at every sample, DNA only on a sparser schedule, so
//! the measurement map switches between a 2-row and a 3-row selection.

use nalgebra::{Cholesky, DMatrix, SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AugmentedState, ControlInput, Integrator, KineticParams, ModelError, PlantConstants,
    ProcessState,
};

pub const NZ: usize = 7;
pub type ZVec = SVector<f64, NZ>;
pub type ZMat = SMatrix<f64, NZ, NZ>;

/// Lower bound applied to every mean component after an update.
pub const MEAN_FLOOR: f64 = 1e-6;
/// Smallest covariance eigenvalue kept after re-symmetrization.
pub const EIG_FLOOR: f64 = 1e-18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("covariance factorization failed after eigenvalue flooring")]
    Factorization,
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("sigma point propagation failed: {0}")]
    Propagation(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("RMSE window is empty")]
    EmptyWindow,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Spreading parameters of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtConfig {
    fn default() -> Self {
        UtConfig {
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtConfig {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EstimationError::Config(format!(
                "UT alpha = {} must lie in (0, 1]",
                self.alpha
            )));
        }
        if n as f64 + self.lambda(n) <= 0.0 {
            return Err(EstimationError::Config(
                "UT scaling n + lambda must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPoints<const N: usize> {
    pub points: Vec<SVector<f64, N>>,
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
}

fn min_eigenvalue<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    let d = DMatrix::from_column_slice(N, N, m.as_slice());
    d.symmetric_eigenvalues().min()
}

/// Symmetrizes and raises every eigenvalue to at least `floor`.
pub fn condition_covariance<const N: usize>(p: &SMatrix<f64, N, N>, floor: f64) -> SMatrix<f64, N, N> {
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(DMatrix::from_column_slice(N, N, sym.as_slice()));
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    let out = SMatrix::<f64, N, N>::from_column_slice(out.as_slice());
    (out + out.transpose()) * 0.5
}

/// The `2N + 1` points `m`, `m ± col_i(sqrt((N + lambda) P))` and their weights.
pub fn sigma_points<const N: usize>(
    mean: &SVector<f64, N>,
    cov: &SMatrix<f64, N, N>,
    ut: &UtConfig,
) -> Result<SigmaPoints<N>> {
    let lam = ut.lambda(N);
    let scale = N as f64 + lam;
    let root = match Cholesky::new(cov * scale) {
        Some(c) => c.l(),
        None => {
            let max = cov.diagonal().amax().max(f64::MIN_POSITIVE);
            let fixed = condition_covariance(cov, (max * 1e-14).max(EIG_FLOOR));
            Cholesky::new(fixed * scale)
                .ok_or(EstimationError::Factorization)?
                .l()
        }
    };
    let mut points = Vec::with_capacity(2 * N + 1);
    points.push(*mean);
    for i in 0..N {
        points.push(mean + root.column(i));
    }
    for i in 0..N {
        points.push(mean - root.column(i));
    }
    let w = 1.0 / (2.0 * scale);
    let mut wm = vec![w; 2 * N + 1];
    let mut wc = wm.clone();
    wm[0] = lam / scale;
    wc[0] = lam / scale + (1.0 - ut.alpha * ut.alpha + ut.beta);
    Ok(SigmaPoints { points, wm, wc })
}

/// Weighted mean and covariance of a transformed point set.
pub fn weighted_moments<const M: usize>(
    points: &[SVector<f64, M>],
    wm: &[f64],
    wc: &[f64],
) -> (SVector<f64, M>, SMatrix<f64, M, M>) {
    let mean = points
        .iter()
        .zip(wm)
        .fold(SVector::<f64, M>::zeros(), |acc, (p, w)| acc + p * *w);
    let cov = points
        .iter()
        .zip(wc)
        .fold(SMatrix::<f64, M, M>::zeros(), |acc, (p, w)| {
            let d = p - mean;
            acc + d * d.transpose() * *w
        });
    (mean, cov)
}

/// Joint mean and covariance of the augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: ZVec,
    pub cov: ZMat,
}

impl Belief {
    pub fn new(mean: ZVec, cov: ZMat) -> Self {
        Belief { mean, cov }
    }

    /// Filter start: mean at the initial state and nominal parameters; diagonal
    /// covariance with a relative spread on the parameters.
    pub fn initial(xi0: &ProcessState, theta: &KineticParams, prior: &PriorConfig) -> Self {
        let z = AugmentedState::new(*xi0, *theta).to_array();
        let p = theta.to_array();
        let mut d = [0.0; NZ];
        d[..3].copy_from_slice(&prior.state_sd.map(|v| v * v));
        for i in 0..4 {
            d[3 + i] = (prior.param_rel_sd * p[i]).powi(2);
        }
        Belief {
            mean: ZVec::from(z),
            cov: ZMat::from_diagonal(&ZVec::from(d)),
        }
    }

    pub fn augmented(&self) -> AugmentedState {
        AugmentedState::from_array(self.mean.into())
    }

    pub fn theta(&self) -> KineticParams {
        self.augmented().theta
    }

    pub fn xi(&self) -> ProcessState {
        self.augmented().xi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Standard deviations of `[b, s, x]` at the start.
    pub state_sd: [f64; 3],
    /// Parameter standard deviation as a fraction of the nominal value.
    pub param_rel_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            state_sd: [0.5, 0.5, 0.05],
            param_rel_sd: 0.15,
        }
    }
}

/// Process and measurement noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Continuous-time process noise on `[b, s, x]`, scaled by the sampling period.
    pub q_xi: SMatrix<f64, 3, 3>,
    /// Parameter random-walk intensity, scaled by the sampling period.
    pub q_theta: SMatrix<f64, 4, 4>,
    pub r_full: SMatrix<f64, 3, 3>,
    pub r_partial: SMatrix<f64, 2, 2>,
    /// Relative measurement standard deviations; when set, `diag((rel * y_pred)^2)`
    /// is added to the fixed `R` at every update.
    pub r_relative: Option<[f64; 3]>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::from_diagonals(
            [1e-6, 1e-6, 1e-8],
            [1e-8, 1e-10, 1e-10, 1e-8],
            [1e-6, 1e-8, 1e-8],
            Some([0.02, 0.02, 0.05]),
        )
    }
}

impl NoiseConfig {
    pub fn from_diagonals(
        q_xi: [f64; 3],
        q_theta: [f64; 4],
        r: [f64; 3],
        r_relative: Option<[f64; 3]>,
    ) -> Self {
        NoiseConfig {
            q_xi: SMatrix::<f64, 3, 3>::from_diagonal(&q_xi.into()),
            q_theta: SMatrix::<f64, 4, 4>::from_diagonal(&q_theta.into()),
            r_full: SMatrix::<f64, 3, 3>::from_diagonal(&r.into()),
            r_partial: SMatrix::<f64, 2, 2>::from_diagonal(&[r[0], r[1]].into()),
            r_relative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn psd<const N: usize>(m: &SMatrix<f64, N, N>, strict: bool) -> bool {
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return false;
            }
            let min = min_eigenvalue(m);
            if strict {
                min > 0.0
            } else {
                min >= -1e-15
            }
        }
        let rel_ok = self
            .r_relative
            .map_or(true, |r| r.iter().all(|v| v.is_finite() && *v >= 0.0));
        if psd(&self.q_xi, false)
            && psd(&self.q_theta, false)
            && psd(&self.r_full, true)
            && psd(&self.r_partial, true)
            && rel_ok
        {
            Ok(())
        } else {
            Err(EstimationError::Config(
                "Q must be symmetric PSD and R symmetric positive definite".into(),
            ))
        }
    }

    fn process(&self) -> ZMat {
        let mut q = ZMat::zeros();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.q_xi);
        q.fixed_view_mut::<4, 4>(3, 3).copy_from(&self.q_theta);
        q
    }
}

/// One sample of the plant outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    /// `[b, s, x]`.
    Full(SVector<f64, 3>),
    /// `[b, s]`.
    Partial(SVector<f64, 2>),
}

impl Measurement {
    pub fn from_state(xi: &ProcessState, with_dna: bool) -> Self {
        if with_dna {
            Measurement::Full(SVector::<f64, 3>::new(xi.b, xi.s, xi.x))
        } else {
            Measurement::Partial(SVector::<f64, 2>::new(xi.b, xi.s))
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Measurement::Full(_))
    }
}

/// Sampling period and DNA measurement interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementSchedule {
    pub ts: f64,
    pub dna_period: f64,
}

impl Default for MeasurementSchedule {
    fn default() -> Self {
        MeasurementSchedule {
            ts: 0.75,
            dna_period: 6.0,
        }
    }
}

impl MeasurementSchedule {
    pub fn new(ts: f64, dna_period: f64) -> Result<Self> {
        let s = MeasurementSchedule { ts, dna_period };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(EstimationError::Config("Ts must be positive".into()));
        }
        let ratio = self.dna_period / self.ts;
        if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(EstimationError::Config(format!(
                "DNA period {} is not a positive integer multiple of Ts = {}",
                self.dna_period, self.ts
            )));
        }
        Ok(())
    }

    /// Samples between two DNA measurements.
    pub fn dna_every(&self) -> usize {
        (self.dna_period / self.ts).round() as usize
    }

    pub fn dna_measured(&self, k_index: usize) -> bool {
        k_index % self.dna_every() == 0
    }
}

/// Time update over one sampling period.
pub fn predict(
    belief: &Belief,
    u: &ControlInput,
    noise: &NoiseConfig,
    ut: &UtConfig,
    k: &PlantConstants,
    ts: f64,
    integrator: &Integrator,
) -> Result<Belief> {
    let sp = sigma_points(&belief.mean, &belief.cov, ut)?;
    let mut moved = Vec::with_capacity(sp.points.len());
    for z in &sp.points {
        let a = AugmentedState::from_array((*z).into());
        // sigma points can leave the physical domain; the model sees the projection
        let xi = ProcessState::from_array(a.xi.to_array().map(|v| v.max(0.0)));
        let theta = KineticParams::from_array(a.theta.to_array().map(|v| v.max(MEAN_FLOOR)));
        let next = integrator.advance(&xi, u, &theta, k, ts)?.state;
        let mut out = *z;
        out.fixed_rows_mut::<3>(0)
            .copy_from(&SVector::<f64, 3>::from(next.to_array()));
        moved.push(out);
    }
    let (mean, cov) = weighted_moments(&moved, &sp.wm, &sp.wc);
    let cov = condition_covariance(&(cov + noise.process() * ts), EIG_FLOOR);
    Ok(Belief { mean, cov })
}

/// Diagnostics of a measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub belief: Belief,
    /// Normalized innovation squared.
    pub nis: f64,
    /// Number of measured channels.
    pub dim: usize,
}

fn update_dim<const M: usize>(
    belief: &Belief,
    y: &SVector<f64, M>,
    r_fixed: &SMatrix<f64, M, M>,
    rel: Option<[f64; 3]>,
    ut: &UtConfig,
) -> Result<UpdateReport> {
    let sp = sigma_points(&belief.mean, &belief.cov, ut)?;
    let ys: Vec<SVector<f64, M>> = sp
        .points
        .iter()
        .map(|z| SVector::<f64, M>::from_fn(|i, _| z[i]))
        .collect();
    let (y_pred, pyy) = weighted_moments(&ys, &sp.wm, &sp.wc);
    let mut r = *r_fixed;
    if let Some(rel) = rel {
        for i in 0..M {
            r[(i, i)] += (rel[i] * y_pred[i]).powi(2);
        }
    }
    let s = pyy + r;
    let pzy = sp
        .points
        .iter()
        .zip(&ys)
        .zip(&sp.wc)
        .fold(SMatrix::<f64, NZ, M>::zeros(), |acc, ((z, yy), w)| {
            acc + (z - belief.mean) * (yy - y_pred).transpose() * *w
        });
    let s_inv = Cholesky::new((s + s.transpose()) * 0.5)
        .map(|c| c.inverse())
        .ok_or(EstimationError::SingularInnovation)?;
    let gain = pzy * s_inv;
    let innov = y - y_pred;
    let nis = (innov.transpose() * s_inv * innov)[(0, 0)];
    let mean = (belief.mean + gain * innov).map(|v| v.max(MEAN_FLOOR));
    let cov = condition_covariance(&(belief.cov - gain * s * gain.transpose()), EIG_FLOOR);
    Ok(UpdateReport {
        belief: Belief { mean, cov },
        nis,
        dim: M,
    })
}

/// Measurement update with the selection matrix implied by `y`.
pub fn update(
    belief: &Belief,
    y: &Measurement,
    noise: &NoiseConfig,
    ut: &UtConfig,
) -> Result<UpdateReport> {
    match y {
        Measurement::Full(v) => update_dim(belief, v, &noise.r_full, noise.r_relative, ut),
        Measurement::Partial(v) => update_dim(belief, v, &noise.r_partial, noise.r_relative, ut),
    }
}

/// Everything the filter needs besides the belief and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSetup {
    pub schedule: MeasurementSchedule,
    pub noise: NoiseConfig,
    pub ut: UtConfig,
    pub constants: PlantConstants,
    pub integrator: Integrator,
}

/// Predict with the previously applied input, then update with whatever is measured at `k_index`.
///
/// `y` carries all three channels; the DNA channel is dropped unless the
/// schedule says it was measured at this sample.
pub fn estimate_step(
    belief: &Belief,
    u: &ControlInput,
    y: &ProcessState,
    k_index: usize,
    setup: &FilterSetup,
) -> Result<UpdateReport> {
    let prior = predict(
        belief,
        u,
        &setup.noise,
        &setup.ut,
        &setup.constants,
        setup.schedule.ts,
        &setup.integrator,
    )?;
    let meas = Measurement::from_state(y, setup.schedule.dna_measured(k_index));
    update(&prior, &meas, &setup.noise, &setup.ut)
}

/// Root mean square deviation over indices `from..`.
pub fn rmse(truth: &[f64], est: &[f64], from: usize) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(EstimationError::LengthMismatch(truth.len(), est.len()));
    }
    if from >= truth.len() {
        return Err(EstimationError::EmptyWindow);
    }
    let n = truth.len() - from;
    let ss: f64 = truth[from..]
        .iter()
        .zip(&est[from..])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix1, Vector1};

    fn setup() -> FilterSetup {
        FilterSetup {
            schedule: MeasurementSchedule::default(),
            noise: NoiseConfig::default(),
            ut: UtConfig::default(),
            constants: PlantConstants::default(),
            integrator: Integrator::default(),
        }
    }

    fn nominal_belief(xi: ProcessState) -> Belief {
        Belief::initial(&xi, &KineticParams::NOMINAL, &PriorConfig::default())
    }

    #[test]
    fn scalar_sigma_points_by_hand() {
        let ut = UtConfig {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        };
        let sp = sigma_points(&Vector1::new(0.0), &Matrix1::new(1.0), &ut).unwrap();
        let pts: Vec<f64> = sp.points.iter().map(|p| p[0]).collect();
        assert_eq!(pts, vec![0.0, 1.0, -1.0]);
        assert_eq!(sp.wm, vec![0.0, 0.5, 0.5]);
        assert_abs_diff_eq!(sp.wc[0], 2.0);
    }

    #[test]
    fn diagonal_covariance_moves_one_axis_at_a_time() {
        let ut = UtConfig::default();
        let d = [0.25, 0.04, 1e-4, 1e-3, 1e-6, 1e-6, 1e-4];
        let b = nominal_belief(ProcessState::new(1.0, 20.0, 0.0));
        let cov = ZMat::from_diagonal(&ZVec::from(d));
        let sp = sigma_points(&b.mean, &cov, &ut).unwrap();
        let scale = NZ as f64 + ut.lambda(NZ);
        for i in 0..NZ {
            let delta = sp.points[1 + i] - b.mean;
            for j in 0..NZ {
                if j == i {
                    assert_abs_diff_eq!(delta[j], (scale * d[i]).sqrt(), epsilon = 1e-14);
                } else {
                    assert_eq!(delta[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn schedule_selects_dna_samples() {
        let s = MeasurementSchedule::default();
        assert_eq!(s.dna_every(), 8);
        assert!(s.dna_measured(8)); // t = 6 h
        assert!(!s.dna_measured(1)); // t = 0.75 h
        assert!(s.dna_measured(0));
        assert!(MeasurementSchedule::new(0.75, 1.0).is_err());
        assert!(MeasurementSchedule::new(0.75, 0.0).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], 0).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5], 0).unwrap(), 0.5);
        assert_abs_diff_eq!(
            rmse(&[0.0, 1.0], &[1.0, 1.0], 0).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(rmse(&[1.0], &[1.0], 1), Err(EstimationError::EmptyWindow));
        assert!(rmse(&[1.0], &[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let b = nominal_belief(ProcessState::new(3.0, 5.0, 0.1));
        let y = Measurement::from_state(&b.xi(), true);
        let rep = update(&b, &y, &NoiseConfig::default(), &UtConfig::default()).unwrap();
        for i in 0..NZ {
            assert_abs_diff_eq!(rep.belief.mean[i], b.mean[i], epsilon = 1e-10);
        }
        let diff = b.cov - rep.belief.cov;
        assert!(min_eigenvalue(&diff) > -1e-12);
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let b = nominal_belief(ProcessState::new(3.0, 5.0, 0.1));
        let mut noise = NoiseConfig::default();
        noise.r_relative = None;
        noise.r_full = noise.r_full * 1e6 + SMatrix::<f64, 3, 3>::identity() * 1e6;
        let y = Measurement::from_state(&ProcessState::new(3.3, 5.2, 0.12), true);
        let rep = update(&b, &y, &noise, &UtConfig::default()).unwrap();
        for i in 0..NZ {
            assert!((rep.belief.mean[i] - b.mean[i]).abs() <= 1e-4 * b.mean[i].abs());
        }
        assert!(((rep.belief.cov - b.cov).amax() / b.cov.amax()) < 1e-4);
    }

    #[test]
    fn predict_holds_equilibrium_without_noise() {
        let s = setup();
        let xi = ProcessState::new(0.0, 20.0, 0.0);
        let mut b = nominal_belief(xi);
        b.cov = ZMat::identity() * 1e-20;
        let mut noise = NoiseConfig::default();
        noise.q_xi = SMatrix::zeros();
        noise.q_theta = SMatrix::zeros();
        let p = predict(
            &b,
            &ControlInput::new(0.2, false),
            &noise,
            &s.ut,
            &s.constants,
            0.75,
            &s.integrator,
        )
        .unwrap();
        for i in 0..NZ {
            assert_abs_diff_eq!(p.mean[i], b.mean[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn predict_keeps_parameters_without_cross_terms() {
        let s = setup();
        let b = nominal_belief(ProcessState::new(2.0, 10.0, 0.05));
        let mut noise = NoiseConfig::default();
        noise.q_theta = SMatrix::zeros();
        let p = predict(
            &b,
            &ControlInput::new(0.3, true),
            &noise,
            &s.ut,
            &s.constants,
            0.75,
            &s.integrator,
        )
        .unwrap();
        for i in 3..NZ {
            assert_abs_diff_eq!(p.mean[i], b.mean[i], epsilon = 1e-12 * b.mean[i]);
        }
    }

    #[test]
    fn frozen_dynamics_add_exactly_the_noise() {
        // b = 0 and D = 0: nothing moves, so the trace grows by trace(Q) * Ts
        let s = setup();
        let mut b = nominal_belief(ProcessState::new(0.0, 5.0, 0.1));
        b.cov = ZMat::from_diagonal(&ZVec::from([1e-20, 1e-4, 1e-4, 1e-4, 1e-8, 1e-8, 1e-4]));
        let noise = NoiseConfig::default();
        let p = predict(
            &b,
            &ControlInput::new(0.0, false),
            &noise,
            &s.ut,
            &s.constants,
            0.75,
            &s.integrator,
        )
        .unwrap();
        let expected = b.cov.trace() + noise.process().trace() * 0.75;
        assert!(p.cov.trace() > b.cov.trace());
        assert_abs_diff_eq!(p.cov.trace(), expected, epsilon = 1e-12);
    }

    #[test]
    fn partial_update_moves_less_than_full() {
        let b = nominal_belief(ProcessState::new(3.0, 5.0, 0.1));
        let ut = UtConfig::default();
        let mut noise = NoiseConfig::default();
        noise.r_relative = None;
        let truth = ProcessState::new(3.2, 4.8, 0.1);
        let full = update(&b, &Measurement::from_state(&truth, true), &noise, &ut).unwrap();
        let partial = update(&b, &Measurement::from_state(&truth, false), &noise, &ut).unwrap();
        // x innovation is zero, so the full update only adds information
        assert!(full.belief.cov.trace() <= partial.belief.cov.trace());
        let mut x_silent = noise.clone();
        x_silent.r_full[(2, 2)] = 1e12;
        let silent = update(&b, &Measurement::from_state(&truth, true), &x_silent, &ut).unwrap();
        for i in 0..NZ {
            assert_abs_diff_eq!(silent.belief.mean[i], partial.belief.mean[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn estimate_step_picks_measurement_size() {
        let s = setup();
        let b = nominal_belief(ProcessState::new(1.0, 20.0, 0.0));
        let u = ControlInput::new(0.2, true);
        let y = ProcessState::new(1.1, 19.5, 0.01);
        assert_eq!(estimate_step(&b, &u, &y, 8, &s).unwrap().dim, 3);
        assert_eq!(estimate_step(&b, &u, &y, 1, &s).unwrap().dim, 2);
    }

    #[test]
    fn config_validation() {
        assert!(UtConfig::default().validate(NZ).is_ok());
        assert!(UtConfig {
            alpha: 0.0,
            ..UtConfig::default()
        }
        .validate(NZ)
        .is_err());
        assert!(NoiseConfig::default().validate().is_ok());
        let mut bad = NoiseConfig::default();
        bad.r_partial[(0, 0)] = 0.0;
        bad.r_partial[(1, 1)] = 0.0;
        assert!(bad.validate().is_err());
    }
}
