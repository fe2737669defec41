//! Offline least-squares estimation of the kinetic parameters from
//! trajectory data of the plain chemostat (no recirculation, filter off).

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KineticParams, PlantConstants, ProcessState};

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("invalid fit setup: {0}")]
    Setup(String),
    #[error("integration produced a non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, IdentError>;

/// Measured trajectory. Missing samples are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub b: Vec<Option<f64>>,
    pub s: Vec<Option<f64>>,
    pub x: Vec<Option<f64>>,
    pub xi0: ProcessState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DataRow {
    t: f64,
    b: Option<f64>,
    s: Option<f64>,
    x: Option<f64>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IdentError {
    IdentError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

impl Dataset {
    pub fn new(
        times: Vec<f64>,
        b: Vec<Option<f64>>,
        s: Vec<Option<f64>>,
        x: Vec<Option<f64>>,
        xi0: ProcessState,
    ) -> Result<Self> {
        let d = Dataset { times, b, s, x, xi0 };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn channels(&self) -> [&Vec<Option<f64>>; 3] {
        [&self.b, &self.s, &self.x]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IdentError::Dataset(m));
        let n = self.times.len();
        if n < 4 {
            return bad(format!("{n} rows, at least 4 required"));
        }
        if self.channels().iter().any(|c| c.len() != n) {
            return bad("channel lengths differ from the time vector".into());
        }
        if self.times.iter().any(|t| !t.is_finite()) || self.times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("times must be finite and strictly increasing".into());
        }
        if self.times[0] < 0.0 {
            return bad("times must start at or after 0".into());
        }
        for c in self.channels() {
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return bad("non-finite measurement".into());
            }
        }
        let xi = self.xi0.to_array();
        if xi.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad(format!("initial state {:?} must be nonnegative", self.xi0));
        }
        if self.channels().iter().all(|c| c.iter().all(Option::is_none)) {
            return bad("no measurements".into());
        }
        Ok(())
    }

    /// Per-channel maximum absolute measurement; `None` for unmeasured channels.
    pub fn channel_scales(&self) -> [Option<f64>; 3] {
        self.channels().map(|c| {
            c.iter()
                .flatten()
                .map(|v| v.abs())
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                .filter(|m| *m > 0.0)
        })
    }

    pub fn observation_count(&self) -> usize {
        let scales = self.channel_scales();
        self.channels()
            .iter()
            .zip(scales)
            .filter(|(_, s)| s.is_some())
            .map(|(c, _)| c.iter().flatten().count())
            .sum()
    }

    /// Reads `t, b, s, x` with empty cells as missing. Without `xi0`, the
    /// first row must be complete and is taken as the initial state.
    pub fn read_csv(path: &Path, xi0: Option<ProcessState>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        let rows: Vec<DataRow> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| io_err(path, e))?;
        let xi0 = match (xi0, rows.first()) {
            (Some(x), _) => x,
            (None, Some(DataRow { b: Some(b), s: Some(s), x: Some(x), .. })) => ProcessState::new(*b, *s, *x),
            _ => {
                return Err(IdentError::Dataset(format!(
                    "{}: first row incomplete and no initial state given",
                    path.display()
                )))
            }
        };
        Dataset::new(
            rows.iter().map(|r| r.t).collect(),
            rows.iter().map(|r| r.b).collect(),
            rows.iter().map(|r| r.s).collect(),
            rows.iter().map(|r| r.x).collect(),
            xi0,
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        for i in 0..self.len() {
            w.serialize(DataRow {
                t: self.times[i],
                b: self.b[i],
                s: self.s[i],
                x: self.x[i],
            })
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Piecewise-constant dilution given as `(t, D)` breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DProfile {
    pub breakpoints: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ProfileRow {
    t: f64,
    #[serde(rename = "D")]
    d: f64,
}

impl DProfile {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(IdentError::Dataset("empty D profile".into()));
        }
        if breakpoints.windows(2).any(|w| w[1].0 <= w[0].0)
            || breakpoints.iter().any(|(t, d)| !t.is_finite() || !d.is_finite() || *d < 0.0)
        {
            return Err(IdentError::Dataset(
                "D profile needs increasing times and nonnegative rates".into(),
            ));
        }
        Ok(DProfile { breakpoints })
    }

    pub fn constant(d: f64) -> Self {
        DProfile {
            breakpoints: vec![(0.0, d)],
        }
    }

    /// Rate in force at `t`; the first rate also applies before the first breakpoint.
    pub fn at(&self, t: f64) -> f64 {
        self.breakpoints
            .iter()
            .take_while(|(tb, _)| *tb <= t)
            .last()
            .unwrap_or(&self.breakpoints[0])
            .1
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        let rows: Vec<ProfileRow> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| io_err(path, e))?;
        DProfile::new(rows.iter().map(|r| (r.t, r.d)).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        for &(t, d) in &self.breakpoints {
            w.serialize(ProfileRow { t, d }).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Model of the plain chemostat used for fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReducedModel {
    pub constants: PlantConstants,
    /// Largest RK4 step [h].
    pub step: f64,
    /// Bound on `h` times the substrate stiffness estimate.
    pub stiffness_target: f64,
}

impl Default for ReducedModel {
    fn default() -> Self {
        ReducedModel {
            constants: PlantConstants::default(),
            step: 0.004,
            stiffness_target: 1.5,
        }
    }
}

impl ReducedModel {
    fn rhs(&self, v: [f64; 3], d: f64, th: &KineticParams) -> [f64; 3] {
        let [b, s, x] = v;
        let k = &self.constants;
        let mu = th.mu_max * s / (th.ks + s) * (1.0 - x / k.x_crit);
        [
            mu * b - d * b,
            -mu * b / th.y + d * (k.s_in - s),
            th.c * mu * b - d * x,
        ]
    }

    /// Step for a whole simulation, from the substrate eigenvalue at depletion
    /// with the largest reachable biomass. Fixed per `theta`, so residuals stay
    /// smooth in the parameters.
    pub fn step_for(&self, th: &KineticParams, xi0: &ProcessState, d_max: f64) -> f64 {
        let b_max = xi0.b + th.y * xi0.s.max(self.constants.s_in);
        let rate = th.mu_max * b_max / (th.ks * th.y) + d_max;
        self.step.min(self.stiffness_target / rate)
    }

    fn advance(&self, v: [f64; 3], d: f64, th: &KineticParams, dt: f64, step: f64) -> [f64; 3] {
        let n = (dt / step).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        let add = |a: [f64; 3], k: [f64; 3], c: f64| std::array::from_fn(|i| a[i] + c * k[i]);
        let mut v = v;
        for _ in 0..n {
            let k1 = self.rhs(v, d, th);
            let k2 = self.rhs(add(v, k1, 0.5 * h), d, th);
            let k3 = self.rhs(add(v, k2, 0.5 * h), d, th);
            let k4 = self.rhs(add(v, k3, h), d, th);
            v = std::array::from_fn(|i| (v[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).max(0.0));
        }
        v
    }

    /// States at `times`, starting from `xi0` at `t = 0`.
    pub fn simulate(
        &self,
        theta: &KineticParams,
        xi0: &ProcessState,
        times: &[f64],
        profile: &DProfile,
    ) -> Result<Vec<ProcessState>> {
        let mut events: Vec<f64> = profile
            .breakpoints
            .iter()
            .map(|b| b.0)
            .chain(times.iter().copied())
            .filter(|t| *t > 0.0)
            .collect();
        events.sort_by(f64::total_cmp);
        events.dedup();
        let d_max = profile.breakpoints.iter().map(|b| b.1).fold(0.0, f64::max);
        let step = self.step_for(theta, xi0, d_max);
        let mut out = Vec::with_capacity(times.len());
        let mut v = xi0.to_array();
        let mut t = 0.0;
        let mut next = times.iter().peekable();
        while next.peek().is_some_and(|&&tt| tt <= 0.0) {
            out.push(*xi0);
            next.next();
        }
        for &te in &events {
            v = self.advance(v, profile.at(t), theta, te - t, step);
            if v.iter().any(|c| !c.is_finite()) {
                return Err(IdentError::NonFinite(te));
            }
            t = te;
            if next.peek().is_some_and(|&&tt| tt == te) {
                out.push(ProcessState::from_array(v));
                next.next();
            }
        }
        Ok(out)
    }
}

/// Scaled residuals `(predicted - measured) / channel scale`, time-major over measured entries.
pub fn residuals(
    theta: &KineticParams,
    data: &Dataset,
    profile: &DProfile,
    model: &ReducedModel,
) -> Result<Vec<f64>> {
    data.validate()?;
    let pred = model.simulate(theta, &data.xi0, &data.times, profile)?;
    let scales = data.channel_scales();
    let channels = data.channels();
    let mut r = Vec::with_capacity(data.observation_count());
    for (i, p) in pred.iter().enumerate() {
        let pv = p.to_array();
        for c in 0..3 {
            if let (Some(scale), Some(m)) = (scales[c], channels[c][i]) {
                r.push((pv[c] - m) / scale);
            }
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub lo: KineticParams,
    pub hi: KineticParams,
}

impl FitBounds {
    /// A factor `f` below and above `center`.
    pub fn around(center: &KineticParams, f: f64) -> Self {
        let c = center.to_array();
        FitBounds {
            lo: KineticParams::from_array(c.map(|v| v / f)),
            hi: KineticParams::from_array(c.map(|v| v * f)),
        }
    }

    pub fn contains(&self, th: &KineticParams) -> bool {
        let (lo, hi, v) = (self.lo.to_array(), self.hi.to_array(), th.to_array());
        (0..4).all(|i| lo[i] <= v[i] && v[i] <= hi[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative step in log-parameters for the central-difference Jacobian.
    pub fd_step: f64,
    /// Two-sided normal quantile of the confidence half-widths.
    pub z_quantile: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            fd_step: 1e-5,
            z_quantile: 1.96,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: KineticParams,
    /// Euclidean norm of the scaled residuals at `theta_hat`.
    pub residual_norm: f64,
    /// 95% confidence half-widths as a percentage of each estimate.
    pub half_widths_pct: [f64; 4],
    pub converged: bool,
    pub iterations: usize,
    /// Parameters that ended on a bound.
    pub at_bound: [bool; 4],
    /// Residual norm of each accepted iterate, starting with the initial guess.
    pub norm_history: Vec<f64>,
}

impl FitResult {
    pub fn flagged(&self) -> bool {
        !self.converged || self.at_bound.iter().any(|b| *b)
    }
}

/// Central-difference Jacobian of the residuals with respect to `ln theta`.
pub fn jacobian_log(
    theta: &KineticParams,
    data: &Dataset,
    profile: &DProfile,
    model: &ReducedModel,
    step: f64,
) -> Result<DMatrix<f64>> {
    let phi = theta.to_array().map(f64::ln);
    let m = data.observation_count();
    let mut j = DMatrix::zeros(m, 4);
    for c in 0..4 {
        let eval = |sign: f64| {
            let mut p = phi;
            p[c] += sign * step;
            residuals(&KineticParams::from_array(p.map(f64::exp)), data, profile, model)
        };
        let (rp, rm) = (eval(1.0)?, eval(-1.0)?);
        for i in 0..m {
            j[(i, c)] = (rp[i] - rm[i]) / (2.0 * step);
        }
    }
    Ok(j)
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Levenberg-Marquardt in `ln theta`, with parameters pinned at a bound
/// whenever the gradient pushes them outward.
pub fn fit(
    data: &Dataset,
    profile: &DProfile,
    theta_init: &KineticParams,
    bounds: &FitBounds,
    model: &ReducedModel,
    opts: &FitOptions,
) -> Result<FitResult> {
    data.validate()?;
    if !bounds.contains(theta_init) {
        return Err(IdentError::Setup(format!(
            "initial guess {theta_init:?} outside bounds"
        )));
    }
    if bounds.lo.to_array().iter().any(|v| !(*v > 0.0)) {
        return Err(IdentError::Setup("lower bounds must be positive".into()));
    }
    let m = data.observation_count();
    if m <= 4 {
        return Err(IdentError::Setup(format!("{m} observations for 4 parameters")));
    }
    let lo = bounds.lo.to_array().map(f64::ln);
    let hi = bounds.hi.to_array().map(f64::ln);
    let to_theta = |p: [f64; 4]| KineticParams::from_array(p.map(f64::exp));

    let mut phi = theta_init.to_array().map(f64::ln);
    let mut r = residuals(&to_theta(phi), data, profile, model)?;
    let mut cost = sq(&r);
    let mut history = vec![cost.sqrt()];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let j = jacobian_log(&to_theta(phi), data, profile, model, opts.fd_step)?;
        let rv = DVector::from_column_slice(&r);
        let g: Vector4<f64> = Vector4::from_iterator((j.transpose() * &rv).iter().copied());
        let a: Matrix4<f64> = Matrix4::from_iterator((j.transpose() * &j).iter().copied());
        let edge = 1e-12;
        let free: [bool; 4] = std::array::from_fn(|i| {
            !((phi[i] <= lo[i] + edge && g[i] > 0.0) || (phi[i] >= hi[i] - edge && g[i] < 0.0))
        });
        let gmax = (0..4).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if gmax <= 1e-15 * cost.max(1e-300).sqrt() || cost == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e16 {
            let mut sys = a;
            let mut rhs = -g;
            for i in 0..4 {
                if free[i] {
                    sys[(i, i)] += lambda * a[(i, i)].max(1e-12);
                } else {
                    sys.row_mut(i).fill(0.0);
                    sys.column_mut(i).fill(0.0);
                    sys[(i, i)] = 1.0;
                    rhs[i] = 0.0;
                }
            }
            let Some(delta) = sys.cholesky().map(|c| c.solve(&rhs)) else {
                lambda *= 4.0;
                continue;
            };
            let cand: [f64; 4] = std::array::from_fn(|i| (phi[i] + delta[i]).clamp(lo[i], hi[i]));
            let step = (0..4).map(|i| (cand[i] - phi[i]).abs()).fold(0.0, f64::max);
            let trial = residuals(&to_theta(cand), data, profile, model);
            match trial {
                Ok(rt) if sq(&rt) < cost => {
                    phi = cand;
                    cost = sq(&rt);
                    r = rt;
                    history.push(cost.sqrt());
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    small_step = step < 1e-12;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted || small_step {
            // no descent left at working precision
            converged = true;
            break;
        }
    }

    let theta_hat = to_theta(phi);
    let j = jacobian_log(&theta_hat, data, profile, model, opts.fd_step)?;
    let dof = (m - 4) as f64;
    let sigma2 = cost / dof;
    let half_widths_pct = match (j.transpose() * &j).try_inverse() {
        Some(inv) => std::array::from_fn(|i| 100.0 * opts.z_quantile * (sigma2 * inv[(i, i)]).max(0.0).sqrt()),
        None => [f64::INFINITY; 4],
    };
    let at_bound = std::array::from_fn(|i| phi[i] <= lo[i] + 1e-12 || phi[i] >= hi[i] - 1e-12);
    Ok(FitResult {
        theta_hat,
        residual_norm: cost.sqrt(),
        half_widths_pct,
        converged,
        iterations,
        at_bound,
        norm_history: history,
    })
}

/// A batch phase followed by two chemostat phases, sampled every half hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub xi0: [f64; 3],
    pub t_end: f64,
    pub sample_every: f64,
    pub profile: Vec<(f64, f64)>,
    /// Relative noise standard deviations of `b, s, x`.
    pub noise_rel: [f64; 3],
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            xi0: [0.1, 20.0, 0.0],
            t_end: 36.0,
            sample_every: 0.5,
            profile: vec![(0.0, 0.0), (12.0, 0.15), (24.0, 0.35)],
            noise_rel: [0.02, 0.02, 0.05],
        }
    }
}

impl Experiment {
    pub fn times(&self) -> Vec<f64> {
        let n = (self.t_end / self.sample_every).round() as usize;
        (0..=n).map(|i| i as f64 * self.sample_every).collect()
    }

    pub fn d_profile(&self) -> Result<DProfile> {
        DProfile::new(self.profile.clone())
    }
}

/// Simulated measurements with relative Gaussian noise; the initial state is noise-free.
pub fn synthesize<R: Rng>(
    theta: &KineticParams,
    exp: &Experiment,
    model: &ReducedModel,
    rng: &mut R,
) -> Result<Dataset> {
    let times = exp.times();
    let xi0 = ProcessState::from_array(exp.xi0);
    let states = model.simulate(theta, &xi0, &times, &exp.d_profile()?)?;
    let mut ch: [Vec<Option<f64>>; 3] = Default::default();
    for st in &states {
        for (c, v) in st.to_array().iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            ch[c].push(Some(v * (1.0 + exp.noise_rel[c] * e)));
        }
    }
    let [b, s, x] = ch;
    Dataset::new(times, b, s, x, xi0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NOM: KineticParams = KineticParams::NOMINAL;

    fn clean() -> (Dataset, DProfile, ReducedModel) {
        let exp = Experiment {
            noise_rel: [0.0; 3],
            ..Experiment::default()
        };
        let model = ReducedModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (synthesize(&NOM, &exp, &model, &mut rng).unwrap(), exp.d_profile().unwrap(), model)
    }

    #[test]
    fn profile_zero_order_hold() {
        let p = DProfile::new(vec![(1.0, 0.1), (2.0, 0.3)]).unwrap();
        assert_eq!(p.at(0.5), 0.1);
        assert_eq!(p.at(1.0), 0.1);
        assert_eq!(p.at(1.999), 0.1);
        assert_eq!(p.at(2.0), 0.3);
        assert_eq!(p.at(50.0), 0.3);
        assert!(DProfile::new(vec![(1.0, 0.1), (1.0, 0.3)]).is_err());
        assert!(DProfile::new(vec![]).is_err());
    }

    #[test]
    fn step_is_converged() {
        let (d, p, m) = clean();
        let fine = ReducedModel { step: 0.0005, ..m };
        let a = m.simulate(&NOM, &d.xi0, &d.times, &p).unwrap();
        let b = fine.simulate(&NOM, &d.xi0, &d.times, &p).unwrap();
        for (u, v) in a.iter().zip(&b) {
            for (x, y) in u.to_array().iter().zip(v.to_array()) {
                assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-3), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn self_consistent_residuals_vanish() {
        let (d, p, m) = clean();
        let r = residuals(&NOM, &d, &p, &m).unwrap();
        assert_eq!(r.len(), 3 * d.len());
        assert!(sq(&r).sqrt() < 1e-8);
    }

    #[test]
    fn channel_scaling_is_per_channel() {
        let (d, p, m) = clean();
        let th = NOM.perturbed([0.05, 0.0, 0.0, 0.0]);
        let base = residuals(&th, &d, &p, &m).unwrap();
        let mut d2 = d.clone();
        d2.s = d.s.iter().map(|v| v.map(|v| 2.0 * v)).collect();
        let other = residuals(&th, &d2, &p, &m).unwrap();
        let chan: Vec<usize> = (0..d.len()).flat_map(|_| 0..3).collect();
        let mut s_changed = 0;
        for ((a, b), c) in base.iter().zip(&other).zip(chan) {
            if c == 1 {
                s_changed += usize::from(a != b);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(s_changed > d.len() / 2);
    }

    #[test]
    fn short_dataset_rejected() {
        let xi = ProcessState::new(1.0, 1.0, 0.0);
        let one = Dataset::new(vec![0.0], vec![Some(1.0)], vec![None], vec![None], xi);
        assert!(matches!(one, Err(IdentError::Dataset(_))));
        let unsorted = Dataset::new(
            vec![0.0, 2.0, 1.0, 3.0],
            vec![Some(1.0); 4],
            vec![None; 4],
            vec![None; 4],
            xi,
        );
        assert!(unsorted.is_err());
    }

    #[test]
    fn noise_free_recovery() {
        let (d, p, m) = clean();
        let init = NOM.perturbed([0.15, -0.15, 0.15, -0.15]);
        let res = fit(&d, &p, &init, &FitBounds::around(&NOM, 10.0), &m, &FitOptions::default()).unwrap();
        assert!(res.converged);
        for (a, b) in res.theta_hat.to_array().iter().zip(NOM.to_array()) {
            assert!((a / b - 1.0).abs() < 1e-4, "{a} vs {b}");
        }
        assert!(res.norm_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bound_excluding_truth_is_flagged() {
        let (d, p, m) = clean();
        let mut b = FitBounds::around(&NOM, 10.0);
        b.hi.mu_max = 0.4;
        let init = KineticParams { mu_max: 0.38, ..NOM };
        let res = fit(&d, &p, &init, &b, &m, &FitOptions::default()).unwrap();
        assert!(res.at_bound[0]);
        assert_eq!(res.theta_hat.mu_max, 0.4);
        assert!(res.flagged());
        let outside = KineticParams { mu_max: 0.45, ..NOM };
        assert!(matches!(fit(&d, &p, &outside, &b, &m, &FitOptions::default()), Err(IdentError::Setup(_))));
    }

    #[test]
    fn jacobian_matches_directional_derivatives() {
        let exp = Experiment::default();
        let m = ReducedModel::default();
        let d = synthesize(&NOM, &exp, &m, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let p = exp.d_profile().unwrap();
        let th = NOM.perturbed([0.05, -0.05, 0.05, -0.05]);
        let j = jacobian_log(&th, &d, &p, &m, 1e-5).unwrap();
        let phi = th.to_array().map(f64::ln);
        let central = |v: [f64; 4], h: f64| {
            let at = |sgn: f64| {
                let q: [f64; 4] = std::array::from_fn(|i| (phi[i] + sgn * h * v[i]).exp());
                DVector::from_vec(residuals(&KineticParams::from_array(q), &d, &p, &m).unwrap())
            };
            (at(1.0) - at(-1.0)) / (2.0 * h)
        };
        let mut dirs: Vec<[f64; 4]> = (0..4).map(|c| std::array::from_fn(|i| f64::from(u8::from(i == c)))).collect();
        dirs.push([0.3, -0.5, 0.7, 0.4]);
        for v in dirs {
            let h = 6e-5;
            let rich = (central(v, h / 2.0) * 4.0 - central(v, h)) / 3.0;
            let jv = &j * DVector::from_column_slice(&v);
            assert!((&jv - &rich).norm() <= 1e-4 * rich.norm(), "{v:?}: {}", (&jv - &rich).norm() / rich.norm());
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut d, p, _) = clean();
        d.x = d.x.iter().enumerate().map(|(i, v)| if i % 3 == 0 { *v } else { None }).collect();
        let path = dir.path().join("data.csv");
        d.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path, Some(d.xi0)).unwrap(), d);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(2).unwrap().ends_with(','));
        let pp = dir.path().join("profile.csv");
        p.write_csv(&pp).unwrap();
        assert_eq!(DProfile::read_csv(&pp).unwrap(), p);
    }
}
