//! Recirculating chemostat with DNA-inhibited Monod growth.
//!
//! State is `[b, s, x]` (biomass, substrate, extracellular DNA). The total
//! dilution rate `D` is split into a recirculated stream and a concentrated
//! make-up stream so that the effective inlet concentration stays at `s_in`.
//! DNA leaves only with the non-recirculated fraction of the outflow, or
//! through the filter when it is switched on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("recirculation singular: s = {s} is within the guard band below s_H = {s_h}")]
    Singular { s: f64, s_h: f64 },
    #[error("integration produced a non-finite state")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Uncertain kinetic parameters, jointly estimated with the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    /// Maximum specific growth rate [1/h].
    pub mu_max: f64,
    /// Monod half-saturation constant [g/L].
    pub ks: f64,
    /// DNA released per unit of biomass formed.
    pub c: f64,
    /// Biomass yield on substrate [-].
    pub y: f64,
}

impl KineticParams {
    pub const NOMINAL: KineticParams = KineticParams {
        mu_max: 0.466,
        ks: 0.02285,
        c: 0.01404,
        y: 0.2779,
    };

    pub fn new(mu_max: f64, ks: f64, c: f64, y: f64, k: &PlantConstants) -> Result<Self> {
        let p = KineticParams { mu_max, ks, c, y };
        p.validate(k)?;
        Ok(p)
    }

    pub fn validate(&self, k: &PlantConstants) -> Result<()> {
        let arr = self.to_array();
        if arr.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "kinetic parameters must be finite and positive, got {self:?}"
            )));
        }
        if self.mu_max >= 10.0 {
            return Err(ModelError::InvalidParameter(format!(
                "mu_max = {} is outside the sanity bound (< 10 1/h)",
                self.mu_max
            )));
        }
        if self.ks >= k.s_in {
            return Err(ModelError::InvalidParameter(format!(
                "Ks = {} must be below s_in = {}",
                self.ks, k.s_in
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.mu_max, self.ks, self.c, self.y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        KineticParams {
            mu_max: a[0],
            ks: a[1],
            c: a[2],
            y: a[3],
        }
    }

    /// Multiplies each parameter by `1 + factors[i]`.
    pub fn perturbed(&self, factors: [f64; 4]) -> Self {
        let a = self.to_array();
        KineticParams::from_array(std::array::from_fn(|i| a[i] * (1.0 + factors[i])))
    }
}

/// Known plant constants and the economic cost-to-price ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConstants {
    /// Filtration efficiency in (0, 1].
    pub alpha: f64,
    pub d_max: f64,
    pub x_crit: f64,
    /// Filtration flow rate [1/h].
    pub d_f: f64,
    pub s_in: f64,
    /// Substrate concentration of the make-up stream [g/L].
    pub s_h: f64,
    /// Filtration cost over biomass price.
    pub lambda: f64,
    /// Guard band below `s_h` where the recirculation rate is rejected.
    pub eps_sing: f64,
}

impl Default for PlantConstants {
    fn default() -> Self {
        PlantConstants {
            alpha: 0.72,
            d_max: 0.6,
            x_crit: 0.48,
            d_f: 0.4,
            s_in: 20.0,
            s_h: 200.0,
            lambda: 2.4,
            eps_sing: 1.0,
        }
    }
}

impl PlantConstants {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidParameter(m.to_string()));
        let all = [
            self.alpha,
            self.d_max,
            self.x_crit,
            self.d_f,
            self.s_in,
            self.s_h,
            self.lambda,
            self.eps_sing,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("plant constants must be finite");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.d_max <= 0.0 {
            return bad("D_max must be positive");
        }
        if self.x_crit <= 0.0 {
            return bad("x_crit must be positive");
        }
        if self.d_f < 0.0 || self.lambda < 0.0 || self.eps_sing < 0.0 {
            return bad("D_f, lambda and eps_sing must be nonnegative");
        }
        if !(self.s_h > self.s_in && self.s_in > 0.0) {
            return bad("need s_H > s_in > 0");
        }
        Ok(())
    }
}

/// Concentrations `[b, s, x]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessState {
    pub b: f64,
    pub s: f64,
    pub x: f64,
}

impl ProcessState {
    pub fn new(b: f64, s: f64, x: f64) -> Self {
        ProcessState { b, s, x }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.b, self.s, self.x]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        ProcessState {
            b: a[0],
            s: a[1],
            x: a[2],
        }
    }

    fn axpy(&self, h: f64, d: &[f64; 3]) -> ProcessState {
        ProcessState {
            b: self.b + h * d[0],
            s: self.s + h * d[1],
            x: self.x + h * d[2],
        }
    }
}

/// Physical state augmented with the kinetic parameters, `[b, s, x, mu_max, Ks, c, Y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub xi: ProcessState,
    pub theta: KineticParams,
}

impl AugmentedState {
    pub fn new(xi: ProcessState, theta: KineticParams) -> Self {
        AugmentedState { xi, theta }
    }

    pub fn to_array(&self) -> [f64; 7] {
        let (a, p) = (self.xi.to_array(), self.theta.to_array());
        [a[0], a[1], a[2], p[0], p[1], p[2], p[3]]
    }

    pub fn from_array(z: [f64; 7]) -> Self {
        AugmentedState {
            xi: ProcessState::from_array([z[0], z[1], z[2]]),
            theta: KineticParams::from_array([z[3], z[4], z[5], z[6]]),
        }
    }
}

/// Dilution rate plus the binary filter flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub dilution: f64,
    pub filter: bool,
}

impl ControlInput {
    pub fn new(dilution: f64, filter: bool) -> Self {
        ControlInput { dilution, filter }
    }

    pub fn delta(&self) -> f64 {
        if self.filter {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_admissible(&self, k: &PlantConstants) -> bool {
        self.dilution.is_finite() && self.dilution >= 0.0 && self.dilution <= k.d_max
    }
}

/// Specific growth rate. Negative when `x > x_crit`; the expression is not clamped.
#[inline]
pub fn growth_rate(s: f64, x: f64, theta: &KineticParams, k: &PlantConstants) -> f64 {
    theta.mu_max * s / (theta.ks + s) * (1.0 - x / k.x_crit)
}

/// Recirculated part of the dilution rate that keeps the effective inlet at `s_in`.
#[inline]
pub fn recirculation_rate(d: f64, s: f64, k: &PlantConstants) -> Result<f64> {
    if s >= k.s_h - k.eps_sing {
        return Err(ModelError::Singular { s, s_h: k.s_h });
    }
    Ok(d * (k.s_in - k.s_h) / (s - k.s_h))
}

pub fn derivatives(
    xi: &ProcessState,
    u: &ControlInput,
    theta: &KineticParams,
    k: &PlantConstants,
) -> Result<[f64; 3]> {
    let d = u.dilution;
    let mu = growth_rate(xi.s, xi.x, theta, k);
    let d_rec = recirculation_rate(d, xi.s, k)?;
    let growth = mu * xi.b;
    Ok([
        growth - d * xi.b,
        -growth / theta.y + d * (k.s_in - xi.s),
        theta.c * growth - (d - d_rec) * xi.x - u.delta() * k.d_f * k.alpha * xi.x,
    ])
}

/// Result of one or more RK4 steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: ProcessState,
    /// Some component went negative and was reset to zero.
    pub clamped: bool,
    /// Smallest component seen before clamping.
    pub min_raw: f64,
}

/// One classical RK4 step with the input held constant, followed by clamping at zero.
pub fn rk4_step(
    xi: &ProcessState,
    u: &ControlInput,
    theta: &KineticParams,
    k: &PlantConstants,
    h: f64,
) -> Result<StepOutcome> {
    let k1 = derivatives(xi, u, theta, k)?;
    let k2 = derivatives(&xi.axpy(0.5 * h, &k1), u, theta, k)?;
    let k3 = derivatives(&xi.axpy(0.5 * h, &k2), u, theta, k)?;
    let k4 = derivatives(&xi.axpy(h, &k3), u, theta, k)?;
    let incr: [f64; 3] = std::array::from_fn(|i| (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) / 6.0);
    let raw = xi.axpy(h, &incr);
    let arr = raw.to_array();
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    let min_raw = arr.iter().copied().fold(f64::INFINITY, f64::min);
    let clamped = min_raw < 0.0;
    if clamped {
        log::debug!("negative state {raw:?} clamped to zero");
    }
    Ok(StepOutcome {
        state: ProcessState::from_array(arr.map(|v| v.max(0.0))),
        clamped,
        min_raw,
    })
}

/// Integrates across a sampling interval with RK4 substeps.
///
/// Near steady state the substrate equation is stiff: its Jacobian entry is
/// `mu_max * Ks / (Ks + s)^2 * b / Y`, over a hundred per hour at the nominal
/// operating point, so a fixed 0.05 h step leaves RK4's stability region.
/// Each substep is therefore capped by `stiffness_target / lambda_local` and
/// by a depletion limit that keeps any decreasing component from losing more
/// than `depletion_frac` of its value in one step. Step sizes depend only on
/// the current state, so runs stay bitwise reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Integrator {
    pub max_step: f64,
    /// Target for `h * lambda_local`; RK4 is stable on the real axis up to about 2.78.
    pub stiffness_target: f64,
    pub depletion_frac: f64,
    /// Ignore the local bounds and always use `max_step` (truncated to fit the interval).
    pub fixed: bool,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator {
            max_step: 0.05,
            stiffness_target: 1.5,
            depletion_frac: 0.5,
            fixed: false,
        }
    }
}

const MAX_SUBSTEPS: usize = 1_000_000;
/// Components below this level are exempt from the depletion bound.
const DEPLETION_FLOOR: f64 = 1e-12;

impl Integrator {
    pub fn fixed(h: f64) -> Self {
        Integrator {
            max_step: h,
            fixed: true,
            ..Integrator::default()
        }
    }

    /// Bound on the magnitude of the Jacobian eigenvalues at `xi` (Gershgorin-style row sums).
    pub fn local_stiffness(
        xi: &ProcessState,
        u: &ControlInput,
        theta: &KineticParams,
        k: &PlantConstants,
    ) -> f64 {
        let s = xi.s.max(0.0);
        let inh = (1.0 - xi.x / k.x_crit).abs();
        let monod = s / (theta.ks + s);
        let dmu_ds = theta.mu_max * inh * theta.ks / (theta.ks + s).powi(2);
        let dmu_dx = theta.mu_max * monod / k.x_crit;
        let mu = theta.mu_max * monod * inh;
        let b = xi.b.max(0.0);
        let row_b = mu + u.dilution + dmu_ds * b + dmu_dx * b;
        let row_s = (mu + dmu_ds * b + dmu_dx * b) / theta.y + u.dilution;
        let row_x = theta.c * (mu + dmu_ds * b + dmu_dx * b) + 2.0 * u.dilution + k.d_f * k.alpha;
        row_b.max(row_s).max(row_x)
    }

    fn step_size(
        &self,
        xi: &ProcessState,
        u: &ControlInput,
        theta: &KineticParams,
        k: &PlantConstants,
        remaining: f64,
        floor: f64,
    ) -> Result<f64> {
        if self.fixed {
            return Ok(self.max_step.min(remaining));
        }
        let mut h = self.max_step;
        let lam = Self::local_stiffness(xi, u, theta, k);
        if lam > 0.0 {
            h = h.min(self.stiffness_target / lam);
        }
        let rate = derivatives(xi, u, theta, k)?;
        for (v, r) in xi.to_array().iter().zip(rate) {
            if r < 0.0 && *v > DEPLETION_FLOOR {
                h = h.min(self.depletion_frac * v / -r);
            }
        }
        let h = h.max(floor);
        // avoid a sliver at the end of the interval
        Ok(if remaining <= 1.5 * h { remaining.min(h.max(0.5 * remaining)) } else { h })
    }

    /// Integrates over `dt` with the input held constant.
    pub fn advance(
        &self,
        xi: &ProcessState,
        u: &ControlInput,
        theta: &KineticParams,
        k: &PlantConstants,
        dt: f64,
    ) -> Result<StepOutcome> {
        let mut out = StepOutcome {
            state: *xi,
            clamped: false,
            min_raw: f64::INFINITY,
        };
        let floor = dt / MAX_SUBSTEPS as f64;
        let mut t = 0.0;
        while dt - t > 1e-12 * dt {
            let h = self.step_size(&out.state, u, theta, k, dt - t, floor)?;
            let step = rk4_step(&out.state, u, theta, k, h)?;
            out.state = step.state;
            out.clamped |= step.clamped;
            out.min_raw = out.min_raw.min(step.min_raw);
            t += h;
        }
        Ok(out)
    }

    /// Number of substeps [`Integrator::advance`] takes over `dt`.
    pub fn count_substeps(
        &self,
        xi: &ProcessState,
        u: &ControlInput,
        theta: &KineticParams,
        k: &PlantConstants,
        dt: f64,
    ) -> Result<usize> {
        let floor = dt / MAX_SUBSTEPS as f64;
        let (mut state, mut t, mut n) = (*xi, 0.0, 0);
        while dt - t > 1e-12 * dt {
            let h = self.step_size(&state, u, theta, k, dt - t, floor)?;
            state = rk4_step(&state, u, theta, k, h)?.state;
            t += h;
            n += 1;
        }
        Ok(n)
    }
}

/// Instantaneous profit normalized by the biomass price: `D b - lambda delta D_f`.
#[inline]
pub fn stage_profit(xi: &ProcessState, u: &ControlInput, k: &PlantConstants) -> f64 {
    u.dilution * xi.b - k.lambda * u.delta() * k.d_f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SteadyState {
    Operating { s: f64, b: f64 },
    Washout,
}

impl SteadyState {
    /// Biomass at the equilibrium, zero on washout.
    pub fn biomass(&self) -> f64 {
        match self {
            SteadyState::Operating { b, .. } => *b,
            SteadyState::Washout => 0.0,
        }
    }
}

/// Non-trivial chemostat equilibrium with the DNA level frozen at `x_fixed`.
pub fn steady_state_biomass(
    d: f64,
    theta: &KineticParams,
    k: &PlantConstants,
    x_fixed: f64,
) -> SteadyState {
    let mu_eff = theta.mu_max * (1.0 - x_fixed / k.x_crit);
    if mu_eff <= d {
        return SteadyState::Washout;
    }
    let s = d * theta.ks / (mu_eff - d);
    if (0.0..k.s_in).contains(&s) {
        SteadyState::Operating {
            s,
            b: theta.y * (k.s_in - s),
        }
    } else {
        SteadyState::Washout
    }
}
