//! Scenario configuration, loaded from TOML.
//!
//! Every field has a default, so a config file only lists what it changes:
//!
//! ```toml
//! seed = 7
//! t_f = 30.0
//! controller = "lookup"          # "mpc" | "lookup" | "constant"
//! initial_state = [0.3, 20.0, 0.0]
//!
//! [theta_true]
//! mu_max = 0.5
//! ks = 0.02
//! c = 0.015
//! y = 0.27
//!
//! [noise]
//! measurement_rel = [0.02, 0.02, 0.05]
//!
//! [mpc]
//! horizon = 10
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::control::{HysteresisConfig, MpcConfig, ParamRanges};
use crate::estimation::{FilterSetup, MeasurementSchedule, NoiseConfig, PriorConfig, UtConfig, NZ};
use crate::identification::{Experiment, FitBounds, FitOptions, ReducedModel};
use crate::model::{ControlInput, Integrator, KineticParams, PlantConstants, ProcessState};
use crate::observability::{SampleRanges, DEFAULT_TOL_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Mpc,
    Lookup,
    Constant,
}

/// Noise intensities as diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    pub q_xi: [f64; 3],
    pub q_theta: [f64; 4],
    /// Fixed part of the measurement covariance for `[b, s, x]`.
    pub r: [f64; 3],
    /// Relative measurement standard deviations assumed by the filter; `None` keeps `R` fixed.
    pub r_relative: Option<[f64; 3]>,
    /// Relative standard deviations of the simulated sensor noise.
    pub measurement_rel: [f64; 3],
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            q_xi: [1e-6, 1e-6, 1e-8],
            q_theta: [1e-8, 1e-10, 1e-10, 1e-8],
            r: [1e-6, 1e-8, 1e-8],
            r_relative: Some([0.02, 0.02, 0.05]),
            measurement_rel: [0.02, 0.02, 0.05],
        }
    }
}

impl NoiseSettings {
    pub fn filter_noise(&self) -> NoiseConfig {
        NoiseConfig::from_diagonals(self.q_xi, self.q_theta, self.r, self.r_relative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookupSettings {
    pub table_size: usize,
    pub table_seed: u64,
    /// Sampling half-width of the table, as a fraction of nominal.
    pub range_frac: f64,
    /// Defaults to 40% / 30% of `x_crit`.
    pub hysteresis: Option<HysteresisConfig>,
}

impl Default for LookupSettings {
    fn default() -> Self {
        LookupSettings {
            table_size: 1000,
            table_seed: 2024,
            range_frac: 0.15,
            hysteresis: None,
        }
    }
}

/// Settings shared by the Monte Carlo commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSettings {
    /// Scenarios of the paired controller comparison.
    pub runs: usize,
    /// Runs of the estimator campaign.
    pub ukf_runs: usize,
    pub perturb_frac: f64,
    /// Moving window for steady-state detection [h].
    pub steady_window: f64,
    pub steady_tol: f64,
    /// Horizon of the estimator campaign [h].
    pub ukf_t_f: f64,
    pub ukf_input: ControlInput,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        CampaignSettings {
            runs: 20,
            ukf_runs: 40,
            perturb_frac: 0.15,
            steady_window: 2.0,
            steady_tol: 1e-3,
            ukf_t_f: 48.0,
            ukf_input: ControlInput::new(0.2, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservabilitySettings {
    pub points: usize,
    pub tol_ratio: f64,
    /// Defaults to the box around `theta_nominal` from `SampleRanges::default_for`.
    pub ranges: Option<SampleRanges>,
}

impl Default for ObservabilitySettings {
    fn default() -> Self {
        ObservabilitySettings {
            points: 10_000,
            tol_ratio: DEFAULT_TOL_RATIO,
            ranges: None,
        }
    }
}

/// Settings of the `fit` command. Without a data file, data are synthesized
/// from `experiment` and `theta_true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationSettings {
    pub experiment: Experiment,
    /// Step limits of the fitting model; its constants come from the scenario.
    pub max_step: f64,
    /// Initial guess; defaults to `theta_nominal`.
    pub theta_init: Option<KineticParams>,
    /// Bounds are `theta_nominal` divided and multiplied by this factor.
    pub bounds_factor: f64,
    pub options: FitOptions,
}

impl Default for IdentificationSettings {
    fn default() -> Self {
        IdentificationSettings {
            experiment: Experiment::default(),
            max_step: ReducedModel::default().step,
            theta_init: None,
            bounds_factor: 10.0,
            options: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Simulated horizon [h]; an integer multiple of the sampling period.
    pub t_f: f64,
    pub controller: ControllerKind,
    pub initial_state: [f64; 3],
    pub theta_true: KineticParams,
    pub theta_nominal: KineticParams,
    pub constants: PlantConstants,
    pub schedule: MeasurementSchedule,
    pub noise: NoiseSettings,
    pub prior: PriorConfig,
    pub ut: UtConfig,
    pub mpc: MpcConfig,
    pub lookup: LookupSettings,
    pub constant_input: ControlInput,
    pub integrator: Integrator,
    pub campaign: CampaignSettings,
    pub observability: ObservabilitySettings,
    pub identification: IdentificationSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            t_f: 30.0,
            controller: ControllerKind::Mpc,
            initial_state: [0.3, 20.0, 0.0],
            theta_true: KineticParams::NOMINAL,
            theta_nominal: KineticParams::NOMINAL,
            constants: PlantConstants::default(),
            schedule: MeasurementSchedule::default(),
            noise: NoiseSettings::default(),
            prior: PriorConfig::default(),
            ut: UtConfig::default(),
            mpc: MpcConfig::default(),
            lookup: LookupSettings::default(),
            constant_input: ControlInput::new(0.2, true),
            integrator: Integrator::default(),
            campaign: CampaignSettings::default(),
            observability: ObservabilitySettings::default(),
            identification: IdentificationSettings::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn steps(&self) -> usize {
        (self.t_f / self.schedule.ts).round() as usize
    }

    pub fn initial(&self) -> ProcessState {
        ProcessState::from_array(self.initial_state)
    }

    pub fn hysteresis(&self) -> HysteresisConfig {
        self.lookup
            .hysteresis
            .unwrap_or_else(|| HysteresisConfig::from_constants(&self.constants))
    }

    pub fn table_ranges(&self) -> ParamRanges {
        ParamRanges::around(&self.theta_nominal, self.lookup.range_frac)
    }

    pub fn filter_setup(&self) -> FilterSetup {
        FilterSetup {
            schedule: self.schedule,
            noise: self.noise.filter_noise(),
            ut: self.ut,
            constants: self.constants,
            integrator: self.integrator,
        }
    }

    pub fn sample_ranges(&self) -> SampleRanges {
        self.observability
            .ranges
            .unwrap_or_else(|| SampleRanges::default_for(&self.constants, self.theta_nominal))
    }

    pub fn reduced_model(&self) -> ReducedModel {
        ReducedModel {
            constants: self.constants,
            step: self.identification.max_step,
            ..ReducedModel::default()
        }
    }

    pub fn fit_bounds(&self) -> FitBounds {
        FitBounds::around(&self.theta_nominal, self.identification.bounds_factor)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |m: String| Err(HarnessError::Config(m));
        self.constants
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        for (name, th) in [("theta_true", &self.theta_true), ("theta_nominal", &self.theta_nominal)] {
            th.validate(&self.constants)
                .map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
        }
        self.schedule
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let ratio = self.t_f / self.schedule.ts;
        if !(self.t_f > 0.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return cfg_err(format!(
                "t_f = {} must be a positive multiple of Ts = {}",
                self.t_f, self.schedule.ts
            ));
        }
        let xi = self.initial();
        if xi.to_array().iter().any(|v| !v.is_finite() || *v < 0.0) || xi.s > self.constants.s_in {
            return cfg_err(format!(
                "initial state {xi:?} must be nonnegative with s <= s_in"
            ));
        }
        self.noise
            .filter_noise()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.noise.measurement_rel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return cfg_err("measurement_rel must be nonnegative".into());
        }
        self.ut
            .validate(NZ)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.mpc.validate().map_err(HarnessError::Config)?;
        if (self.mpc.ts - self.schedule.ts).abs() > 1e-12 {
            return cfg_err("mpc.ts must equal schedule.ts".into());
        }
        self.hysteresis()
            .validate(&self.constants)
            .map_err(HarnessError::Config)?;
        if self.lookup.table_size == 0 {
            return cfg_err("lookup.table_size must be at least 1".into());
        }
        if !self.constant_input.is_admissible(&self.constants) {
            return cfg_err(format!(
                "constant input {:?} outside [0, D_max]",
                self.constant_input
            ));
        }
        if !(self.integrator.max_step > 0.0) {
            return cfg_err("integrator.max_step must be positive".into());
        }
        let c = &self.campaign;
        if !(c.perturb_frac >= 0.0 && c.perturb_frac < 1.0) {
            return cfg_err("campaign.perturb_frac must lie in [0, 1)".into());
        }
        if !(c.steady_window > 0.0 && c.steady_tol > 0.0 && c.ukf_t_f > 0.0) {
            return cfg_err("campaign windows, tolerances and horizons must be positive".into());
        }
        if !c.ukf_input.is_admissible(&self.constants) {
            return cfg_err("campaign.ukf_input outside [0, D_max]".into());
        }
        let o = &self.observability;
        if !(o.tol_ratio > 0.0 && o.tol_ratio < 1.0) {
            return cfg_err("observability.tol_ratio must lie in (0, 1)".into());
        }
        self.sample_ranges()
            .validate(&self.constants)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let id = &self.identification;
        if !(id.max_step > 0.0 && id.bounds_factor > 1.0 && id.options.fd_step > 0.0) {
            return cfg_err("identification step, bounds factor and fd_step must be positive (factor > 1)".into());
        }
        if !(id.experiment.t_end > 0.0 && id.experiment.sample_every > 0.0) {
            return cfg_err("identification.experiment needs positive t_end and sample_every".into());
        }
        id.experiment
            .d_profile()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(init) = id.theta_init {
            if !self.fit_bounds().contains(&init) {
                return cfg_err("identification.theta_init outside the fit bounds".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.steps(), 40);
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ScenarioConfig::from_toml_str(
            "seed = 9\ncontroller = \"lookup\"\n[theta_true]\nmu_max = 0.5\nks = 0.02\nc = 0.015\ny = 0.27\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.controller, ControllerKind::Lookup);
        assert_eq!(cfg.theta_true.mu_max, 0.5);
        assert_eq!(cfg.mpc, MpcConfig::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "t_f = 30.1",
            "t_f = -0.75",
            "initial_state = [1.0, 25.0, 0.0]",
            "[theta_true]\nmu_max = -1.0\nks = 0.02\nc = 0.01\ny = 0.3",
            "[schedule]\nts = 0.75\ndna_period = 5.0",
            "unknown_key = 1",
            "[lookup]\ntable_size = 0",
            "[constant_input]\ndilution = 0.9\nfilter = false",
        ] {
            assert!(
                matches!(ScenarioConfig::from_toml_str(text), Err(HarnessError::Config(_))),
                "accepted: {text}"
            );
        }
    }
}
