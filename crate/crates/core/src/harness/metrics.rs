use serde::{Deserialize, Serialize};

use super::closed_loop::RunRecord;
use super::HarnessError;
use crate::model::KineticParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub final_gain: f64,
    pub final_biomass: f64,
    pub max_toxin: f64,
    /// Time average of the applied dilution.
    pub mean_dilution: f64,
    /// Fraction of applied steps with the filter on.
    pub activation_fraction: f64,
}

/// Metrics of a record. Inputs are averaged over the applied steps, i.e. all
/// rows but the last; a single-row record uses its only row.
pub fn metrics(rec: &RunRecord) -> Result<RunMetrics, HarnessError> {
    let last = rec
        .steps
        .last()
        .ok_or_else(|| HarnessError::Config("empty run record".into()))?;
    let applied = if rec.steps.len() > 1 {
        &rec.steps[..rec.steps.len() - 1]
    } else {
        &rec.steps[..]
    };
    let n = applied.len() as f64;
    Ok(RunMetrics {
        final_gain: last.cum_gain,
        final_biomass: last.truth.b,
        max_toxin: rec
            .steps
            .iter()
            .map(|s| s.truth.x)
            .fold(f64::NEG_INFINITY, f64::max),
        mean_dilution: applied.iter().map(|s| s.input.dilution).sum::<f64>() / n,
        activation_fraction: applied.iter().filter(|s| s.input.filter).count() as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub index: usize,
    pub theta_true: KineticParams,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub label: String,
    /// Successful scenarios, sorted by index.
    pub scenarios: Vec<ScenarioMetrics>,
    /// Failed scenarios and their fault.
    pub failed: Vec<(usize, String)>,
    pub final_gain: Stat,
    pub final_biomass: Stat,
    pub max_toxin: Stat,
    pub mean_dilution: Stat,
    pub activation_fraction: Stat,
}

impl CampaignSummary {
    pub fn new(label: &str, mut scenarios: Vec<ScenarioMetrics>, mut failed: Vec<(usize, String)>) -> Self {
        scenarios.sort_by_key(|s| s.index);
        failed.sort_by_key(|f| f.0);
        let stat = |f: fn(&RunMetrics) -> f64| {
            Stat::of(&scenarios.iter().map(|s| f(&s.metrics)).collect::<Vec<_>>())
        };
        CampaignSummary {
            label: label.to_string(),
            final_gain: stat(|m| m.final_gain),
            final_biomass: stat(|m| m.final_biomass),
            max_toxin: stat(|m| m.max_toxin),
            mean_dilution: stat(|m| m.mean_dilution),
            activation_fraction: stat(|m| m.activation_fraction),
            scenarios,
            failed,
        }
    }

    /// `(name, stat)` pairs in table order.
    pub fn rows(&self) -> [(&'static str, Stat); 5] {
        [
            ("final_gain", self.final_gain),
            ("final_biomass", self.final_biomass),
            ("max_toxin", self.max_toxin),
            ("mean_dilution", self.mean_dilution),
            ("activation_fraction", self.activation_fraction),
        ]
    }
}

/// Relative improvement of `better` over `base`, expressed against each of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// `(better - base) / better`
    pub relative_to_better: f64,
    /// `(better - base) / base`
    pub relative_to_base: f64,
}

impl Improvement {
    pub fn new(better: f64, base: f64) -> Self {
        Improvement {
            relative_to_better: (better - base) / better,
            relative_to_base: (better - base) / base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::closed_loop::{StepRecord, StreamChecksum};
    use crate::harness::config::ControllerKind;
    use crate::model::{AugmentedState, ControlInput, ProcessState};

    fn fixture() -> RunRecord {
        let rows = [
            (0.0, [1.0, 20.0, 0.00], 0.2, false, 0.0),
            (0.5, [2.0, 10.0, 0.10], 0.4, true, 0.1),
            (1.0, [3.0, 5.0, 0.30], 0.0, true, 0.1),
            (1.5, [4.0, 1.0, 0.20], 0.6, false, 0.3),
        ];
        let steps = rows
            .iter()
            .map(|&(t, xi, d, f, g)| {
                let truth = ProcessState::from_array(xi);
                StepRecord {
                    t,
                    truth,
                    estimate: AugmentedState::new(truth, KineticParams::NOMINAL),
                    input: ControlInput::new(d, f),
                    stage_profit: 0.0,
                    cum_gain: g,
                    nis: 0.0,
                    nis_dim: 3,
                    clamped: false,
                    fallback: false,
                }
            })
            .collect();
        RunRecord {
            controller: ControllerKind::Constant,
            seed: 0,
            ts: 0.5,
            theta_true: KineticParams::NOMINAL,
            steps,
            noise_checksum: StreamChecksum::default(),
            fault: None,
        }
    }

    #[test]
    fn hand_computed_fixture() {
        let m = metrics(&fixture()).unwrap();
        assert_eq!(m.final_gain, 0.3);
        assert_eq!(m.final_biomass, 4.0);
        assert_eq!(m.max_toxin, 0.3);
        assert!((m.mean_dilution - 0.2).abs() < 1e-15);
        assert!((m.activation_fraction - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn filter_off_and_constant_dilution() {
        let mut rec = fixture();
        for s in &mut rec.steps {
            s.input = ControlInput::new(0.35, false);
        }
        let m = metrics(&rec).unwrap();
        assert_eq!(m.activation_fraction, 0.0);
        assert!((m.mean_dilution - 0.35).abs() < 1e-15);
    }

    #[test]
    fn empty_record_rejected() {
        let mut rec = fixture();
        rec.steps.clear();
        assert!(metrics(&rec).is_err());
    }

    #[test]
    fn stats_and_ratios() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).std, 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let r = Improvement::new(26.7, 17.0);
        assert!((r.relative_to_better - 0.3633).abs() < 1e-4);
        assert!((r.relative_to_base - 0.5706).abs() < 1e-4);
    }
}
