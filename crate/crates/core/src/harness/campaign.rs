//! Monte Carlo campaigns over sampled kinetic parameters.
//!
//! Every scenario derives its own seed from the campaign seed. The scenario
//! seed feeds two ChaCha substreams, one for the parameter draw and one for
//! sensor noise, so paired runs of different controllers consume identical
//! randomness. Scenarios run in parallel and are reduced in index order.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::closed_loop::{run_with, substream, table_for, Controller, RunRecord, StreamChecksum, THETA_STREAM};
use super::config::{ControllerKind, ScenarioConfig};
use super::metrics::{median, metrics, CampaignSummary, Improvement, ScenarioMetrics, Stat};
use super::HarnessError;
use crate::estimation::rmse;
use crate::model::KineticParams;

/// Seeds of scenarios `0..n`, drawn from the campaign seed.
pub fn scenario_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = substream(seed, THETA_STREAM);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Kinetic parameters uniformly within `±frac` of nominal, drawn from the
/// scenario's parameter substream. Returns the checksum of the draws.
pub fn sample_theta(nominal: &KineticParams, frac: f64, scenario_seed: u64) -> (KineticParams, StreamChecksum) {
    let mut rng = substream(scenario_seed, THETA_STREAM);
    let mut sum = StreamChecksum::default();
    let mut f = [0.0; 4];
    for v in &mut f {
        let u: f64 = rng.gen();
        sum.absorb(u);
        *v = frac * (2.0 * u - 1.0);
    }
    (nominal.perturbed(f), sum)
}

fn scenario_config(base: &ScenarioConfig, theta: KineticParams, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        theta_true: theta,
        seed,
        ..base.clone()
    }
}

/// First index at which no component of `series` has changed by more than
/// `tol` (relative) over the preceding `window` samples.
pub fn steady_index(series: &[Vec<f64>], window: usize, tol: f64) -> Option<usize> {
    if window == 0 {
        return None;
    }
    (window..series.len()).find(|&k| {
        series[k]
            .iter()
            .zip(&series[k - window])
            .all(|(a, b)| (a - b).abs() <= tol * a.abs().max(f64::MIN_POSITIVE))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkfRun {
    pub index: usize,
    pub seed: u64,
    pub theta_true: KineticParams,
    /// Steady-state times [h] of the plant and of the parameter estimates.
    pub plant_steady: Option<f64>,
    pub observer_steady: Option<f64>,
    /// RMSE of `b, s, x` and `mu_max, Ks, c, Y` over the post-transient window.
    pub state_rmse: Option<[f64; 3]>,
    pub param_rmse: Option<[f64; 4]>,
    pub fault: Option<String>,
}

impl UkfRun {
    pub fn state_max(&self) -> Option<f64> {
        self.state_rmse.map(|r| r.iter().copied().fold(0.0, f64::max))
    }

    pub fn param_max(&self) -> Option<f64> {
        self.param_rmse.map(|r| r.iter().copied().fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkfSummary {
    pub runs: Vec<UkfRun>,
    pub state_rmse: [Stat; 3],
    pub param_rmse: [Stat; 4],
    /// Median over runs of the worst parameter RMSE.
    pub param_median: f64,
    /// Fractions of all runs with worst parameter / state RMSE below 1e-2.
    pub param_below_1e2: f64,
    pub state_below_1e2: f64,
    pub plant_steady: Stat,
    pub observer_steady: Stat,
}

fn ukf_run(base: &ScenarioConfig, frac: f64, index: usize, seed: u64) -> UkfRun {
    let (theta, _) = sample_theta(&base.theta_nominal, frac, seed);
    let cfg = scenario_config(base, theta, seed);
    let rec = run_with(&cfg, &Controller::Constant(cfg.constant_input));
    let mut out = UkfRun {
        index,
        seed,
        theta_true: theta,
        plant_steady: None,
        observer_steady: None,
        state_rmse: None,
        param_rmse: None,
        fault: rec.fault.clone(),
    };
    if rec.failed() {
        return out;
    }
    let ts = cfg.schedule.ts;
    let window = (cfg.campaign.steady_window / ts).round() as usize;
    let tol = cfg.campaign.steady_tol;
    let plant: Vec<Vec<f64>> = rec.steps.iter().map(|s| s.truth.to_array().to_vec()).collect();
    let observer: Vec<Vec<f64>> = rec
        .steps
        .iter()
        .map(|s| s.estimate.theta.to_array().to_vec())
        .collect();
    let kp = steady_index(&plant, window, tol);
    let ko = steady_index(&observer, window, tol);
    out.plant_steady = kp.map(|k| k as f64 * ts);
    out.observer_steady = ko.map(|k| k as f64 * ts);
    if let (Some(kp), Some(ko)) = (kp, ko) {
        let from = kp.max(ko);
        let col = |f: &dyn Fn(&super::closed_loop::StepRecord) -> (f64, f64)| {
            let (t, e): (Vec<f64>, Vec<f64>) = rec.steps.iter().map(f).unzip();
            rmse(&t, &e, from).unwrap_or(f64::NAN)
        };
        out.state_rmse = Some([
            col(&|s| (s.truth.b, s.estimate.xi.b)),
            col(&|s| (s.truth.s, s.estimate.xi.s)),
            col(&|s| (s.truth.x, s.estimate.xi.x)),
        ]);
        let th = theta.to_array();
        let mut p = [0.0; 4];
        for (i, v) in p.iter_mut().enumerate() {
            *v = col(&|s| (th[i], s.estimate.theta.to_array()[i]));
        }
        out.param_rmse = Some(p);
    }
    out
}

/// Estimator campaign at the constant input and horizon from `base.campaign`.
pub fn run_mc_ukf(n_runs: usize, perturb_frac: f64, base: &ScenarioConfig) -> Result<UkfSummary, HarnessError> {
    if n_runs == 0 {
        return Err(HarnessError::Config("n_runs must be at least 1".into()));
    }
    let base = ScenarioConfig {
        controller: ControllerKind::Constant,
        constant_input: base.campaign.ukf_input,
        t_f: base.campaign.ukf_t_f,
        campaign: super::config::CampaignSettings {
            perturb_frac,
            runs: n_runs,
            ..base.campaign.clone()
        },
        ..base.clone()
    };
    base.validate()?;
    let seeds = scenario_seeds(base.seed, n_runs);
    let runs: Vec<UkfRun> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| ukf_run(&base, perturb_frac, i, seed))
        .collect();

    let states: Vec<[f64; 3]> = runs.iter().filter_map(|r| r.state_rmse).collect();
    let params: Vec<[f64; 4]> = runs.iter().filter_map(|r| r.param_rmse).collect();
    let state_rmse = std::array::from_fn(|i| Stat::of(&states.iter().map(|r| r[i]).collect::<Vec<_>>()));
    let param_rmse = std::array::from_fn(|i| Stat::of(&params.iter().map(|r| r[i]).collect::<Vec<_>>()));
    let param_max: Vec<f64> = runs.iter().filter_map(UkfRun::param_max).collect();
    let n = runs.len() as f64;
    let below = |f: fn(&UkfRun) -> Option<f64>| {
        runs.iter().filter(|r| f(r).is_some_and(|v| v < 1e-2)).count() as f64 / n
    };
    let times = |f: fn(&UkfRun) -> Option<f64>| Stat::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
    Ok(UkfSummary {
        state_rmse,
        param_rmse,
        param_median: median(&param_max),
        param_below_1e2: below(UkfRun::param_max),
        state_below_1e2: below(UkfRun::state_max),
        plant_steady: times(|r| r.plant_steady),
        observer_steady: times(|r| r.observer_steady),
        runs,
    })
}

/// One scenario of a paired comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScenario {
    pub index: usize,
    pub seed: u64,
    pub theta_true: KineticParams,
    pub theta_checksum: StreamChecksum,
    pub mpc: RunRecord,
    pub lookup: RunRecord,
}

impl PairedScenario {
    /// Both runs saw the same parameters and the same noise draws.
    pub fn streams_match(&self) -> bool {
        self.mpc.theta_true == self.lookup.theta_true
            && self.mpc.noise_checksum == self.lookup.noise_checksum
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub scenarios: Vec<PairedScenario>,
    pub mpc: CampaignSummary,
    pub lookup: CampaignSummary,
    /// Improvement of the mean MPC gain over the mean lookup gain.
    pub improvement: Improvement,
    /// Scenarios where MPC earned strictly more than lookup.
    pub mpc_wins: usize,
}

fn summarize(label: &str, runs: Vec<(usize, &RunRecord)>) -> CampaignSummary {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (index, rec) in runs {
        match (&rec.fault, metrics(rec)) {
            (None, Ok(m)) => ok.push(ScenarioMetrics {
                index,
                theta_true: rec.theta_true,
                metrics: m,
            }),
            (Some(f), _) => failed.push((index, f.clone())),
            (None, Err(e)) => failed.push((index, e.to_string())),
        }
    }
    CampaignSummary::new(label, ok, failed)
}

/// Paired MPC / lookup comparison. `base` supplies everything but the
/// parameters, the controller and the seed.
pub fn run_mc_robustness(
    n_scenarios: usize,
    perturb_frac: f64,
    t_f: f64,
    seed: u64,
    base: &ScenarioConfig,
) -> Result<RobustnessReport, HarnessError> {
    if n_scenarios == 0 {
        return Err(HarnessError::Config("n_scenarios must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&perturb_frac) {
        return Err(HarnessError::Config("perturb_frac must lie in [0, 1)".into()));
    }
    let base = ScenarioConfig {
        t_f,
        seed,
        ..base.clone()
    };
    base.validate()?;
    let table = table_for(&base)?;
    let lookup = Controller::Lookup {
        table: &table,
        hysteresis: base.hysteresis(),
    };
    let mpc = Controller::Mpc(&base.mpc);

    let seeds = scenario_seeds(seed, n_scenarios);
    let scenarios: Vec<PairedScenario> = seeds
        .par_iter()
        .enumerate()
        .map(|(index, &s)| {
            let (theta, theta_checksum) = sample_theta(&base.theta_nominal, perturb_frac, s);
            let cfg = scenario_config(&base, theta, s);
            PairedScenario {
                index,
                seed: s,
                theta_true: theta,
                theta_checksum,
                mpc: run_with(&cfg, &mpc),
                lookup: run_with(&cfg, &lookup),
            }
        })
        .collect();

    let mpc_summary = summarize("mpc", scenarios.iter().map(|p| (p.index, &p.mpc)).collect());
    let lookup_summary = summarize("lookup", scenarios.iter().map(|p| (p.index, &p.lookup)).collect());
    let mpc_wins = scenarios
        .iter()
        .filter(|p| !p.mpc.failed() && !p.lookup.failed() && p.mpc.final_gain() > p.lookup.final_gain())
        .count();
    Ok(RobustnessReport {
        improvement: Improvement::new(mpc_summary.final_gain.mean, lookup_summary.final_gain.mean),
        mpc: mpc_summary,
        lookup: lookup_summary,
        mpc_wins,
        scenarios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steady_index_finds_settling_point() {
        let series: Vec<Vec<f64>> = (0..20)
            .map(|k| vec![if k < 8 { k as f64 } else { 8.0 }, 1.0])
            .collect();
        assert_eq!(steady_index(&series, 3, 1e-3), Some(11));
        let bump: Vec<Vec<f64>> = [1.0, 1.0, 1.0, 5.0, 6.0].iter().map(|v| vec![*v]).collect();
        assert_eq!(steady_index(&bump, 2, 1e-3), Some(2));
        let moving: Vec<Vec<f64>> = (0..20).map(|k| vec![k as f64 + 1.0]).collect();
        assert_eq!(steady_index(&moving, 3, 1e-3), None);
        assert_eq!(steady_index(&series[..3], 3, 1e-3), None);
    }

    #[test]
    fn theta_sampling_stays_in_range_and_zero_frac_is_nominal() {
        let nom = KineticParams::NOMINAL;
        for s in scenario_seeds(11, 50) {
            let (th, sum) = sample_theta(&nom, 0.15, s);
            assert_eq!(sum.draws, 4);
            for (v, n) in th.to_array().iter().zip(nom.to_array()) {
                assert!((v / n - 1.0).abs() <= 0.15 + 1e-12);
            }
        }
        assert_eq!(sample_theta(&nom, 0.0, 3).0, nom);
    }

    #[test]
    fn seeds_are_reproducible() {
        assert_eq!(scenario_seeds(4, 10), scenario_seeds(4, 10));
        assert_ne!(scenario_seeds(4, 10), scenario_seeds(5, 10));
    }

    #[test]
    fn zero_counts_rejected() {
        let base = ScenarioConfig::default();
        assert!(run_mc_ukf(0, 0.15, &base).is_err());
        assert!(run_mc_robustness(0, 0.15, 30.0, 1, &base).is_err());
    }
}
