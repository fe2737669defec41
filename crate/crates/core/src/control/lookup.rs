//! Hysteresis filter switching plus an offline table of steady-state optimal dilution rates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{steady_state_biomass, AugmentedState, ControlInput, KineticParams, PlantConstants};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("policy table must contain at least one entry")]
    Empty,
    #[error("table entry {index}: D* = {d} outside [0, D_max]")]
    OutOfRange { index: usize, d: f64 },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisConfig {
    pub x_on: f64,
    pub x_off: f64,
}

impl HysteresisConfig {
    /// Thresholds at 40% and 30% of the critical DNA level.
    pub fn from_constants(k: &PlantConstants) -> Self {
        HysteresisConfig {
            x_on: 0.4 * k.x_crit,
            x_off: 0.3 * k.x_crit,
        }
    }

    pub fn validate(&self, k: &PlantConstants) -> Result<(), String> {
        if 0.0 < self.x_off && self.x_off < self.x_on && self.x_on < k.x_crit {
            Ok(())
        } else {
            Err(format!(
                "hysteresis thresholds need 0 < x_off < x_on < x_crit, got {self:?}"
            ))
        }
    }
}

pub fn hysteresis_delta(x_hat: f64, prev: bool, cfg: &HysteresisConfig) -> bool {
    if x_hat >= cfg.x_on {
        true
    } else if x_hat <= cfg.x_off {
        false
    } else {
        prev
    }
}

/// Maximizes steady-state productivity `D * b_ss(D)` with the DNA level frozen.
///
/// Golden-section search over the pre-washout interval; productivity is
/// unimodal there.
pub fn optimal_steady_dilution(theta: &KineticParams, k: &PlantConstants, x_fixed: f64) -> f64 {
    let mu_eff = theta.mu_max * (1.0 - x_fixed / k.x_crit);
    if mu_eff <= 0.0 {
        return 0.0;
    }
    let washout = mu_eff * k.s_in / (theta.ks + k.s_in);
    let productivity = |d: f64| d * steady_state_biomass(d, theta, k, x_fixed).biomass();
    let (mut lo, mut hi) = (0.0, washout.min(k.d_max));
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let (mut fa, mut fb) = (productivity(a), productivity(b));
    while hi - lo > 1e-13 * (1.0 + hi) {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = productivity(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = productivity(b);
        }
    }
    let d = 0.5 * (lo + hi);
    // the upper bound can be the optimum when D_max binds
    let edge = washout.min(k.d_max);
    let d = if productivity(edge) > productivity(d) { edge } else { d };
    if productivity(d) > 0.0 {
        d
    } else {
        0.0
    }
}

/// Box of kinetic parameters, one `[lo, hi]` interval per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

impl ParamRanges {
    pub fn around(nominal: &KineticParams, frac: f64) -> Self {
        let a = nominal.to_array();
        ParamRanges {
            lo: a.map(|v| v * (1.0 - frac)),
            hi: a.map(|v| v * (1.0 + frac)),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> KineticParams {
        KineticParams::from_array(std::array::from_fn(|i| {
            if self.hi[i] > self.lo[i] {
                rng.gen_range(self.lo[i]..=self.hi[i])
            } else {
                self.lo[i]
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub theta: KineticParams,
    pub d_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    entries: Vec<PolicyEntry>,
    theta_nom: KineticParams,
}

impl PolicyTable {
    pub fn new(
        entries: Vec<PolicyEntry>,
        theta_nom: KineticParams,
        k: &PlantConstants,
    ) -> Result<Self, TableError> {
        if entries.is_empty() {
            return Err(TableError::Empty);
        }
        if let Some((index, e)) = entries
            .iter()
            .enumerate()
            .find(|(_, e)| !(e.d_star >= 0.0 && e.d_star <= k.d_max))
        {
            return Err(TableError::OutOfRange { index, d: e.d_star });
        }
        Ok(PolicyTable { entries, theta_nom })
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn theta_nom(&self) -> &KineticParams {
        &self.theta_nom
    }

    /// Index of the nearest entry in nominal-normalized Euclidean distance; lowest index on ties.
    pub fn nearest(&self, theta_hat: &KineticParams) -> usize {
        let q = theta_hat.to_array();
        let nom = self.theta_nom.to_array();
        let mut best = (f64::INFINITY, 0);
        for (i, e) in self.entries.iter().enumerate() {
            let p = e.theta.to_array();
            let dist: f64 = (0..4).map(|j| ((q[j] - p[j]) / nom[j]).powi(2)).sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TableError> {
        let ctx = |source| TableError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(ctx)?;
        w.write_record(["mu_max", "Ks", "c", "Y", "D_star"]).map_err(ctx)?;
        for e in &self.entries {
            let t = e.theta.to_array();
            w.write_record([t[0], t[1], t[2], t[3], e.d_star].map(|v| v.to_string()))
                .map_err(ctx)?;
        }
        w.flush().map_err(|e| ctx(e.into()))
    }

    pub fn read_csv(
        path: &Path,
        theta_nom: KineticParams,
        k: &PlantConstants,
    ) -> Result<Self, TableError> {
        let p = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|source| TableError::Csv {
            path: p.clone(),
            source,
        })?;
        let header = r
            .headers()
            .map_err(|source| TableError::Csv {
                path: p.clone(),
                source,
            })?
            .clone();
        if header.iter().collect::<Vec<_>>() != ["mu_max", "Ks", "c", "Y", "D_star"] {
            return Err(TableError::Format {
                path: p,
                msg: format!("unexpected header {header:?}"),
            });
        }
        let mut entries = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|source| TableError::Csv {
                path: p.clone(),
                source,
            })?;
            let vals: Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| TableError::Format {
                path: p.clone(),
                msg: format!("row {}: {e}", line + 1),
            })?;
            if vals.len() != 5 {
                return Err(TableError::Format {
                    path: p,
                    msg: format!("row {} has {} fields", line + 1, vals.len()),
                });
            }
            entries.push(PolicyEntry {
                theta: KineticParams::from_array([vals[0], vals[1], vals[2], vals[3]]),
                d_star: vals[4],
            });
        }
        PolicyTable::new(entries, theta_nom, k)
    }
}

/// Samples `n` parameter sets uniformly in `ranges` and tabulates the optimal
/// steady dilution for each, with the DNA level held at `x_design`.
pub fn build_table(
    n: usize,
    ranges: &ParamRanges,
    seed: u64,
    k: &PlantConstants,
    theta_nom: KineticParams,
    x_design: f64,
) -> Result<PolicyTable, TableError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|_| {
            let theta = ranges.sample(&mut rng);
            PolicyEntry {
                theta,
                d_star: optimal_steady_dilution(&theta, k, x_design),
            }
        })
        .collect();
    PolicyTable::new(entries, theta_nom, k)
}

pub fn lookup_select(theta_hat: &KineticParams, table: &PolicyTable) -> f64 {
    table.entries[table.nearest(theta_hat)].d_star
}

pub fn lookup_step(
    mean: &AugmentedState,
    delta_prev: bool,
    table: &PolicyTable,
    hys: &HysteresisConfig,
) -> ControlInput {
    ControlInput::new(
        lookup_select(&mean.theta, table),
        hysteresis_delta(mean.xi.x, delta_prev, hys),
    )
}
