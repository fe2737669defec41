//! CSV and SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::campaign::{RobustnessReport, UkfSummary};
use super::closed_loop::RunRecord;
use super::metrics::CampaignSummary;
use super::HarnessError;

/// One row of a run CSV. Field names are the column headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub t: f64,
    pub b_true: f64,
    pub s_true: f64,
    pub x_true: f64,
    pub b_hat: f64,
    pub s_hat: f64,
    pub x_hat: f64,
    pub mu_max_hat: f64,
    #[serde(rename = "Ks_hat")]
    pub ks_hat: f64,
    pub c_hat: f64,
    #[serde(rename = "Y_hat")]
    pub y_hat: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub delta: u8,
    pub stage_profit: f64,
    pub cum_gain: f64,
}

pub const RUN_HEADERS: [&str; 15] = [
    "t", "b_true", "s_true", "x_true", "b_hat", "s_hat", "x_hat", "mu_max_hat", "Ks_hat", "c_hat",
    "Y_hat", "D", "delta", "stage_profit", "cum_gain",
];

pub fn run_rows(rec: &RunRecord) -> Vec<RunRow> {
    rec.steps
        .iter()
        .map(|s| RunRow {
            t: s.t,
            b_true: s.truth.b,
            s_true: s.truth.s,
            x_true: s.truth.x,
            b_hat: s.estimate.xi.b,
            s_hat: s.estimate.xi.s,
            x_hat: s.estimate.xi.x,
            mu_max_hat: s.estimate.theta.mu_max,
            ks_hat: s.estimate.theta.ks,
            c_hat: s.estimate.theta.c,
            y_hat: s.estimate.theta.y,
            d: s.input.dilution,
            delta: u8::from(s.input.filter),
            stage_profit: s.stage_profit,
            cum_gain: s.cum_gain,
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_run_csv(rec: &RunRecord, path: &Path) -> Result<(), HarnessError> {
    if rec.steps.is_empty() {
        return Err(HarnessError::Config("empty run record".into()));
    }
    write_rows(path, &run_rows(rec))
}

pub fn read_run_csv(path: &Path) -> Result<Vec<RunRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.iter().ne(RUN_HEADERS) {
        return Err(HarnessError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(format!("unexpected header {headers:?}")),
        });
    }
    r.deserialize()
        .collect::<Result<Vec<RunRow>, _>>()
        .map_err(csv_err(path))
}

/// A named line series against a shared abscissa.
pub struct Series<'a> {
    pub name: &'a str,
    pub values: Vec<f64>,
}

/// A panel of line series.
pub struct Panel<'a> {
    pub title: &'a str,
    pub series: Vec<Series<'a>>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 48.0;

/// Renders stacked panels sharing the x axis, one `<polyline>` per series.
pub fn svg_panels(x: &[f64], x_label: &str, panels: &[Panel]) -> String {
    let height = panels.len() as f64 * (PANEL_H + MARGIN) + MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let (x0, x1) = bounds(x.iter().copied());
    let plot_w = WIDTH - 2.0 * MARGIN;
    for (p, panel) in panels.iter().enumerate() {
        let top = MARGIN + p as f64 * (PANEL_H + MARGIN);
        let (y0, y1) = bounds(panel.series.iter().flat_map(|s| s.values.iter().copied()));
        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(out, r#"<text x="{MARGIN}" y="{}">{}</text>"#, top - 6.0, escape(panel.title));
        let _ = writeln!(out, r#"<text x="4" y="{}">{}</text>"#, top + 10.0, fmt_tick(y1));
        let _ = writeln!(out, r#"<text x="4" y="{}">{}</text>"#, top + PANEL_H, fmt_tick(y0));
        for (i, s) in panel.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = x
                .iter()
                .zip(&s.values)
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(&a, &b)| {
                    let px = MARGIN + (a - x0) / (x1 - x0) * plot_w;
                    let py = top + PANEL_H - (b - y0) / (y1 - y0) * PANEL_H;
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                escape(s.name)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                WIDTH - MARGIN - 90.0,
                top + 14.0 + 13.0 * i as f64,
                escape(s.name)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">{}</text>"#,
        WIDTH / 2.0,
        height - 12.0,
        escape(x_label)
    );
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_run_svg(rec: &RunRecord, path: &Path) -> Result<(), HarnessError> {
    if rec.steps.is_empty() {
        return Err(HarnessError::Config("empty run record".into()));
    }
    let rows = run_rows(rec);
    let col = |f: fn(&RunRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let t = col(|r| r.t);
    let pair = |title, a, fa: fn(&RunRow) -> f64, b, fb: fn(&RunRow) -> f64| Panel {
        title,
        series: vec![
            Series { name: a, values: col(fa) },
            Series { name: b, values: col(fb) },
        ],
    };
    let panels = [
        pair("biomass [g/L]", "b_true", |r| r.b_true, "b_hat", |r| r.b_hat),
        pair("substrate [g/L]", "s_true", |r| r.s_true, "s_hat", |r| r.s_hat),
        pair("DNA [g/L]", "x_true", |r| r.x_true, "x_hat", |r| r.x_hat),
        pair("inputs", "D", |r| r.d, "delta", |r| f64::from(r.delta)),
        Panel {
            title: "cumulative gain",
            series: vec![Series {
                name: "cum_gain",
                values: col(|r| r.cum_gain),
            }],
        },
    ];
    fs::write(path, svg_panels(&t, "t [h]", &panels)).map_err(io_err(path))
}

#[derive(Serialize)]
struct ScenarioRow<'a> {
    controller: &'a str,
    index: usize,
    mu_max: f64,
    #[serde(rename = "Ks")]
    ks: f64,
    c: f64,
    #[serde(rename = "Y")]
    y: f64,
    final_gain: f64,
    final_biomass: f64,
    max_toxin: f64,
    mean_dilution: f64,
    activation_fraction: f64,
}

#[derive(Serialize)]
struct StatRow<'a> {
    controller: &'a str,
    metric: &'a str,
    mean: f64,
    std: f64,
    n: usize,
    failed: usize,
}

/// Per-scenario metrics of several summaries in one file.
pub fn write_scenarios_csv(summaries: &[&CampaignSummary], path: &Path) -> Result<(), HarnessError> {
    let rows: Vec<ScenarioRow> = summaries
        .iter()
        .flat_map(|s| {
            s.scenarios.iter().map(|m| ScenarioRow {
                controller: &s.label,
                index: m.index,
                mu_max: m.theta_true.mu_max,
                ks: m.theta_true.ks,
                c: m.theta_true.c,
                y: m.theta_true.y,
                final_gain: m.metrics.final_gain,
                final_biomass: m.metrics.final_biomass,
                max_toxin: m.metrics.max_toxin,
                mean_dilution: m.metrics.mean_dilution,
                activation_fraction: m.metrics.activation_fraction,
            })
        })
        .collect();
    write_rows(path, &rows)
}

/// Mean and standard deviation of every metric.
pub fn write_summary_csv(summaries: &[&CampaignSummary], path: &Path) -> Result<(), HarnessError> {
    let rows: Vec<StatRow> = summaries
        .iter()
        .flat_map(|s| {
            s.rows().into_iter().map(|(metric, st)| StatRow {
                controller: &s.label,
                metric,
                mean: st.mean,
                std: st.std,
                n: s.scenarios.len(),
                failed: s.failed.len(),
            })
        })
        .collect();
    write_rows(path, &rows)
}

/// Final gain and maximum toxin per scenario, one polyline per controller.
pub fn write_summary_svg(summaries: &[&CampaignSummary], path: &Path) -> Result<(), HarnessError> {
    let n = summaries.iter().map(|s| s.scenarios.len()).max().unwrap_or(0);
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let panel = |title, f: fn(&super::metrics::RunMetrics) -> f64| Panel {
        title,
        series: summaries
            .iter()
            .map(|s| Series {
                name: &s.label,
                values: s.scenarios.iter().map(|m| f(&m.metrics)).collect(),
            })
            .collect(),
    };
    let panels = [
        panel("final cumulative gain", |m| m.final_gain),
        panel("maximum DNA [g/L]", |m| m.max_toxin),
        panel("filter activation fraction", |m| m.activation_fraction),
    ];
    fs::write(path, svg_panels(&x, "scenario", &panels)).map_err(io_err(path))
}

/// Per-scenario CSV and SVG of every paired run, plus the campaign tables.
pub fn write_robustness(report: &RobustnessReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for p in &report.scenarios {
        for rec in [&p.mpc, &p.lookup] {
            if rec.steps.is_empty() {
                continue;
            }
            let stem = format!("scenario_{:03}_{}", p.index, label(rec));
            write_run_csv(rec, &dir.join(format!("{stem}.csv")))?;
        }
    }
    let both = [&report.mpc, &report.lookup];
    write_scenarios_csv(&both, &dir.join("scenarios.csv"))?;
    write_summary_csv(&both, &dir.join("summary.csv"))?;
    write_summary_svg(&both, &dir.join("summary.svg"))?;

    #[derive(Serialize)]
    struct PairRow {
        index: usize,
        seed: u64,
        theta_checksum: String,
        mpc_noise_checksum: String,
        lookup_noise_checksum: String,
        noise_draws: u64,
        streams_match: bool,
        mpc_gain: f64,
        lookup_gain: f64,
    }
    let rows: Vec<PairRow> = report
        .scenarios
        .iter()
        .map(|p| PairRow {
            index: p.index,
            seed: p.seed,
            theta_checksum: format!("{:016x}", p.theta_checksum.hash),
            mpc_noise_checksum: format!("{:016x}", p.mpc.noise_checksum.hash),
            lookup_noise_checksum: format!("{:016x}", p.lookup.noise_checksum.hash),
            noise_draws: p.mpc.noise_checksum.draws,
            streams_match: p.streams_match(),
            mpc_gain: p.mpc.final_gain(),
            lookup_gain: p.lookup.final_gain(),
        })
        .collect();
    write_rows(&dir.join("pairs.csv"), &rows)
}

fn label(rec: &RunRecord) -> &'static str {
    match rec.controller {
        super::config::ControllerKind::Mpc => "mpc",
        super::config::ControllerKind::Lookup => "lookup",
        super::config::ControllerKind::Constant => "constant",
    }
}

/// Per-run RMSE table and quantity summary of an estimator campaign.
pub fn write_ukf(summary: &UkfSummary, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    #[derive(Serialize)]
    struct Row {
        index: usize,
        seed: u64,
        plant_steady: Option<f64>,
        observer_steady: Option<f64>,
        rmse_b: Option<f64>,
        rmse_s: Option<f64>,
        rmse_x: Option<f64>,
        rmse_mu_max: Option<f64>,
        #[serde(rename = "rmse_Ks")]
        rmse_ks: Option<f64>,
        rmse_c: Option<f64>,
        #[serde(rename = "rmse_Y")]
        rmse_y: Option<f64>,
        fault: Option<String>,
    }
    let rows: Vec<Row> = summary
        .runs
        .iter()
        .map(|r| Row {
            index: r.index,
            seed: r.seed,
            plant_steady: r.plant_steady,
            observer_steady: r.observer_steady,
            rmse_b: r.state_rmse.map(|v| v[0]),
            rmse_s: r.state_rmse.map(|v| v[1]),
            rmse_x: r.state_rmse.map(|v| v[2]),
            rmse_mu_max: r.param_rmse.map(|v| v[0]),
            rmse_ks: r.param_rmse.map(|v| v[1]),
            rmse_c: r.param_rmse.map(|v| v[2]),
            rmse_y: r.param_rmse.map(|v| v[3]),
            fault: r.fault.clone(),
        })
        .collect();
    write_rows(&dir.join("ukf_runs.csv"), &rows)?;

    #[derive(Serialize)]
    struct Q<'a> {
        quantity: &'a str,
        mean: f64,
        std: f64,
    }
    let names = ["b", "s", "x", "mu_max", "Ks", "c", "Y"];
    let stats = summary.state_rmse.iter().chain(&summary.param_rmse);
    let mut rows: Vec<Q> = names
        .iter()
        .zip(stats)
        .map(|(n, s)| Q {
            quantity: n,
            mean: s.mean,
            std: s.std,
        })
        .collect();
    rows.push(Q {
        quantity: "plant_steady_h",
        mean: summary.plant_steady.mean,
        std: summary.plant_steady.std,
    });
    rows.push(Q {
        quantity: "observer_steady_h",
        mean: summary.observer_steady.mean,
        std: summary.observer_steady.std,
    });
    write_rows(&dir.join("ukf_summary.csv"), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::closed_loop::run_closed_loop;
    use crate::harness::config::{ControllerKind, ScenarioConfig};

    fn record() -> RunRecord {
        run_closed_loop(&ScenarioConfig {
            controller: ControllerKind::Constant,
            t_f: 6.0,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record();
        let path = dir.path().join("run.csv");
        write_run_csv(&rec, &path).unwrap();
        let first = fs::read_to_string(&path).unwrap();
        assert_eq!(first.lines().next().unwrap(), RUN_HEADERS.join(","));
        let back = read_run_csv(&path).unwrap();
        let orig = run_rows(&rec);
        assert_eq!(back.len(), orig.len());
        for (a, b) in back.iter().zip(&orig) {
            assert_eq!(a, b);
            assert_eq!(a.cum_gain.to_bits(), b.cum_gain.to_bits());
            assert_eq!(a.mu_max_hat.to_bits(), b.mu_max_hat.to_bits());
        }
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.svg");
        write_run_svg(&record(), &path).unwrap();
        let svg = fs::read_to_string(&path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 9);
        for name in ["b_true", "b_hat", "s_true", "s_hat", "x_true", "x_hat", "D", "delta", "cum_gain"] {
            assert!(svg.contains(&format!("<title>{name}</title>")), "{name}");
        }
    }

    #[test]
    fn empty_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record();
        rec.steps.clear();
        assert!(write_run_csv(&rec, &dir.path().join("a.csv")).is_err());
        assert!(write_run_svg(&rec, &dir.path().join("a.svg")).is_err());
    }

    #[test]
    fn io_errors_name_the_path() {
        let err = write_run_csv(&record(), Path::new("/nonexistent/dir/run.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/run.csv"));
    }
}
