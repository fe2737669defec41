use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use chemostat::control::build_table;
use chemostat::harness::emit::{self, Panel, Series};
use chemostat::harness::{self, metrics, run_closed_loop, HarnessError, ScenarioConfig};
use chemostat::identification::{self, Dataset, DProfile};
use chemostat::model::ProcessState;
use chemostat::observability::rank_campaign;

#[derive(Parser)]
#[command(name = "chemostat", version, about = "Recirculating chemostat simulation, estimation and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML scenario file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// One closed-loop scenario.
    Simulate(Common),
    /// Estimator Monte Carlo campaign at constant input.
    McUkf {
        #[command(flatten)]
        common: Common,
        /// Number of runs; defaults to the campaign section of the config
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Paired MPC / lookup comparison over sampled parameters.
    McRobustness {
        #[command(flatten)]
        common: Common,
        /// Number of runs; defaults to the campaign section of the config
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Offline lookup table of optimal steady dilutions.
    BuildTable(Common),
    /// Rank of the observability matrix at sampled operating points.
    Observability {
        #[command(flatten)]
        common: Common,
        /// Number of sampled points; defaults to the observability section of the config
        #[arg(long)]
        points: Option<usize>,
    },
    /// Least-squares fit of the kinetic parameters.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (t, b, s, x); synthesized from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dilution profile CSV (t, D); required with --data.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ScenarioConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| match e {
            HarnessError::Io { path, source } => HarnessError::Config(format!("{path}: {source}")),
            other => other,
        })?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &ScenarioConfig) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let fail = |e: csv::Error| HarnessError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn simulate(common: &Common) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    cfg.validate()?;
    prepare_out(&common.out, &cfg)?;
    let rec = run_closed_loop(&cfg)?;
    if !rec.steps.is_empty() {
        emit::write_run_csv(&rec, &common.out.join("run.csv"))?;
        emit::write_run_svg(&rec, &common.out.join("run.svg"))?;
    }
    if let Some(f) = &rec.fault {
        return Err(HarnessError::Fault(f.clone()));
    }
    let m = metrics(&rec)?;
    write_csv(&common.out.join("metrics.csv"), &[m])?;
    println!(
        "final_gain={} final_biomass={} max_toxin={} mean_dilution={} activation_fraction={}",
        m.final_gain, m.final_biomass, m.max_toxin, m.mean_dilution, m.activation_fraction
    );
    Ok(())
}

fn mc_ukf(common: &Common, runs: Option<usize>) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    cfg.validate()?;
    prepare_out(&common.out, &cfg)?;
    let n = runs.unwrap_or(cfg.campaign.ukf_runs);
    info!("estimator campaign: {n} runs");
    let s = harness::run_mc_ukf(n, cfg.campaign.perturb_frac, &cfg)?;
    emit::write_ukf(&s, &common.out)?;
    let failed = s.runs.iter().filter(|r| r.fault.is_some()).count();
    println!(
        "runs={} failed={} param_rmse_median={:e} param_below_1e-2={} state_below_1e-2={} plant_steady_h={} observer_steady_h={}",
        s.runs.len(),
        failed,
        s.param_median,
        s.param_below_1e2,
        s.state_below_1e2,
        s.plant_steady.mean,
        s.observer_steady.mean
    );
    if failed == s.runs.len() {
        return Err(HarnessError::Fault("every run failed".into()));
    }
    Ok(())
}

fn mc_robustness(common: &Common, runs: Option<usize>) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    cfg.validate()?;
    prepare_out(&common.out, &cfg)?;
    let n = runs.unwrap_or(cfg.campaign.runs);
    info!("robustness campaign: {n} paired scenarios");
    let rep = harness::run_mc_robustness(n, cfg.campaign.perturb_frac, cfg.t_f, cfg.seed, &cfg)?;
    emit::write_robustness(&rep, &common.out)?;

    #[derive(Serialize)]
    struct Row {
        mpc_mean_gain: f64,
        lookup_mean_gain: f64,
        improvement_vs_mpc: f64,
        improvement_vs_lookup: f64,
        mpc_wins: usize,
        scenarios: usize,
    }
    write_csv(
        &common.out.join("improvement.csv"),
        &[Row {
            mpc_mean_gain: rep.mpc.final_gain.mean,
            lookup_mean_gain: rep.lookup.final_gain.mean,
            improvement_vs_mpc: rep.improvement.relative_to_better,
            improvement_vs_lookup: rep.improvement.relative_to_base,
            mpc_wins: rep.mpc_wins,
            scenarios: n,
        }],
    )?;
    for s in [&rep.mpc, &rep.lookup] {
        let parts: Vec<String> = s
            .rows()
            .iter()
            .map(|(name, st)| format!("{name}={:.4}±{:.4}", st.mean, st.std))
            .collect();
        println!("{}: {} failed={}", s.label, parts.join(" "), s.failed.len());
    }
    println!(
        "mpc_wins={}/{n} improvement: {:.1}% of mpc, {:.1}% of lookup",
        rep.mpc_wins,
        100.0 * rep.improvement.relative_to_better,
        100.0 * rep.improvement.relative_to_base
    );
    if rep.mpc.scenarios.is_empty() && rep.lookup.scenarios.is_empty() {
        return Err(HarnessError::Fault("every run failed".into()));
    }
    Ok(())
}

fn build_table_cmd(common: &Common) -> Result<(), HarnessError> {
    let mut cfg = load(common)?;
    if let Some(s) = common.seed {
        cfg.lookup.table_seed = s;
    }
    cfg.validate()?;
    prepare_out(&common.out, &cfg)?;
    let table = build_table(
        cfg.lookup.table_size,
        &cfg.table_ranges(),
        cfg.lookup.table_seed,
        &cfg.constants,
        cfg.theta_nominal,
        cfg.hysteresis().x_on,
    )
    .map_err(|e| HarnessError::Config(e.to_string()))?;
    let path = common.out.join("table.csv");
    table
        .write_csv(&path)
        .map_err(|e| HarnessError::Fault(e.to_string()))?;
    println!("entries={} path={}", table.entries().len(), path.display());
    Ok(())
}

fn observability_cmd(common: &Common, points: Option<usize>) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    cfg.validate()?;
    prepare_out(&common.out, &cfg)?;
    let n = points.unwrap_or(cfg.observability.points);
    let rep = rank_campaign(n, &cfg.sample_ranges(), cfg.seed, &cfg.constants, cfg.observability.tol_ratio)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    write_csv(&common.out.join("rank.csv"), &rep.points)?;
    let line = rep.summary_line();
    write_text(&common.out.join("rank_summary.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn fit_cmd(common: &Common, data: Option<&Path>, profile: Option<&Path>) -> Result<(), HarnessError> {
    let cfg = load(common)?;
    cfg.validate()?;
    prepare_out(&common.out, &cfg)?;
    let id = &cfg.identification;
    let model = cfg.reduced_model();
    let ident = |e: identification::IdentError| match e {
        identification::IdentError::Dataset(m) | identification::IdentError::Setup(m) => HarnessError::Config(m),
        identification::IdentError::Io { path, msg } => HarnessError::Config(format!("{path}: {msg}")),
        other => HarnessError::Fault(other.to_string()),
    };
    let (dataset, d_profile) = match (data, profile) {
        (Some(d), Some(p)) => (
            Dataset::read_csv(d, Some(ProcessState::from_array(id.experiment.xi0))).map_err(ident)?,
            DProfile::read_csv(p).map_err(ident)?,
        ),
        (Some(_), None) => return Err(HarnessError::Config("--data requires --profile".into())),
        (None, _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let ds = identification::synthesize(&cfg.theta_true, &id.experiment, &model, &mut rng).map_err(ident)?;
            let p = id.experiment.d_profile().map_err(ident)?;
            ds.write_csv(&common.out.join("data.csv")).map_err(ident)?;
            p.write_csv(&common.out.join("profile.csv")).map_err(ident)?;
            (ds, p)
        }
    };
    let init = id.theta_init.unwrap_or(cfg.theta_nominal);
    let res = identification::fit(&dataset, &d_profile, &init, &cfg.fit_bounds(), &model, &id.options).map_err(ident)?;

    #[derive(Serialize)]
    struct Row<'a> {
        parameter: &'a str,
        estimate: f64,
        half_width_pct: f64,
        at_bound: bool,
    }
    let est = res.theta_hat.to_array();
    let rows: Vec<Row> = ["mu_max", "Ks", "c", "Y"]
        .iter()
        .enumerate()
        .map(|(i, p)| Row {
            parameter: p,
            estimate: est[i],
            half_width_pct: res.half_widths_pct[i],
            at_bound: res.at_bound[i],
        })
        .collect();
    write_csv(&common.out.join("fit.csv"), &rows)?;

    let fitted = model
        .simulate(&res.theta_hat, &dataset.xi0, &dataset.times, &d_profile)
        .map_err(ident)?;
    let meas = |c: &[Option<f64>]| c.iter().map(|v| v.unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let pred = |i: usize| fitted.iter().map(|p| p.to_array()[i]).collect::<Vec<_>>();
    let panels = [
        Panel { title: "biomass [g/L]", series: vec![Series { name: "b_measured", values: meas(&dataset.b) }, Series { name: "b_fit", values: pred(0) }] },
        Panel { title: "substrate [g/L]", series: vec![Series { name: "s_measured", values: meas(&dataset.s) }, Series { name: "s_fit", values: pred(1) }] },
        Panel { title: "DNA [g/L]", series: vec![Series { name: "x_measured", values: meas(&dataset.x) }, Series { name: "x_fit", values: pred(2) }] },
    ];
    write_text(&common.out.join("fit.svg"), &emit::svg_panels(&dataset.times, "t [h]", &panels))?;

    println!(
        "converged={} iterations={} residual_norm={:e} {}",
        res.converged,
        res.iterations,
        res.residual_norm,
        rows.iter()
            .map(|r| format!("{}={}±{:.2}%", r.parameter, r.estimate, r.half_width_pct))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if res.flagged() {
        eprintln!("warning: fit flagged (converged={}, at_bound={:?})", res.converged, res.at_bound);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::McUkf { common, runs } => mc_ukf(common, *runs),
        Command::McRobustness { common, runs } => mc_robustness(common, *runs),
        Command::BuildTable(c) => build_table_cmd(c),
        Command::Observability { common, points } => observability_cmd(common, *points),
        Command::Fit { common, data, profile } => fit_cmd(common, data.as_deref(), profile.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                HarnessError::Fault(_) | HarnessError::Io { .. } => ExitCode::from(3),
            }
        }
    }
}
