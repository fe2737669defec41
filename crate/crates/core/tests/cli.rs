use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chemostat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chemostat"))
        .args(args)
        .output()
        .expect("spawn chemostat")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SHORT: &str = "t_f = 6.0\n";

#[test]
fn simulate_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "short.toml", SHORT);
    let out = |tag: &str| dir.path().join(tag).display().to_string();
    for (tag, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let o = chemostat(&["simulate", "--config", &cfg, "--seed", seed, "--out", &out(tag)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["run.csv", "run.svg", "metrics.csv", "config.toml"] {
        assert!(dir.path().join("a").join(f).is_file(), "missing {f}");
    }
    let read = |tag: &str| fs::read(dir.path().join(tag).join("run.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let rows = String::from_utf8(read("a")).unwrap();
    assert!(rows.starts_with("t,b_true,s_true,x_true,b_hat,s_hat,x_hat,mu_max_hat,Ks_hat,c_hat,Y_hat,D,delta,stage_profit,cum_gain\n"));
    assert_eq!(rows.lines().count(), 1 + 9);
}

#[test]
fn written_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "short.toml", SHORT);
    let first = dir.path().join("first");
    let o = chemostat(&["simulate", "--config", &cfg, "--seed", "3", "--out", first.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let again = dir.path().join("again");
    let echoed = first.join("config.toml");
    let o = chemostat(&["simulate", "--config", echoed.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(first.join("run.csv")).unwrap(), fs::read(again.join("run.csv")).unwrap());
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out").display().to_string();
    let cases = [
        write(dir.path(), "ts.toml", "t_f = 1.1\n"),
        write(dir.path(), "unknown.toml", "t_f = 3.0\nhorizon = 4\n"),
        write(dir.path(), "syntax.toml", "t_f = = 3\n"),
        write(dir.path(), "state.toml", "initial_state = [-1.0, 20.0, 0.0]\n"),
        dir.path().join("absent.toml").display().to_string(),
    ];
    for cfg in &cases {
        let o = chemostat(&["simulate", "--config", cfg, "--out", &out]);
        assert_eq!(code(&o), 2, "{cfg}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
    }
    assert_eq!(code(&chemostat(&["simulate", "--bogus", "--out", &out])), 2);
    assert_eq!(code(&chemostat(&["mc-ukf", "--runs", "0", "--out", &out])), 2);
    assert_eq!(code(&chemostat(&["fit", "--data", "x.csv", "--out", &out])), 2);
}

#[test]
fn unwritable_output_is_a_run_fault() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "");
    let out = format!("{blocker}/sub");
    let o = chemostat(&["build-table", "--out", &out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn robustness_pairs_share_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "short.toml", "t_f = 3.0\n");
    let out = dir.path().join("rob");
    let o = chemostat(&["mc-robustness", "--config", &cfg, "--runs", "3", "--seed", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["scenarios.csv", "summary.csv", "summary.svg", "pairs.csv", "improvement.csv", "scenario_000_mpc.csv", "scenario_002_lookup.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let mut r = csv::Reader::from_path(out.join("pairs.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name} in {h:?}"));
    let (m, l) = (col("mpc_noise_checksum"), col("lookup_noise_checksum"));
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row[m], row[l]);
    }
}

#[test]
fn table_observability_and_fit_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", "[lookup]\ntable_size = 20\n");
    let tab = dir.path().join("tab");
    assert_eq!(code(&chemostat(&["build-table", "--config", &cfg, "--out", tab.to_str().unwrap()])), 0);
    assert_eq!(fs::read_to_string(tab.join("table.csv")).unwrap().lines().count(), 21);

    let obs = dir.path().join("obs");
    assert_eq!(code(&chemostat(&["observability", "--points", "50", "--out", obs.to_str().unwrap()])), 0);
    assert_eq!(fs::read_to_string(obs.join("rank.csv")).unwrap().lines().count(), 51);

    let fit = dir.path().join("fit");
    assert_eq!(code(&chemostat(&["fit", "--out", fit.to_str().unwrap()])), 0);
    for f in ["data.csv", "profile.csv", "fit.csv", "fit.svg"] {
        assert!(fit.join(f).is_file(), "missing {f}");
    }
    let refit = dir.path().join("refit");
    let o = chemostat(&[
        "fit",
        "--data",
        fit.join("data.csv").to_str().unwrap(),
        "--profile",
        fit.join("profile.csv").to_str().unwrap(),
        "--out",
        refit.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(fit.join("fit.csv")).unwrap(), fs::read(refit.join("fit.csv")).unwrap());
}
