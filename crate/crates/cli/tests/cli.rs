use std::fs;
use std::process::Command;

fn dac_sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dac-sim"))
}

#[test]
fn run_ac_writes_outputs_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ring.cfg");
    fs::write(&config, "ac.iterations = 5\nrun.reps = 2\n").unwrap();
    let out = dir.path().join("out");
    let status = dac_sim()
        .args(["run-ac", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "7", "--reps", "3"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["run_000.csv", "run_002.csv", "aggregate.csv", "summary.txt", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let saved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(saved.contains("run.seed = 7"));
    assert!(saved.contains("run.reps = 3"));
}

#[test]
fn strict_rounds_flag_changes_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = dac_sim()
        .args(["run-ac", "--reps", "1", "--strict-rounds", "--out"])
        .arg(&out)
        .status();
    // the default config has T = 500; keep it but only inspect the first row
    assert_eq!(status.unwrap().code(), Some(0));
    let text = fs::read_to_string(out.join("run_000.csv")).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[2], (60 + 100 * 5).to_string());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "ac.alpha = 10\nnot.a.key = 1\n").unwrap();
    let out = dac_sim().args(["validate-config", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not.a.key"));

    let ring = dir.path().join("ring.cfg");
    fs::write(&ring, "network.neighbor_weight = 0.4\n").unwrap();
    let out = dac_sim()
        .args(["run-ac", "--config"])
        .arg(&ring)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = dac_sim().args(["run-nac", "--config", "/nonexistent/x.cfg"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn validate_config_echoes_the_resolved_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "# cliff\nenv.kind = cliff\nac.alpha = 1\n").unwrap();
    let out = dac_sim().args(["validate-config", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("env.kind = cliff"));
    assert!(text.contains("ac.alpha = 1"));
    // the echo parses back to the same thing
    let again = dir.path().join("again.cfg");
    fs::write(&again, &text).unwrap();
    let out2 = dac_sim().args(["validate-config", "--config"]).arg(&again).output().unwrap();
    assert_eq!(String::from_utf8(out2.stdout).unwrap(), text);
}

#[test]
fn oracle_reports_exact_quantities() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cliff.cfg");
    fs::write(&cfg, "env.kind = cliff\n").unwrap();
    let dump = dir.path().join("mdp.txt");
    let out = dac_sim()
        .args(["oracle", "--config"])
        .arg(&cfg)
        .arg("--dump-mdp")
        .arg(&dump)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let j_star: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("j_star = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((j_star + 0.1855).abs() < 5e-4);
    assert!(dump.exists());
    assert!(text.contains("sigma_w = "));
}

#[test]
fn diverged_runs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.cfg");
    fs::write(&cfg, "critic.beta = 1e200\nac.iterations = 5\nrun.reps = 1\n").unwrap();
    let out = dac_sim()
        .args(["run-ac", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
