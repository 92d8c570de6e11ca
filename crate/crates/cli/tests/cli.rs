use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
seed = 3
trials = 3
[system]
n_subcarriers = 4
n_users = 2
horizon_s = 1
r_min_bps = 1e6
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_greenofdma"))
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn harvest_sweep_gives_one_row_per_rate_and_solver() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--sweep",
        "harvest_rate=1:30:5",
        "--solvers",
        "offline,online-subopt",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg = std::fs::read_to_string(out.join("aggregates.csv")).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines.len(), 1 + 5 * 2);
    assert!(lines[0].starts_with("solver,harvest_rate_w,"));
    assert!(lines[1].starts_with("offline,1.0,"));
    assert!(lines[2].starts_with("online-subopt,1.0,"));
    assert!(lines[10].starts_with("online-subopt,30.0,"));
    let trials = std::fs::read_to_string(out.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 5 * 2 * 3);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 10);
    assert!(stdout.contains("pass ") && stdout.contains('±'));
}

#[test]
fn fixed_seed_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let mut bodies = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&["--config", cfg.to_str().unwrap(), "--seed", "11", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        bodies.push((
            std::fs::read(out.join("trials.csv")).unwrap(),
            std::fs::read(out.join("aggregates.csv")).unwrap(),
        ));
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn bad_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "trials = 2\n[system]\nn_users = -1\n");
    let o = run(&["--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let cfg = write(dir.path(), "semantic.toml", "[system]\ne_max_j = 1\ne_initial_j = 5\n");
    let o = run(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("initial battery"), "{}", stderr(&o));

    let o = run(&["--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["--solvers", "greedy", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--sweep", "temperature=1:2:2", "--trials", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dp_scale_guard_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let o = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--solvers",
        "online-dp",
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("refusing"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn dp_toy_config_runs_all_solvers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/dp_toy.toml");
    let out = dir.path().join("out");
    let o = run(&["--config", cfg.to_str().unwrap(), "--trials", "2", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg = std::fs::read_to_string(out.join("aggregates.csv")).unwrap();
    assert!(agg.contains("\nonline-dp,"));
}

#[test]
fn json_emit_carries_policy_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(&["--config", cfg.to_str().unwrap(), "--emit", "json", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("trials.json")).unwrap()).unwrap();
    let first = &v[0];
    assert!(first["policy"].is_array());
    assert!(first["report"]["q_history"].is_array());
    assert!(first["report"]["audit"].is_object());
    assert!(out.join("aggregates.json").exists());
}
