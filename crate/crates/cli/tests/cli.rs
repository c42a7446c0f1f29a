use std::path::Path;
use std::process::{Command, Output};

fn trajsafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajsafe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("stderr ends with a JSON record")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const TINY: &str = r#"
variants = ["safesac_h", "sac"]
eval_episodes = 4
eval_interval = 150

[env]
env_id = "point_run"
horizon = 15

[constraint]
kind = "window_average"
window = 4
threshold = 0.3
monitor = { type = "state_norm", indices = [2, 3] }

[collect]
n_trajectories = 20

[safety]
hidden_size = 4
decoder_hidden = [6]
epochs = 2
minibatch = 16

[agent]
hidden = [8]
total_steps = 150
warmup_steps = 60
update_after = 60
update_every = 30
updates_per_cycle = 2
batch_size = 16
log_interval = 50
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("exp.toml");
    let out = dir.join("out");
    std::fs::write(&path, format!("output_dir = {:?}\n{TINY}", out.to_str().unwrap())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_through_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let m = stdout_json(&trajsafe(&["collect", "--config", &cfg]));
    let total = m["trajectories"]["safe"].as_u64().unwrap() + m["trajectories"]["unsafe_"].as_u64().unwrap();
    assert_eq!(total, 20);
    assert_eq!(stdout_json(&trajsafe(&["label", "--config", &cfg])), m);
    let s = stdout_json(&trajsafe(&["train-safety", "--config", &cfg]));
    assert!(s["best_holdout_accuracy"].as_f64().unwrap() <= 1.0);
    let t = stdout_json(&trajsafe(&["train-agent", "--config", &cfg, "--seeds", "0"]));
    assert_eq!(t["runs"], 2);
    let e = stdout_json(&trajsafe(&["evaluate", "--config", &cfg, "--variant", "safesac_h"]));
    assert_eq!(e["episodes"], 4);
    let c = e["compliance_frac"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
    let r = stdout_json(&trajsafe(&["report", "--config", &cfg]));
    assert_eq!(r["variants"].as_array().unwrap().len(), 2);
    let out = dir.path().join("out");
    for f in ["report.json", "reward.svg", "compliance.svg", "dataset/manifest.json", "safety/model.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn missing_inputs_give_a_machine_readable_error() {
    let out = trajsafe(&["label"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "argument");

    let dir = tempfile::tempdir().unwrap();
    let out = trajsafe(&["label", "--env", "point_run", "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "io");
}

#[test]
fn bad_config_and_corrupt_checkpoint_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n_seeds = 0\n[env]\nenv_id = \"thermo\"\n").unwrap();
    let out = trajsafe(&["report", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    assert!(rec["error"]["message"].as_str().unwrap().contains("n_seeds"));

    let ck = dir.path().join("agent.json");
    std::fs::write(&ck, "{\"format\":\"trajsafe.agent\",\"version\":1}").unwrap();
    let out = trajsafe(&["evaluate", "--env", "point_run", "--agent", ck.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "load");
}
