use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[run]
model = \"mlp:2-8-8-4\"
seed = 5

[data]
samples = 400

[teacher]
epochs = 4

[strategy]
epochs = 3

[train]
epochs = 2
";

fn sdq(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sdq"));
    c.args(args).env_remove("SDQ_SEED").env_remove("SDQ_OUT_DIR");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("sdq runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn strategy_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let run = tmp.path().join("run");
    let run_s = run.display().to_string();

    let o = sdq(&["generate-strategy", "--config", &cfg, "--out", &run_s], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "layer_bits").split(',').count(), 3);

    let o = sdq(&["train", "--config", &cfg, "--out", &run_s], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q: f64 = value(&stdout(&o), "quantized_accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&q));
    for f in ["config.toml", "metrics.jsonl", "teacher.ckpt", "search.ckpt", "strategy.txt", "student.ckpt", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let ckpt = run.join("student.ckpt").display().to_string();
    let strat = run.join("strategy.txt").display().to_string();
    let o = sdq(&["eval", "--checkpoint", &ckpt, "--strategy", &strat], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc: f64 = value(&stdout(&o), "accuracy").parse().unwrap();
    assert_eq!(acc, q);

    let rep = tmp.path().join("rep").display().to_string();
    let o = sdq(&["report", "--run", &run_s, "--out", &rep], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = std::fs::read_to_string(tmp.path().join("rep/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("epoch,fc0,fc1,fc2"));
    assert_eq!(traj.lines().count(), 1 + 3);
}

#[test]
fn cost_with_hardware_rounding() {
    let tmp = tempfile::tempdir().unwrap();
    // (3·15 + 4·85)/100 = 3.85 bits on average
    let s = write(
        tmp.path(),
        "s.txt",
        "sdq-strategy 1\nmodel toy\ncandidates 2,3,4,5,6,7,8\nactivation_bits 4\nlayers 2\na 3 15 free\nb 4 85 free\n",
    );
    let t = write(tmp.path(), "t.txt", "a conv 15 8 8 1\nb dense 85 1 1 1\n");
    let o = sdq(&["cost", "--strategy", &s, "--layers", &t, "--hw", "2,4,8,16"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let avg: f64 = value(&out, "avg_weight_bits").parse().unwrap();
    let w: f64 = value(&out, "wcr").parse().unwrap();
    let dw: f64 = value(&out, "deployed_wcr").parse().unwrap();
    assert!((avg - 3.85).abs() < 1e-12);
    assert!(dw <= w);
    assert_eq!(dw, 8.0);

    let o = sdq(&["cost", "--strategy", &s], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=config "));
}

#[test]
fn resnet18_cost_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::from("sdq-strategy 1\nmodel resnet18\ncandidates 4\nactivation_bits 4\n");
    let table = sdq_core::cost::resnet18_layer_table();
    text.push_str(&format!("layers {}\n", table.len()));
    for m in &table {
        text.push_str(&format!("{} 4 {} free\n", m.name, m.params));
    }
    let s = write(tmp.path(), "s.txt", &text);
    let o = sdq(&["cost", "--strategy", &s], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let size: f64 = value(&stdout(&o), "size_bytes").parse().unwrap();
    assert!((size / 5.8e6 - 1.0).abs() < 0.03);
}

#[test]
fn no_pressure_keeps_max_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("[strategy]\n", "[strategy]\nlambda_q = 0.0\n");
    let cfg = write(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("run").display().to_string();
    let o = sdq(&["generate-strategy", "--config", &cfg, "--out", &out], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "layer_bits"), "8,8,8");
}

#[test]
fn env_overrides_seed_and_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("env-run");
    let o = sdq(
        &["generate-strategy", "--config", &cfg],
        &[("SDQ_SEED", "12"), ("SDQ_OUT_DIR", out.to_str().unwrap())],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snap.contains("seed = 12"), "{snap}");
}

#[test]
fn config_faults_exit_one_with_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run").display().to_string();
    let bad_dim = write(tmp.path(), "a.toml", "[run]\nmodel = \"mlp:3-8-4\"\n");
    let typo = write(tmp.path(), "b.toml", "[run]\nseed = 1\n\n[teacher]\nepoch = 3\n");
    for (cfg, kind) in [(bad_dim, "config"), (typo, "parse")] {
        let o = sdq(&["generate-strategy", "--config", &cfg, "--out", &out], &[]);
        assert_eq!(o.status.code(), Some(1));
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error kind={kind} msg=\"")), "{err}");
    }
    let o = sdq(&["train"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=usage"));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[run]\nmodel = \"mlp:2-8-8-4\"\n\n[data]\nsamples = 200\n\n[teacher]\nepochs = 3\n\n[teacher.optimizer]\nkind = \"sgd\"\nlr = 1e308\n",
    );
    let out = tmp.path().join("run").display().to_string();
    let o = sdq(&["generate-strategy", "--config", &cfg, "--out", &out], &[]);
    let err = stderr(&o);
    assert_eq!(o.status.code(), Some(2), "{err}");
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=numerical_abort") || err.starts_with("error kind=non_finite"), "{err}");
}

#[test]
fn selftest_passes() {
    let o = sdq(&["selftest"], &[]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS ")));
}
