use std::path::{Path, PathBuf};
use std::process::Command;

use mtrlab::manifest::read_manifest;
use mtrlab::svg::Table;
use serde_json::{json, Value};

fn tiny() -> Value {
    json!({
        "seed": 7,
        "data": {"train_size": 12, "test_size": 4, "height": 8, "width": 8},
        "model": {"trunk_width": 4, "trunk_depth": 1, "head_width": 4, "head_depth": 1},
        "training": {"epochs": 2, "batch_size": 4},
        "theory": {"samples": 2000, "task_counts": [1, 2, 4], "rhos": [0.0, 0.5]},
        "subsample": {"ks": [1, 4, 16, 64], "repeats": 3, "examples": 2, "attacked_metric": true},
        "vuln": {"tasks": ["seg", "depth"], "task_counts": [1, 2], "examples": 4},
        "matrix": {"tasks": ["seg", "depth"], "lambdas": [0.1]},
        "advtrain": {"main": "seg", "auxiliary": ["depth"], "attack": {"epsilon": 2}, "eval_epsilon": 2}
    })
}

fn with(mut base: Value, patch: Value) -> Value {
    fn merge(a: &mut Value, b: Value) {
        match (a, b) {
            (Value::Object(a), Value::Object(b)) => {
                for (k, v) in b {
                    merge(a.entry(k).or_insert(Value::Null), v);
                }
            }
            (a, b) => *a = b,
        }
    }
    merge(&mut base, patch);
    base
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn mtrlab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mtrlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mtrlab(&args)
}

fn read_table(path: &Path) -> Table {
    Table::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_records_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(run("gen-data", &cfg, &a, &[]).0, 0);
    assert_eq!(run("gen-data", &cfg, &b, &[]).0, 0);
    assert_eq!(run("gen-data", &cfg, &c, &["--seed", "8"]).0, 0);
    let (ma, mb, mc) = (read_manifest(&a).unwrap(), read_manifest(&b).unwrap(), read_manifest(&c).unwrap());
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.outputs.len(), 2);
    assert_eq!(mc.seed, 8);
    assert_eq!(mc.config["seed"], 8);
    assert_ne!(ma.outputs, mc.outputs);

    // the generated files are usable as data paths
    let reuse = with(
        tiny(),
        json!({"data": {"train_path": a.join("train.mtds"), "test_path": a.join("test.mtds")}}),
    );
    let reuse = write_config(dir.path(), "reuse.json", &reuse);
    assert_eq!(run("train", &reuse, &dir.path().join("t"), &[]).0, 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let typo = write_config(dir.path(), "typo.json", &with(tiny(), json!({"trainig": {}})));
    assert_eq!(run("train", &typo, &out, &[]).0, 2);
    assert_eq!(run("train", &dir.path().join("missing.json"), &out, &[]).0, 2);
    let wrong_kind = write_config(dir.path(), "kind.json", &with(tiny(), json!({"kind": "advtrain"})));
    assert_eq!(run("train", &wrong_kind, &out, &[]).0, 2);
    let bad_attack = write_config(dir.path(), "att.json", &with(tiny(), json!({"attacks": [{"kind": "cw"}]})));
    assert_eq!(run("attack-eval", &bad_attack, &out, &[]).0, 2);
    let cfg = write_config(dir.path(), "ok.json", &tiny());
    assert_eq!(run("train", &cfg, &out, &["--workers", "0"]).0, 2);
    assert_ne!(mtrlab(&["no-such-command", "--config", cfg.to_str().unwrap()]).0, 0);

    let diverge = write_config(dir.path(), "lr.json", &with(tiny(), json!({"training": {"lr": 1e150}})));
    let (code, err) = run("train", &diverge, &out, &[]);
    assert_eq!(code, 3, "{err}");

    let strict = write_config(dir.path(), "strict.json", &with(tiny(), json!({"theory": {"tolerance": 1e-9}})));
    let th = dir.path().join("theory");
    assert_eq!(run("theory-check", &strict, &th, &[]).0, 4);
    // outputs and manifest are still written
    assert!(th.join("theory.csv").exists());
    assert_eq!(read_manifest(&th).unwrap().outputs.len(), 2);
}

#[test]
fn theory_check_passes_at_the_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &with(tiny(), json!({"theory": {"samples": 10000}})));
    let out = dir.path().join("o");
    assert_eq!(run("theory-check", &cfg, &out, &[]).0, 0);
    let t = read_table(&out.join("theory.csv"));
    assert_eq!(t.headers, ["M", "rho", "empirical", "predicted", "rel_error"]);
    assert_eq!(t.rows.len(), 6);
    let svg = std::fs::read_to_string(out.join("theory.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn zero_epsilon_attack_eval_equals_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(
        tiny(),
        json!({"attacks": [{"kind": "pgd", "epsilon": 0}, {"kind": "mim", "epsilon": 0, "steps": 3}], "score_tasks": ["seg", "depth"]}),
    );
    let cfg = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("o");
    assert_eq!(run("attack-eval", &cfg, &out, &[]).0, 0);
    let t = read_table(&out.join("attack_eval.csv"));
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.strings("clean").unwrap(), t.strings("attacked").unwrap());
    assert!(t.numbers("gradient_passes").unwrap().iter().all(|p| *p == 0.0));

    // a saved checkpoint is evaluated without retraining
    let again = with(
        tiny(),
        json!({"attacks": [{"kind": "pgd", "epsilon": 0}, {"kind": "mim", "epsilon": 0, "steps": 3}],
               "score_tasks": ["seg", "depth"], "checkpoint": out.join("model.mtck")}),
    );
    let again = write_config(dir.path(), "again.json", &again);
    let out2 = dir.path().join("o2");
    assert_eq!(run("attack-eval", &again, &out2, &[]).0, 0);
    let t2 = read_table(&out2.join("attack_eval.csv"));
    assert_eq!(t2.strings("clean").unwrap(), t2.strings("attacked").unwrap());
    assert!(!read_manifest(&out2).unwrap().outputs.iter().any(|o| o.path == "model.mtck"));
}

#[test]
fn every_command_writes_csv_svg_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny());
    let mut runs = Vec::new();
    for (cmd, csv, svg) in [
        ("train", "history.csv", Some("history.svg")),
        ("vuln-scan", "summary.csv", Some("summary.svg")),
        ("subsample-curve", "subsample.csv", Some("subsample.svg")),
        ("advtrain", "history.csv", Some("history.svg")),
        ("attack-matrix", "matrix.csv", Some("matrix.svg")),
    ] {
        let out = dir.path().join(cmd);
        let (code, err) = run(cmd, &cfg, &out, &["--workers", "2"]);
        assert_eq!(code, 0, "{cmd}: {err}");
        let m = read_manifest(&out).unwrap();
        assert_eq!(m.command, if cmd == "attack-matrix" { "sweep" } else { cmd });
        assert!(m.outputs.iter().any(|o| o.path == csv), "{cmd} lacks {csv}");
        if let Some(svg) = svg {
            assert!(m.outputs.iter().any(|o| o.path == svg), "{cmd} lacks {svg}");
        }
        runs.push(out);
    }

    let v = read_table(&runs[1].join("summary.csv"));
    assert_eq!(&v.headers[..4], ["M", "joint_norm", "theorem1_pred", "corollary1_pred"]);
    let p = read_table(&runs[1].join("pairwise_m2.csv"));
    assert_eq!(p.headers, ["task_i", "task_j", "cov", "raw_moment"]);
    assert_eq!(p.rows.len(), 3);

    let s = read_table(&runs[2].join("subsample.csv"));
    assert_eq!(s.headers, ["k", "mean_grad_norm", "attacked_metric"]);
    assert_eq!(s.numbers("attacked_metric").unwrap().len(), 4);

    let adv = read_manifest(&runs[3]).unwrap();
    assert_eq!(adv.outputs.iter().filter(|o| o.path.starts_with("checkpoints/")).count(), 2);
    let h = read_table(&runs[3].join("history.csv"));
    assert!(h.headers.contains(&"clean_seg".to_string()) && h.headers.contains(&"clean_depth".to_string()));
    assert_eq!(h.rows.len(), 4);
    let r = read_table(&runs[3].join("robust_eval.csv"));
    assert_eq!(r.strings("attack").unwrap()[0], "pgd50");

    let mx = read_table(&runs[4].join("matrix.csv"));
    assert_eq!(mx.rows.len(), 2);

    let report_cfg = with(tiny(), json!({"report": {"inputs": runs}}));
    let report_cfg = write_config(dir.path(), "report.json", &report_cfg);
    let rep = dir.path().join("report");
    assert_eq!(run("report", &report_cfg, &rep, &[]).0, 0);
    assert_eq!(read_table(&rep.join("report.csv")).rows.len(), 5);

    std::fs::write(runs[0].join("history.csv"), "tampered").unwrap();
    let (code, _) = run("report", &report_cfg, &rep, &[]);
    assert_eq!(code, 1);
    let t = read_table(&rep.join("report.csv"));
    assert_eq!(t.strings("mismatched").unwrap()[0], "history.csv");
}

#[test]
fn sweep_output_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("sweep", &cfg, &a, &["--workers", "1"]).0, 0);
    assert_eq!(run("sweep", &cfg, &b, &["--workers", "3"]).0, 0);
    let digest = |d: &Path| {
        let m = read_manifest(d).unwrap();
        m.outputs
    };
    assert_eq!(digest(&a), digest(&b));
}
