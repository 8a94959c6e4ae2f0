use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ewastenet"));
    cmd.args(args).env_remove("EWASTENET_SEED").env_remove("EWASTENET_CHECK_CORRUPT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn ewastenet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
    stdout(o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small synthetic dataset plus its split file.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    split: PathBuf,
}

fn workspace(per_class: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&run(&["synth", "--out", p(&data), "--per-class", per_class, "--size", "16"], &[]));
    let split = root.join("split.json");
    ok(&run(&["split", "--data", p(&data), "--out", p(&split)], &[]));
    Workspace {
        _dir: dir,
        root,
        data,
        split,
    }
}

const TOY_CONFIG: &str = r#"{
  "model": {
    "image_h": 16, "image_w": 16,
    "backbone": {"patch_size": 8, "embed_dim": 16, "depth": 1, "num_heads": 2, "mlp_ratio": 2.0},
    "aspp": {"branch_filters": [4, 2, 2, 1, 1]},
    "cbam": {"channel_reduction": 2}
  },
  "train": {"epochs": 2, "batch_size": 4}
}"#;

/// Trains the toy model for two epochs and returns the output directory.
fn trained(ws: &Workspace) -> PathBuf {
    let config = ws.root.join("toy.json");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    let out = ws.root.join("run");
    let args = ["train", "--data", p(&ws.data), "--split", p(&ws.split), "--config", p(&config), "--out", p(&out)];
    ok(&run(&args, &[]));
    out
}

#[test]
fn split_uses_default_ratios_and_is_reproducible() {
    let ws = workspace("10");
    let spec: Value = serde_json::from_str(&std::fs::read_to_string(&ws.split).unwrap()).unwrap();
    assert_eq!(spec["ratios"], serde_json::json!([0.7, 0.1, 0.2]));
    let again = ws.root.join("again.json");
    let out = ok(&run(&["split", "--data", p(&ws.data), "--out", p(&again)], &[]));
    assert_eq!(std::fs::read(&ws.split).unwrap(), std::fs::read(&again).unwrap());
    // per-class table: 7 / 1 / 2 of 10 for every class
    for class in ["Camera", "Keyboards", "TV"] {
        let line = out.lines().find(|l| l.starts_with(class)).unwrap();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(&cols[1..], ["7", "1", "2", "10"], "{line}");
    }
    assert!(out.lines().any(|l| l.starts_with("Total")), "{out}");
}

#[test]
fn split_seed_precedence_is_flag_then_env_then_config() {
    let ws = workspace("10");
    let dir = &ws.root;
    let config = dir.join("seeded.json");
    std::fs::write(&config, r#"{"train": {"seed": 5}}"#).unwrap();
    let split = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out = dir.join(name);
        let mut args = vec!["split", "--data", p(&ws.data), "--config", p(&config), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&run(&args, env));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(split("a.json", &[], &[]), 5);
    assert_eq!(split("b.json", &[], &[("EWASTENET_SEED", "9")]), 9);
    assert_eq!(split("c.json", &["--seed", "3"], &[("EWASTENET_SEED", "9")]), 3);
    let bad = run(&["split", "--data", p(&ws.data), "--out", p(&dir.join("d.json"))], &[("EWASTENET_SEED", "x")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn split_usage_errors_exit_2() {
    let ws = workspace("3");
    let out = ws.root.join("s.json");
    let missing = run(&["split", "--out", p(&out)], &[]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("--data"), "{}", stderr(&missing));
    for ratios in ["0.5,0.1,0.1", "0.7,0.3", "a,b,c", "-0.1,0.6,0.5"] {
        let o = run(&["split", "--data", p(&ws.data), "--ratios", ratios, "--out", p(&out)], &[]);
        assert_eq!(o.status.code(), Some(2), "{ratios}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    assert!(!out.exists());
    let nowhere = run(&["split", "--data", p(&ws.root.join("absent")), "--out", p(&out)], &[]);
    assert_eq!(nowhere.status.code(), Some(3), "{}", stderr(&nowhere));
}

#[test]
fn train_reports_parameters_and_epochs_and_writes_checkpoints() {
    let ws = workspace("10");
    let config = ws.root.join("toy.json");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    let out = ws.root.join("run");
    let args = [
        "train", "--data", p(&ws.data), "--split", p(&ws.split), "--config", p(&config), "--out", p(&out), "--epochs",
        "3",
    ];
    let text = ok(&run(&args, &[]));
    assert!(text.lines().any(|l| l.starts_with("parameters: ") && l.contains("trainable")), "{text}");
    let epochs: Vec<&str> = text.lines().filter(|l| l.starts_with("epoch ")).collect();
    assert_eq!(epochs.len(), 3, "{text}");
    assert!(epochs[0].contains("1/3") && epochs[0].contains("val loss") && epochs[0].contains("acc"));
    for dir in ["final", "best"] {
        for file in ["manifest.json", "weights.bin", "history.json"] {
            assert!(out.join(dir).join(file).is_file(), "{dir}/{file}");
        }
    }
    let history: Value = serde_json::from_str(&std::fs::read_to_string(out.join("final/history.json")).unwrap()).unwrap();
    assert_eq!(history["train_loss"].as_array().unwrap().len(), 3);
    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 3);
    // no temp siblings left behind by the atomic writes
    assert!(std::fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with('.')));
}

#[test]
fn default_model_reports_under_a_million_trainable_parameters() {
    let ws = workspace("2");
    let config = ws.root.join("one.json");
    std::fs::write(&config, r#"{"train": {"epochs": 1, "batch_size": 16}}"#).unwrap();
    let out = ws.root.join("run");
    let args = ["train", "--data", p(&ws.data), "--split", p(&ws.split), "--config", p(&config), "--out", p(&out)];
    let text = ok(&run(&args, &[]));
    let line = text.lines().find(|l| l.starts_with("parameters: ")).unwrap();
    let trainable: usize = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(trainable < 1_000_000, "{line}");
    assert_eq!(trainable, 713_582);
}

#[test]
fn train_fails_cleanly_on_bad_input() {
    let ws = workspace("3");
    let out = ws.root.join("run");
    let bad = ws.root.join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 2, "surprise": 1}}"#).unwrap();
    let args = ["train", "--data", p(&ws.data), "--split", p(&ws.split), "--config", p(&bad), "--out", p(&out)];
    let o = run(&args, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
    let zero = run(
        &["train", "--data", p(&ws.data), "--split", p(&ws.split), "--out", p(&out), "--epochs", "0"],
        &[],
    );
    assert_eq!(zero.status.code(), Some(2));
    assert!(stderr(&zero).contains("epochs"), "{}", stderr(&zero));
    let no_split = run(
        &["train", "--data", p(&ws.data), "--split", p(&ws.root.join("none.json")), "--out", p(&out)],
        &[],
    );
    assert_eq!(no_split.status.code(), Some(3));
}

#[test]
fn eval_is_deterministic_and_reports_micro_auc() {
    let ws = workspace("10");
    let run_dir = trained(&ws);
    let eval = |name: &str| {
        let out = ws.root.join(name);
        let text = ok(&run(
            &["eval", "--ckpt", p(&run_dir), "--data", p(&ws.data), "--split", p(&ws.split), "--out", p(&out)],
            &[],
        ));
        assert!(text.contains("accuracy") && text.contains("mcc"), "{text}");
        out
    };
    let (a, b) = (eval("eval-a"), eval("eval-b"));
    for file in ["report.json", "confusion.csv", "roc.csv"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert!(report["roc"]["micro_average_auc"].is_number(), "{report}");
    assert_eq!(report["samples"], 16);
    let confusion = std::fs::read_to_string(a.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 9);

    // an explicit checkpoint directory and another split also work
    let on_train = ws.root.join("eval-train");
    let final_dir = run_dir.join("final");
    let args = [
        "eval", "--ckpt", p(&final_dir), "--data", p(&ws.data), "--split", p(&ws.split), "--out",
        p(&on_train), "--on", "train",
    ];
    let text = ok(&run(&args, &[]));
    assert!(text.starts_with("train split"), "{text}");
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let ws = workspace("3");
    let o = run(
        &[
            "eval", "--ckpt", p(&ws.root.join("missing")), "--data", p(&ws.data), "--split", p(&ws.split), "--out",
            p(&ws.root.join("o")),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no checkpoint"), "{}", stderr(&o));
}

#[test]
fn predict_prints_a_normalized_distribution() {
    let ws = workspace("10");
    let run_dir = trained(&ws);
    let image = ws.data.join("Mobile").join("mobile_000.ppm");
    let image = if image.exists() {
        image
    } else {
        std::fs::read_dir(ws.data.join("Mobile")).unwrap().next().unwrap().unwrap().path()
    };
    let args = ["predict", "--ckpt", p(&run_dir), "--image", p(&image)];
    let first = ok(&run(&args, &[]));
    assert_eq!(first, ok(&run(&args, &[])));
    let v: Value = serde_json::from_str(&first).unwrap();
    let probs = v["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 8);
    let sum: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() <= 1e-6, "{sum}");
    let (best, _) = probs
        .iter()
        .fold(("", f64::MIN), |(bn, bp), (n, p)| {
            let p = p.as_f64().unwrap();
            if p > bp { (n.as_str(), p) } else { (bn, bp) }
        });
    assert_eq!(v["class_name"], best);

    let missing = run(&["predict", "--ckpt", p(&run_dir), "--image", p(&ws.root.join("no.png"))], &[]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn check_passes_on_a_clean_build() {
    let o = run(&["check"], &[]);
    let text = ok(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("paper test matrix") && text.contains("accuracy 0.96023"), "{text}");
}

#[test]
fn check_reports_forced_corruption() {
    let o = run(&["check"], &[("EWASTENET_CHECK_CORRUPT", "sobel-kernel")]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("sobel constant image")), "{text}");
    assert!(stderr(&o).contains("sobel constant image"));
    let m = run(&["check"], &[("EWASTENET_CHECK_CORRUPT", "paper-matrix")]);
    assert_eq!(m.status.code(), Some(1));
    assert!(stdout(&m).lines().any(|l| l.starts_with("FAIL") && l.contains("paper test matrix")));
    let unknown = run(&["check"], &[("EWASTENET_CHECK_CORRUPT", "everything")]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn synth_writes_a_class_tree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    ok(&run(&["synth", "--out", p(&out), "--per-class", "2", "--size", "12"], &[]));
    let classes: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert_eq!(classes.len(), 8);
    assert_eq!(std::fs::read_dir(out.join("TV")).unwrap().count(), 2);
}
