use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featalign::tensor::read_ften;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tiny dataset and model so a full train run takes about a second.
fn small_config(dir: &Path, classes: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "dataset_dir": dir.join("data"),
        "output_dir": dir.join("run"),
        "epochs": 3,
        "batch_size": 4,
        "data": {
            "num_classes": classes,
            "train_per_class": 4,
            "val_per_class": 2,
            "test_per_class": 3,
            "image_size": 32,
            "marker_cell_px": 2,
            "body_area": [0.3, 0.5]
        },
        "model": {
            "input_size": 32,
            "conv_blocks": [
                {"out_channels": 4, "kernel": 3, "stride": 2},
                {"out_channels": 6, "kernel": 3, "stride": 2}
            ],
            "drop_layer_index": 0,
            "num_classes": classes,
            "feature_dim": 6
        },
        "loss": {"warm_epochs": 1}
    });
    let path = dir.join(format!("config_{classes}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn gen(cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn assert_single_line_error(o: &Output, expected_code: i32, prefix: &str) {
    assert_eq!(code(o), expected_code, "stderr: {}", stderr(o));
    let err = stderr(o);
    // progress lines may precede it; the error itself is the single last line
    let errors: Vec<&str> = err.lines().filter(|l| l.starts_with("ERR_")).collect();
    assert_eq!(errors.len(), 1, "{err}");
    assert_eq!(err.trim_end().lines().last(), Some(errors[0]));
    assert!(errors[0].starts_with(prefix), "{err}");
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert!(stdout(&run(&["train", "--help"])).contains("--mode"));
}

#[test]
fn usage_errors_exit_one() {
    assert_single_line_error(&run(&["frobnicate"]), 1, "ERR_USAGE:");
    assert_single_line_error(&run(&["train", "--mode", "sideways"]), 1, "ERR_USAGE:");
    assert_single_line_error(&run(&["eval", "--checkpoint", "x", "--map-source", "grad"]), 1, "ERR_USAGE:");
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"optimizer": {"lr_former": -1.0}}"#).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&small_config(dir.path(), 2), &["--dataset", data.to_str().unwrap()])), 0);
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert_single_line_error(&o, 1, "ERR_USAGE:");
}

#[test]
fn gen_data_is_deterministic_and_guards_existing_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&gen(&cfg, &["--dataset", a.to_str().unwrap()])), 0);
    assert_eq!(code(&gen(&cfg, &["--dataset", b.to_str().unwrap()])), 0);
    for rel in ["index.json", "images/train_00003.ppm", "masks/test_00001.pgm"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let again = gen(&cfg, &["--dataset", a.to_str().unwrap()]);
    assert_single_line_error(&again, 1, "ERR_USAGE:");
    assert_eq!(code(&gen(&cfg, &["--dataset", a.to_str().unwrap(), "--force"])), 0);
    let c = dir.path().join("c");
    assert_eq!(code(&gen(&cfg, &["--dataset", c.to_str().unwrap(), "--seed", "99"])), 0);
    assert_ne!(fs::read(a.join("index.json")).unwrap(), fs::read(c.join("index.json")).unwrap());
}

#[test]
fn gen_data_class_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let d = dir.path().join("d");
    let o = gen(&cfg, &["--dataset", d.to_str().unwrap(), "--classes", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["classes"], 3);
    assert_eq!(summary["train"], 12);
    let index: Value = serde_json::from_str(&fs::read_to_string(d.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["spec"]["num_classes"], 3);
}

#[test]
fn missing_or_corrupt_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let missing = dir.path().join("nowhere");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--dataset", missing.to_str().unwrap()]);
    assert_single_line_error(&o, 2, "ERR_DATA:");

    let data = dir.path().join("data");
    assert_eq!(code(&gen(&cfg, &[])), 0);
    let victim = data.join("images").join("train_00002.ppm");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_single_line_error(&o, 2, "ERR_DATA:");
    assert!(stderr(&o).contains("train_00002.ppm"));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    assert_eq!(code(&gen(&cfg, &[])), 0);
    let mut json: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    json["optimizer"] = serde_json::json!({"lr_former": 1e12, "lr_latter": 1e12, "grad_clip": 0.0});
    json["epochs"] = 5.into();
    fs::write(&cfg, json.to_string()).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--mode", "vanilla"]);
    assert_single_line_error(&o, 3, "ERR_NUMERIC:");
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for name in ["cross_entropy", "loss_sim", "loss_norm", "loss_drop", "total"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{name}: {out}");
    }
    let o = run(&["gradcheck", "--inject-fault"]);
    assert_single_line_error(&o, 3, "ERR_NUMERIC:");
}

#[test]
fn train_eval_sweep_decompose_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(code(&gen(&cfg, &[])), 0);
    let o = run(&["train", "--config", cfg_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run_dir = dir.path().join("run");
    for f in [
        "config.json",
        "train_log.json",
        "eval_report.json",
        "sweep.csv",
        "hist_sim.csv",
        "hist_norm.csv",
        "init_hist_sim.csv",
        "diagnostics.json",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["map_source"], "cam");
    assert!(report.get("top5_loc").map_or(true, Value::is_null));
    let sweep = fs::read_to_string(run_dir.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("tau,acc@0.3,acc@0.5,acc@0.7\n"));
    assert_eq!(sweep.lines().count(), 102);
    let hist = fs::read_to_string(run_dir.join("hist_sim.csv")).unwrap();
    assert!(hist.starts_with("bin_low,bin_high,count\n"));
    let log: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 3);

    let ckpt = run_dir.join("checkpoint");
    let ckpt_s = ckpt.to_str().unwrap();
    for source in ["cam", "norm", "sim"] {
        let o = run(&["eval", "--config", cfg_s, "--checkpoint", ckpt_s, "--map-source", source]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(r["map_source"], source);
        assert_eq!(r["num_images"], 6);
        for key in ["top1_loc", "gt_loc", "maxboxaccv2_mean", "pxap"] {
            let v = r[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{key} = {v}");
        }
        assert!(run_dir.join(format!("eval_{source}.json")).exists());
    }
    let o = run(&["sweep", "--config", cfg_s, "--checkpoint", ckpt_s, "--split", "val"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("tau,acc@0.3,acc@0.5,acc@0.7\n"));

    let o = run(&["decompose", "--config", cfg_s, "--checkpoint", ckpt_s, "--index", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let dec = run_dir.join("decompose");
    let norm = read_ften(&dec.join("norm.ften")).unwrap();
    let sim = read_ften(&dec.join("sim.ften")).unwrap();
    let cam = read_ften(&dec.join("cam.ften")).unwrap();
    let hat = read_ften(&dec.join("norm_hat.ften")).unwrap();
    assert_eq!(norm.shape(), &[8, 8]);
    assert_eq!(meta["height"], 8);
    let wn = meta["weight_norm"].as_f64().unwrap();
    for u in 0..64 {
        let rebuilt = wn * norm.data()[u] * sim.data()[u];
        assert!((cam.data()[u] - rebuilt).abs() <= 1e-9 * (1.0 + rebuilt.abs()));
        assert!((0.0..=1.0).contains(&hat.data()[u]));
    }
    let pgm = fs::read(dec.join("sim.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), 11 + 64);

    let o = run(&["decompose", "--config", cfg_s, "--checkpoint", ckpt_s, "--index", "999"]);
    assert_single_line_error(&o, 1, "ERR_USAGE:");

    // checkpoint trained on 2 classes against a 3-class dataset
    let other = dir.path().join("three");
    assert_eq!(code(&gen(&cfg, &["--dataset", other.to_str().unwrap(), "--classes", "3"])), 0);
    let o = run(&["eval", "--config", cfg_s, "--checkpoint", ckpt_s, "--dataset", other.to_str().unwrap()]);
    assert_single_line_error(&o, 2, "ERR_DATA:");
}

#[test]
fn top5_reported_for_many_classes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 6);
    assert_eq!(code(&gen(&cfg, &[])), 0);
    let mut json: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    json["epochs"] = 1.into();
    fs::write(&cfg, json.to_string()).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let top5 = r["top5_loc"].as_f64().unwrap();
    assert!(top5 >= r["top1_loc"].as_f64().unwrap());
}
