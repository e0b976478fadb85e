use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 5,
  "data": {"hr_size": 16, "train_fraction": 1.0},
  "schedule": {"kind": "linear_beta", "steps": 100, "beta_start": 1e-4, "beta_end": 0.05},
  "operator": {"latent_dim": 8, "num_layers": 1, "ffn_hidden": 8, "encoder_blocks": 1, "encoder_channels": 8, "projection_hidden": 8},
  "denoiser": {"base_channels": 8, "depth": 2, "gamma_embed_dim": 8, "dropout": 0.0},
  "train": {
    "operator": {"max_iters": 3, "warm_iters": 0, "log_every": 1, "eval_every": 0, "batch_size": 2},
    "diffusion": {"max_iters": 3, "warm_iters": 0, "log_every": 1, "batch_size": 2, "patch_size": null}
  },
  "sample": {"steps": 10}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neurop-diff"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).env("NEUROP_DIFF_CACHE", cwd.join("cache")).output().expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err = stderr_json(out);
    assert_eq!(err["error"]["code"], code);
    assert_eq!(err["error"]["kind"], kind);
    assert!(err["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
}

/// A workspace with the tiny config and four synthetic 16x16 scenes.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    assert_ok(&run(&["synth", "--count", "4", "--size", "16", "--out", "data"], dir.path()));
    dir
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("some stdout")).unwrap()
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"seed\": ").unwrap();
    assert_code(&run(&["train-operator", "--config", "bad.json"], dir.path()), 2, "config");
    fs::write(dir.path().join("unknown.json"), r#"{"operator": {"depth": 3}}"#).unwrap();
    assert_code(&run(&["train-operator", "--config", "unknown.json"], dir.path()), 2, "config");
    assert_code(&run(&["train-operator", "--config", "missing.json"], dir.path()), 2, "config");
}

#[test]
fn missing_data_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    assert_code(&run(&["train-operator", "--config", "tiny.json", "--data", "nowhere"], dir.path()), 3, "data");
}

#[test]
fn neurop_without_operator_exits_4() {
    let dir = workspace();
    let out = run(&["train-diffusion", "--config", "tiny.json", "--condition", "neurop"], dir.path());
    assert_code(&out, 4, "checkpoint");
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = run(&["train-diffusion", "--config", "tiny.json", "--condition", "encoder", "--operator", "junk.ckpt"], dir.path());
    assert_code(&out, 4, "checkpoint");
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(&run(&["train-diffusion", "--condition", "edsr"], dir.path()), 2, "argument");
    assert_code(&run(&["no-such-command"], dir.path()), 2, "argument");
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let out = run(&["print-config", "--config", "tiny.json", "--seed", "9"], dir.path());
    assert_ok(&out);
    fs::write(dir.path().join("merged.json"), &out.stdout).unwrap();
    let again = run(&["print-config", "--config", "merged.json"], dir.path());
    assert_ok(&again);
    assert_eq!(out.stdout, again.stdout);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["profile"], "toy");
}

fn png_size(path: &Path) -> (u32, u32) {
    let img = image::open(path).unwrap();
    (img.width(), img.height())
}

#[test]
fn full_pipeline() {
    let dir = workspace();
    let p = dir.path();

    // phase 1, default output under $NEUROP_DIFF_CACHE
    let out = run(&["train-operator", "--config", "tiny.json"], p);
    assert_ok(&out);
    let op_ckpt = p.join("cache/operator.ckpt");
    assert!(op_ckpt.exists());
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["phase"] == "operator" && l["loss"].is_number()).count(), 3);
    assert_eq!(lines.last().unwrap()["iterations"], 3);

    // deterministic: a second run reproduces the parameter hash
    let again = run(&["train-operator", "--config", "tiny.json", "--out", "op2.ckpt"], p);
    assert_ok(&again);
    assert_eq!(last_json(&out)["parameter_hash"], last_json(&again)["parameter_hash"]);

    // bicubic conditioning needs no operator
    let out = run(&["train-diffusion", "--config", "tiny.json", "--condition", "bicubic", "--out", "bicubic.ckpt"], p);
    assert_ok(&out);
    assert_eq!(last_json(&out)["condition"], "bicubic");

    let op = op_ckpt.to_str().unwrap();
    let out = run(&["train-diffusion", "--condition", "neurop", "--operator", op, "--out", "neurop.ckpt"], p);
    assert_ok(&out);

    // x4 on a 16x16 input gives 64x64, twice with identical bytes
    let lr = p.join("data/scene_000.png");
    let lr = lr.to_str().unwrap();
    for dest in ["s1", "s2"] {
        assert_ok(&run(
            &["sample", "--checkpoint", "neurop.ckpt", "--input", lr, "--scale", "4", "--steps", "50", "--seed", "3", "--out", dest],
            p,
        ));
    }
    let png = p.join("s1/scene_000_x4.png");
    assert_eq!(png_size(&png), (64, 64));
    assert_eq!(fs::read(&png).unwrap(), fs::read(p.join("s2/scene_000_x4.png")).unwrap());
    let side: Value = serde_json::from_str(&fs::read_to_string(p.join("s1/scene_000_x4.json")).unwrap()).unwrap();
    assert_eq!(side["s"], 4.0);
    assert_eq!(side["K"], 50);
    assert_eq!(side["seed"], 3);
    assert!(side["runtime_s"].as_f64().unwrap() > 0.0);

    // a whole directory, non-integer scale
    assert_ok(&run(&["sample", "--checkpoint", "neurop.ckpt", "--input", "data", "--scale", "1.5", "--out", "dir"], p));
    assert_eq!(png_size(&p.join("dir/scene_003_x1.5.png")), (24, 24));

    // scale outside (1, M]
    let out = run(&["sample", "--checkpoint", "neurop.ckpt", "--input", lr, "--scale", "9", "--out", "s3"], p);
    assert_code(&out, 2, "argument");
    let out = run(&["sample", "--checkpoint", "neurop.ckpt", "--input", "nothing.png", "--scale", "2", "--out", "s3"], p);
    assert_code(&out, 3, "data");

    // eval on 64x64 crops: one CSV per scale, one row per image
    assert_ok(&run(&["synth", "--count", "2", "--size", "80", "--seed", "10", "--out", "big"], p));
    let out = run(
        &["eval", "--checkpoint", "neurop.ckpt", "--data", "big", "--scales", "2,4,8", "--steps", "5", "--hr-size", "64", "--out", "ev"],
        p,
    );
    assert_ok(&out);
    for s in ["2", "4", "8"] {
        let csv = fs::read_to_string(p.join(format!("ev/metrics_x{s}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3, "{csv}");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(p.join("ev/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scales"].as_array().unwrap().len(), 3);
    assert_eq!(summary["scales"][2]["out_of_distribution"], false);

    // beyond the training range: runs and is flagged
    let out = run(
        &["eval", "--checkpoint", "neurop.ckpt", "--data", "big", "--scales", "10", "--steps", "5", "--hr-size", "80", "--out", "ood"],
        p,
    );
    assert_ok(&out);
    let summary = last_json(&out);
    assert_eq!(summary["scales"][0]["out_of_distribution"], true);
    assert_eq!(summary["scales"][0]["lr_size"], 8);

    // empty eval set
    fs::create_dir(p.join("empty")).unwrap();
    let out = run(&["eval", "--checkpoint", "neurop.ckpt", "--data", "empty", "--scales", "2", "--out", "ev2"], p);
    assert_code(&out, 3, "data");

    // an operator checkpoint is not a diffusion checkpoint
    let out = run(&["eval", "--checkpoint", op, "--data", "big", "--scales", "2", "--out", "ev3"], p);
    assert_code(&out, 4, "checkpoint");
}

#[test]
fn ablate_writes_one_row_per_mode() {
    let dir = workspace();
    let p = dir.path();
    let out = run(&["ablate", "--config", "tiny.json", "--scales", "2", "--steps", "4", "--on-train", "--out", "abl"], p);
    assert_ok(&out);
    let csv = fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, mode) in rows.iter().zip(["bicubic", "encoder", "neurop"]) {
        assert!(row.starts_with(&format!("{mode},2,")), "{row}");
    }
    for f in ["operator.ckpt", "diffusion-bicubic.ckpt", "diffusion-encoder.ckpt", "diffusion-neurop.ckpt", "ablation.json"] {
        assert!(p.join("abl").join(f).exists(), "{f}");
    }
    assert!(p.join("abl/neurop/metrics_x2.csv").exists());
}
