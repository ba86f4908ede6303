use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vecgauge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = json!({
        "model": {
            "input_size": [32, 32],
            "encoder_channels": [4, 4, 4, 4, 4],
            "deconv_channels": [4, 4, 4],
            "lambda": 0.25
        },
        "train": {"epochs": 2, "batch_size": 2, "milestones": {"1": 1e-4}, "checkpoint_every": 1},
        "decode": {"threshold": 0.05, "nms_radius": 2.0},
        "data": {"synth": {"image_side": [64, 80]}, "hard_quota": null}
    });
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p.display().to_string()
}

fn render(dir: &Path, cfg: &str, count: &str) -> String {
    let data = dir.join("data");
    let out = run(&["render-dataset", "--config", cfg, "--out", data.to_str().unwrap(), "--count", count, "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.display().to_string()
}

#[test]
fn unknown_config_key_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 2, "learnig_rate": 0.1}}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["render-dataset", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--count", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--data", "nowhere", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

#[test]
fn bad_flags_and_missing_data_have_distinct_codes() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", dir.path().join("missing").to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_train_detect_read_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = render(dir.path(), &cfg, "20");
    let d = Path::new(&data);
    for f in ["annotations.json", "templates.json", "split.json", "run.json", "images/000000.png"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let ann = read_json(&d.join("annotations.json"));
    assert_eq!(ann["images"].as_array().unwrap().len(), 20);
    assert_eq!(ann["categories"][0]["name"], "meter");
    let hash = read_json(&d.join("run.json"))["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);

    let model_dir = dir.path().join("model");
    let out = run(&["train", "--config", &cfg, "--data", &data, "--out", model_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = model_dir.join("checkpoint.json");
    let ck = read_json(&ckpt);
    assert_eq!(ck["version"], "vdn-ckpt-1");
    assert_eq!(ck["meta"]["config_hash"], hash.as_str());
    assert!(model_dir.join("checkpoint_epoch001.json").exists());
    let report = fs::read_to_string(model_dir.join("train_report.jsonl")).unwrap();
    let lines: Vec<Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["lr"], 1e-4);
    assert_eq!(lines[1]["scalar_weight"], 0.5);

    let ck_s = ckpt.to_str().unwrap();
    let dets = dir.path().join("dets.json");
    let overlays = dir.path().join("overlays");
    let out = run(&[
        "detect", "--config", &cfg, "--ckpt", ck_s, "--images", &data, "--out", dets.to_str().unwrap(),
        "--overlays", overlays.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dj = read_json(&dets);
    assert_eq!(dj["config_hash"], hash.as_str());
    assert_eq!(dj["images"].as_array().unwrap().len(), 20);
    assert!(overlays.join("000000.png").exists());

    let readings = dir.path().join("readings.json");
    let out = run(&[
        "read", "--config", &cfg, "--ckpt", ck_s, "--images", &data, "--templates",
        d.join("templates.json").to_str().unwrap(), "--out", readings.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rj = read_json(&readings);
    assert_eq!(rj["images"][0]["meters"][0]["template_id"], "dial-000000");

    let eval = dir.path().join("eval.json");
    let out = run(&[
        "evaluate", "--config", &cfg, "--ckpt", ck_s, "--data", &data, "--perturb", "mask_tip:3", "scale:0.9",
        "--out", eval.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ej = read_json(&eval);
    let reports = ej["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[1]["perturbation"], "mask_tip:3");
    for col in ["AP", "AP50", "AP75", "APM", "APL", "AR", "AR50", "AR75", "ARM", "ARL"] {
        assert!(reports[0]["OKS"][col].is_number(), "{col}");
        assert!(reports[0]["VDS"][col].is_number(), "{col}");
    }

    let out = run(&["evaluate", "--ckpt", ck_s, "--data", &data, "--perturb", "twist:3", "--out", eval.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_scores_perfect_detections_as_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = render(dir.path(), &cfg, "10");
    let ann = read_json(&Path::new(&data).join("annotations.json"));
    // perfect detections straight from the groundtruth keypoints
    let images: Vec<Value> = ann["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|img| {
            let id = &img["id"];
            let meters: Vec<Value> = ann["annotations"]
                .as_array()
                .unwrap()
                .iter()
                .filter(|a| &a["image_id"] == id)
                .enumerate()
                .map(|(k, a)| {
                    let kp: Vec<f64> = a["keypoints"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
                    let dets: Vec<Value> = kp
                        .chunks(9)
                        .map(|c| {
                            let (dx, dy) = (c[0] - c[6], c[1] - c[7]);
                            let n = dx.hypot(dy);
                            json!({"x": c[0], "y": c[1], "alpha": dx / n, "beta": dy / n, "confidence": 1.0, "degenerate": false})
                        })
                        .collect();
                    json!({"meter": k, "bbox": a["bbox"], "template_id": null, "detections": dets})
                })
                .collect();
            json!({"file_name": img["file_name"], "meters": meters})
        })
        .collect();
    let dets = dir.path().join("perfect.json");
    fs::write(&dets, json!({"config_hash": "", "checkpoint": "", "images": images}).to_string()).unwrap();
    let eval = dir.path().join("eval.json");
    let all = dir.path().join("all.json");
    fs::write(&all, r#"{"data": {"eval_split": "all"}}"#).unwrap();
    let out = run(&[
        "evaluate", "--config", all.to_str().unwrap(), "--detections", dets.to_str().unwrap(), "--data", &data,
        "--out", eval.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = &read_json(&eval)["reports"][0];
    for kind in ["OKS", "VDS"] {
        for col in ["AP", "AP50", "AP75", "AR", "AR50", "AR75"] {
            assert_eq!(r[kind][col], 1.0, "{kind} {col}");
        }
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("grad.json");
    let out = run(&["gradcheck", "--out", table.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("pass") && !text.contains("FAIL"));
    assert!(read_json(&table)["checks"].as_array().unwrap().len() >= 9);
}
