use std::path::Path;
use std::process::{Command, Output};

use ifg_core::check::small_pipeline_config;

fn ifgkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifgkit")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A config small enough to train in a few seconds.
fn write_small_config(dir: &Path) -> String {
    let mut cfg = small_pipeline_config();
    cfg.refine.extractor.m = 32;
    cfg.refine.extractor.fc_hidden = vec![32];
    cfg.refine.template_points = 256;
    cfg.train.num_scenes = 4;
    cfg.train.epochs = 1;
    cfg.ablation.eval_scenes = 3;
    let file = dir.join("small.json");
    std::fs::write(&file, cfg.to_json()).unwrap();
    path(&file).to_owned()
}

#[test]
fn gen_templates_writes_three_ply_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = ifgkit(&["gen-templates", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["car", "pedestrian", "cyclist"] {
        let text = std::fs::read_to_string(dir.path().join(format!("{name}.ply"))).unwrap();
        assert!(text.contains("element vertex 1024"), "{name}");
        let body = text.split("end_header\n").nth(1).unwrap();
        assert_eq!(body.lines().count(), 1024);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["frobnicate"][..],
        &["train", "--epochs", "many"],
        &["eval", "--detections", "x"],
        &["gen-scenes", "--seed"],
        &[],
    ] {
        assert_eq!(ifgkit(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(ifgkit(&["gen-templates", "--config", path(&missing)]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"unknown": 1}}"#).unwrap();
    assert_eq!(ifgkit(&["gen-templates", "--config", path(&bad)]).status.code(), Some(1));
}

#[test]
fn ground_truth_scores_perfect_ap() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let out = ifgkit(&["gen-scenes", "--scenes", "5", "--out", path(&scenes)]);
    assert!(out.status.success());
    // Ground-truth labels as detections, with a score column appended.
    let dets = dir.path().join("dets");
    std::fs::create_dir(&dets).unwrap();
    for entry in std::fs::read_dir(&scenes).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "txt") {
            let text: String = std::fs::read_to_string(&p).unwrap().lines().map(|l| format!("{l} 1.0\n")).collect();
            std::fs::write(dets.join(p.file_name().unwrap()), text).unwrap();
        }
    }
    let res = dir.path().join("res");
    let out = ifgkit(&["eval", "--detections", path(&dets), "--labels", path(&scenes), "--out", path(&res)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(res.join("ap.csv")).unwrap();
    let mut scored = 0;
    for line in csv.lines().skip(1) {
        let ap = line.rsplit(',').next().unwrap();
        if ap != "skipped" {
            assert_eq!(ap.parse::<f64>().unwrap(), 1.0, "{line}");
            scored += 1;
        }
    }
    assert!(scored > 0);
}

#[test]
fn fixed_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = ifgkit(&["train", "--config", &config, "--seed", "3", "--out", path(&out)]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["loss.csv", "checkpoint.ifgk", "config.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let scenes = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        assert!(ifgkit(&["gen-scenes", "--scenes", "2", "--seed", seed, "--out", path(&out)]).status.success());
        std::fs::read(out.join("000001.bin")).unwrap()
    };
    assert_eq!(scenes("9", "s1"), scenes("9", "s2"));
    assert_ne!(scenes("9", "s3"), scenes("10", "s4"));
}

#[test]
fn train_then_infer_writes_one_file_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let model = dir.path().join("model");
    assert!(ifgkit(&["train", "--config", &config, "--out", path(&model)]).status.success());
    let loss = std::fs::read_to_string(model.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
    let scenes = dir.path().join("scenes");
    assert!(ifgkit(&["gen-scenes", "--config", &config, "--scenes", "3", "--out", path(&scenes)]).status.success());
    let dets = dir.path().join("dets");
    let ckpt = model.join("checkpoint.ifgk");
    let out = ifgkit(&["infer", "--config", &config, "--checkpoint", path(&ckpt), "--data", path(&scenes), "--out", path(&dets)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        assert!(dets.join(format!("{i:06}.txt")).exists());
    }
    // A checkpoint loaded under a different architecture is a runtime failure.
    let out = ifgkit(&["infer", "--checkpoint", path(&ckpt), "--data", path(&scenes), "--out", path(&dets)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_reports_four_methods() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let out = dir.path().join("abl");
    let run = ifgkit(&["ablate", "--config", &config, "--out", path(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,TAFE,PSCL,car AP,ped AP,cyc AP");
    let methods: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["A", "B", "C", "D"]);
    assert!(lines[1].starts_with("A,no,no,"));
    assert!(lines[4].starts_with("D,yes,yes,"));
    for m in ["A", "B", "C", "D"] {
        assert!(out.join(format!("loss_{m}.csv")).exists());
    }
    let table = String::from_utf8(run.stdout).unwrap();
    assert!(table.starts_with("method"));
}
