mod common;

use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use jagan::cli::{CHECKPOINT_FILE, MANIFEST_FILE};
use jagan::manifest::RunManifest;
use jagan::{checkpoint, dataset, io};
use jagan_core::trainer::TrainMode;
use serde_json::Value;

fn jagan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jagan"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let out = Command::new(env!("CARGO_BIN_EXE_jagan")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = jagan(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("train-image") && err.contains("Usage"),
        "{err}"
    );
    assert_eq!(jagan(&["train-image"]).status.code(), Some(1));
    assert_eq!(jagan(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = jagan(&[
        "anonymize-image",
        "--ckpt",
        s(&missing),
        "--in",
        "x.png",
        "--boxes",
        "b.json",
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let m: RunManifest = io::read_json(&dir.path().join("o.run.json")).unwrap();
    assert!(m.status.starts_with("error"));
}

#[test]
fn image_training_and_anonymization() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("run"));
    let face = common::write_image_dataset(&data, 3);
    let config = dir.path().join("c.toml");
    std::fs::write(&config, common::TINY_CONFIG).unwrap();
    let res = jagan(&[
        "train-image",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--seed",
        "5",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let summary = stdout_json(&res);
    assert_eq!(summary["step"], 3);
    assert_eq!(summary["stop"], "max_steps");
    assert!(summary["best_metric"].is_f64());
    let ckpt = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(
        (ckpt.step, ckpt.train.seed, ckpt.mode()),
        (3, 5, TrainMode::Image)
    );
    assert_eq!(ckpt.evals.len(), 1);
    let m: RunManifest = io::read_json(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(
        (m.command.as_str(), m.status.as_str(), m.seed),
        ("train-image", "ok", 5)
    );
    assert_eq!(m.config["train"]["batch_size"], 2);

    let input = data.join(io::frame_name(0));
    let anon = dir.path().join("anon.png");
    let boxes = data.join(dataset::BOXES_FILE);
    let res = jagan(&[
        "anonymize-image",
        "--ckpt",
        s(&out.join(CHECKPOINT_FILE)),
        "--in",
        s(&input),
        "--boxes",
        s(&boxes),
        "--out",
        s(&anon),
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let (before, after) = (io::read_png(&input).unwrap(), io::read_png(&anon).unwrap());
    let square = jagan_core::preprocess::square_box(face);
    for y in 0..before.height() {
        for x in 0..before.width() {
            if !square.contains(x as i64, y as i64) {
                assert_eq!(
                    (0..3).map(|c| before.get(c, y, x)).collect::<Vec<_>>(),
                    (0..3).map(|c| after.get(c, y, x)).collect::<Vec<_>>()
                );
            }
        }
    }
    assert_ne!(before, after);

    let res = jagan(&[
        "anonymize-video",
        "--ckpt",
        s(&out.join(CHECKPOINT_FILE)),
        "--in",
        s(&data),
        "--boxes",
        s(&boxes),
        "--out",
        s(&dir.path().join("v")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("mode"));
}

#[test]
fn curation_video_training_and_anonymization() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    common::write_video(&raw, 12);
    let curated = dir.path().join("curated");
    let res = jagan(&[
        "curate",
        "--frames",
        s(&raw),
        "--detections",
        s(&raw.join(dataset::BOXES_FILE)),
        "--out",
        s(&curated),
        "--min-len",
        "10",
        "--resolution",
        "32",
        "--val-fraction",
        "0",
        "--test-fraction",
        "0",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let summary = stdout_json(&res);
    assert_eq!(summary["initial_frames"], 12);
    assert_eq!(summary["splits"]["train"]["sequences"], 1);
    assert_eq!(summary["splits"]["train"]["faces"], 12);
    let seqs = dataset::load_sequences(&curated.join("train")).unwrap();
    assert_eq!(seqs[0].len(), 12);
    assert_eq!(seqs[0].frames[0].width(), 32);

    let res = jagan(&[
        "curate",
        "--frames",
        s(&raw),
        "--detections",
        s(&raw.join(dataset::BOXES_FILE)),
        "--out",
        s(&dir.path().join("c2")),
        "--min-len",
        "13",
    ]);
    assert_eq!(stdout_json(&res)["splits"]["train"]["sequences"], 0);

    let config = dir.path().join("c.toml");
    std::fs::write(&config, common::TINY_CONFIG).unwrap();
    let run = dir.path().join("run");
    let res = jagan(&[
        "train-video",
        "--config",
        s(&config),
        "--data",
        s(&curated.join("train")),
        "--out",
        s(&run),
        "--max-steps",
        "2",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let ckpt = checkpoint::load(&run.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!((ckpt.step, ckpt.mode()), (2, TrainMode::Video));

    let out = dir.path().join("anon");
    let res = jagan(&[
        "anonymize-video",
        "--ckpt",
        s(&run.join(CHECKPOINT_FILE)),
        "--in",
        s(&raw),
        "--boxes",
        s(&raw.join(dataset::BOXES_FILE)),
        "--out",
        s(&out),
        "--burn-in-frames",
        "3",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_eq!(io::list_pngs(&out).unwrap().len(), 12);
    let m: RunManifest = io::read_json(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.config["inference"]["burn_in_frames"], 3);

    let real = dir.path().join("fvd_real");
    let generated = dir.path().join("fvd_gen");
    for (root, src) in [(&real, &raw), (&generated, &out)] {
        for name in ["a", "b", "c"] {
            let d = root.join(name);
            std::fs::create_dir_all(&d).unwrap();
            for p in io::list_pngs(src).unwrap() {
                std::fs::copy(&p, d.join(p.file_name().unwrap())).unwrap();
            }
        }
    }
    let res = jagan(&[
        "eval-fvd",
        "--real",
        s(&real),
        "--generated",
        s(&generated),
        "--frames",
        "4",
        "--size",
        "8",
        "--dim",
        "2",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(stdout_json(&res)["value"].as_f64().unwrap().is_finite());
}

#[test]
fn eval_idi_from_embedding_file() {
    let dir = tempfile::tempdir().unwrap();
    for d in ["real/s1", "gen/s1"] {
        std::fs::create_dir_all(dir.path().join(d)).unwrap();
    }
    let emb = dir.path().join("emb.json");
    std::fs::write(&emb, r#"{"real": {"s1": [[0.0], [0.1], null, [0.2], [0.3]]}, "generated": {"s1": [[0.0], [0.2], [0.4], [0.6], [0.8]]}}"#).unwrap();
    let spec = format!("file:{}", s(&emb));
    let res = jagan(&[
        "eval-idi",
        "--real",
        s(&dir.path().join("real")),
        "--generated",
        s(&dir.path().join("gen")),
        "--embeddings",
        &spec,
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let v = stdout_json(&res);
    assert!((v["real_median"].as_f64().unwrap() - 0.01).abs() < 1e-12);
    assert!((v["gen_median"].as_f64().unwrap() - 0.04).abs() < 1e-12);
    assert_eq!(v["idi"], 0.25);
    assert_eq!(v["skipped_pairs"], 2);
}

#[test]
fn eval_idi_with_projection_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    common::write_video(&dir.path().join("real/s1"), 5);
    common::write_video(&dir.path().join("gen/s1"), 5);
    let res = jagan(&[
        "eval-idi",
        "--real",
        s(&dir.path().join("real")),
        "--generated",
        s(&dir.path().join("gen")),
        "--embeddings",
        "projection:3",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_eq!(stdout_json(&res)["idi"], 1.0);
}

#[test]
fn eval_fid_of_identical_directories_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    common::write_image_dataset(&dir.path().join("a"), 6);
    let a = dir.path().join("a");
    let res = jagan(&[
        "eval-fid",
        "--real",
        s(&a),
        "--generated",
        s(&a),
        "--size",
        "8",
        "--dim",
        "3",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let v = stdout_json(&res);
    assert!(v["value"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(v["real_items"], 6);
}

#[test]
fn interrupted_training_leaves_a_resumable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("run"));
    common::write_image_dataset(&data, 3);
    let config = dir.path().join("c.toml");
    std::fs::write(&config, common::TINY_CONFIG).unwrap();
    let child = Command::new(env!("CARGO_BIN_EXE_jagan"))
        .args([
            "train-image",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--max-steps",
            "1000000",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let start = Instant::now();
    while !ckpt_path.exists() {
        assert!(
            start.elapsed() < Duration::from_secs(60),
            "no checkpoint written"
        );
        std::thread::sleep(Duration::from_millis(50));
    }
    let kill = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(kill.success());
    let output = child.wait_with_output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(stdout_json(&output)["stop"], "interrupted");
    let ckpt = checkpoint::load(&ckpt_path).unwrap();
    assert!(ckpt.step >= 1 && ckpt.step < 1_000_000);
    let m: RunManifest = io::read_json(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, "interrupted");

    let target = (ckpt.step + 2).to_string();
    let res = jagan(&[
        "train-image",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--resume",
        s(&ckpt_path),
        "--max-steps",
        &target,
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_eq!(checkpoint::load(&ckpt_path).unwrap().step, ckpt.step + 2);
}
