use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use avatar::cli::main_with_args;
use avatar::dataset::load_dataset;
use avatar::formats::{read_ply, write_ply};
use avatar::runner::MetricsReport;
use avatar_core::synth::{make_figure, make_frames};
use avatar_core::trainer::TrainConfig;
use avatar_core::PointCloudN;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("avatar").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path and contents of every file under `dir`, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(run(&["synth", "--frames", "8", "--seed", "1", "--out", s(&a)]), 0);
    assert_eq!(run(&["synth", "--frames", "8", "--seed", "1", "--out", s(&b)]), 0);
    let (x, y) = (tree(&a), tree(&b));
    assert!(x.len() >= 8 * 2 + 4);
    assert_eq!(x, y);

    // rerunning into the same directory overwrites identically
    assert_eq!(run(&["synth", "--frames", "8", "--seed", "1", "--out", s(&a)]), 0);
    assert_eq!(tree(&a), x);
}

#[test]
fn emitted_datasets_load_back() {
    let t = tempfile::tempdir().unwrap();
    let empty = t.path().join("empty");
    assert_eq!(run(&["synth", "--frames", "0", "--out", s(&empty)]), 0);
    let ds = load_dataset(&empty).unwrap();
    assert!(ds.samples.is_empty());
    assert_eq!(ds.file.version, 1);

    let eight = t.path().join("eight");
    assert_eq!(run(&["synth", "--frames", "8", "--seed", "3", "--out", s(&eight)]), 0);
    let ds = load_dataset(&eight).unwrap();
    let cfg = &ds.file.config;
    let fig = make_figure(&cfg.figure, cfg.kind).unwrap();
    let want = make_frames(&fig, 8, 3, cfg.garment_seed, &cfg.scan).unwrap();
    assert_eq!(ds.samples.len(), 8);
    assert_eq!(ds.body, fig.body);
    for (got, want) in ds.samples.iter().zip(&want) {
        assert_eq!(got.frame_id, want.sample.frame_id);
        assert_eq!(got.scan, want.sample.scan);
        for (a, b) in got.pose.joint_rotations.iter().zip(&want.sample.pose.joint_rotations) {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-12);
                }
            }
        }
    }
    assert_eq!(ds.cut_map.labels, fig.oracle_labels(&ds.cut_map.sample_refs));
}

#[test]
fn train_then_infer_gives_the_preset_point_count() {
    let t = tempfile::tempdir().unwrap();
    let (data, run_dir, out) = (t.path().join("data"), t.path().join("run"), t.path().join("infer"));
    assert_eq!(run(&["synth", "--frames", "2", "--seed", "2", "--out", s(&data)]), 0);
    assert_eq!(run(&["train", "--preset", "desk", "--data", s(&data), "--epochs", "1", "--out", s(&run_dir)]), 0);
    let ckpt = run_dir.join("model.ckpt");
    assert!(ckpt.is_file() && run_dir.join("train_log.jsonl").is_file() && run_dir.join("effective_config.json").is_file());

    let pose = data.join("frames").join("0001.pose.json");
    assert_eq!(run(&["infer", "--checkpoint", s(&ckpt), "--data", s(&data), "--pose", s(&pose), "--out", s(&out)]), 0);
    let cloud = read_ply(&out.join("0001.ply")).unwrap();
    assert_eq!(cloud.len(), TrainConfig::desk().merged_points);
    assert!(cloud.normals.is_some());

    // the whole pose directory, and a blend of a checkpoint with itself
    let all = t.path().join("all");
    let c = s(&ckpt);
    assert_eq!(run(&["infer", "--checkpoint", c, "--data", s(&data), "--pose", s(&data.join("frames")), "--garment-blend", c, c, "0.5", "--out", s(&all)]), 0);
    assert_eq!(read_ply(&all.join("0001.ply")).unwrap(), cloud);
    assert!(all.join("0000.ply").is_file());

    let insp = t.path().join("inspect");
    assert_eq!(run(&["inspect", "--checkpoint", c, "--out", s(&insp)]), 0);
    assert!(insp.join("manifest.json").is_file());
    assert_eq!(run(&["infer", "--checkpoint", c, "--data", s(&data), "--pose", s(&pose), "--garment-blend", c, c, "half", "--out", s(&all)]), 2);
}

#[test]
fn eval_of_identical_directories_is_zero() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(run(&["synth", "--frames", "2", "--out", s(&data)]), 0);
    let frames = data.join("frames");
    let pred = t.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for id in ["0000", "0001"] {
        fs::copy(frames.join(format!("{id}.scan.ply")), pred.join(format!("{id}.scan.ply"))).unwrap();
    }
    let out = t.path().join("eval");
    assert_eq!(run(&["eval", "--pred", s(&pred), "--gt", s(&data), "--size", "128", "--out", s(&out)]), 0);
    let report: MetricsReport = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.frames.len(), 2);
    let m = report.mean.unwrap();
    assert_eq!((m.mse, m.cd, m.nml), (0.0, 0.0, 0.0));

    let renders = t.path().join("renders");
    assert_eq!(run(&["render", "--input", s(&pred.join("0000.scan.ply")), "--size", "64", "--out", s(&renders)]), 0);
    let a = tree(&renders);
    assert_eq!(a.len(), 2);
    assert_eq!(run(&["render", "--input", s(&pred.join("0000.scan.ply")), "--size", "64", "--out", s(&renders)]), 0);
    assert_eq!(tree(&renders), a);
}

#[test]
fn cutmap_command_reports_agreement() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(run(&["synth", "--frames", "0", "--out", s(&data)]), 0);
    let out = t.path().join("cut");
    assert_eq!(run(&["cutmap", "--data", s(&data), "--out", s(&out)]), 0);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("cutmap_report.json")).unwrap()).unwrap();
    assert!(report["oracle_agreement"].as_f64().unwrap() >= 0.99);
    assert!(out.join("cutmap.bin").is_file() && out.join("labels_front.png").is_file());
}

#[test]
fn exit_codes_distinguish_failures() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nope");
    // usage
    assert_eq!(run(&["synth", "--frames", "x", "--out", s(&missing)]), 2);
    assert_eq!(run(&["synth", "--frames", "1"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    // data validation
    assert_eq!(run(&["train", "--data", s(&missing), "--out", s(&t.path().join("r"))]), 3);
    assert_eq!(run(&["inspect", "--checkpoint", s(&missing)]), 3);

    let (pred, gt) = (t.path().join("pred"), t.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    let good = PointCloudN::with_normals(vec![[0.0; 3], [0.1, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]; 2]).unwrap();
    let bad = PointCloudN { points: vec![[f64::NAN, 0.0, 0.0], [0.1, 0.0, 0.0]], normals: Some(vec![[0.0, 0.0, 1.0]; 2]) };
    write_ply(&gt.join("0000.ply"), &good).unwrap();
    write_ply(&pred.join("0000.ply"), &bad).unwrap();
    let report = t.path().join("e");
    let eval = ["eval", "--pred", s(&pred), "--gt", s(&gt), "--size", "16", "--out", s(&report)];
    // a non-finite input is a data error
    assert_eq!(run(&eval), 3);
    // finite inputs whose squared distances overflow are a numeric fault
    let far = PointCloudN::with_normals(vec![[1e200, 0.0, 0.0], [0.1, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]; 2]).unwrap();
    write_ply(&pred.join("0000.ply"), &far).unwrap();
    assert_eq!(run(&eval), 4);

    // the binary reports the same code to the shell
    let status = Command::new(env!("CARGO_BIN_EXE_avatar")).args(["inspect", "--checkpoint", s(&missing)]).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn config_file_sits_between_preset_and_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"dataset": {"frames": 3, "seed": 9}}"#).unwrap();
    let a = t.path().join("a");
    assert_eq!(run(&["synth", "--config", s(&cfg), "--out", s(&a)]), 0);
    let ds = load_dataset(&a).unwrap();
    assert_eq!((ds.samples.len(), ds.file.config.seed), (3, 9));
    let b = t.path().join("b");
    assert_eq!(run(&["synth", "--config", s(&cfg), "--frames", "1", "--seed", "4", "--out", s(&b)]), 0);
    let ds = load_dataset(&b).unwrap();
    assert_eq!((ds.samples.len(), ds.file.config.seed), (1, 4));
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(b.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["config"]["frames"], 1);
}
