use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrfmap::map_io::ProbabilityMap;
use mrfmap::{CameraIntrinsics, SensorNoiseModel};

fn mrfmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrfmap")).args(args).output().expect("spawn mrfmap")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const W: u32 = 48;
const H: u32 = 36;

/// Scene, intrinsics and noise model files for a small box seen from six sides.
fn inputs(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cameras: Vec<String> = (0..6)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 6.0;
            format!(r#"{{"eye": [{}, {}, 0.9], "target": [0, 0, 0.25]}}"#, 1.6 * a.cos(), 1.6 * a.sin())
        })
        .collect();
    let scene = format!(
        r#"{{"boxes": [{{"min": [-0.25, -0.25, 0], "max": [0.25, 0.25, 0.5]}}],
            "planes": [{{"point": [0, 0, 0], "normal": [0, 0, 1], "extent": 0.8}}],
            "cameras": [{}],
            "volume": {{"min": [-0.8, -0.8, -0.1], "max": [0.8, 0.8, 0.7]}}}}"#,
        cameras.join(",")
    );
    let scene_path = dir.join("scene.json");
    std::fs::write(&scene_path, scene).unwrap();
    let intr = CameraIntrinsics::new(0.8 * W as f64, 0.8 * W as f64, W as f64 / 2.0, H as f64 / 2.0, W, H, 5000.0).unwrap();
    let intr_path = dir.join("intrinsics.json");
    mrfmap::dataset_io::save_intrinsics(&intr_path, &intr).unwrap();
    let model_path = dir.join("model.json");
    SensorNoiseModel::constant(0.005, W, H, 0.1, 10.0).unwrap().save(&model_path).unwrap();
    (scene_path, intr_path, model_path)
}

fn simulate(dir: &Path) -> PathBuf {
    let (scene, intr, model) = inputs(dir);
    let ds = dir.join("ds");
    let out = mrfmap(&[
        "simulate", "--scene", s(&scene), "--intrinsics", s(&intr), "--noise-model", s(&model), "--seed", "11", "-o",
        s(&ds),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ds
}

#[test]
fn help_lists_subcommands() {
    let out = mrfmap(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["build", "eval", "calibrate", "simulate", "compare"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let out = mrfmap(&["build", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--resolution") && text.contains("meters"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&mrfmap(&["build", "--no-such-flag"])), 2);
    assert_eq!(code(&mrfmap(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path());
    // Missing output directory.
    assert_eq!(code(&mrfmap(&["build", "--dataset", s(&ds)])), 2);
    // Wrong bounds arity.
    let o = dir.path().join("o");
    assert_eq!(code(&mrfmap(&["build", "--dataset", s(&ds), "--bounds", "0,0,0,1", "-o", s(&o)])), 2);
    // Invalid prior.
    assert_eq!(code(&mrfmap(&["build", "--dataset", s(&ds), "--prior", "1.5", "-o", s(&o)])), 2);
}

#[test]
fn simulate_requires_seed_with_noise() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, intr, model) = inputs(dir.path());
    let o = dir.path().join("o");
    let out = mrfmap(&["simulate", "--scene", s(&scene), "--intrinsics", s(&intr), "--noise-model", s(&model), "-o", s(&o)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"boxes": [{"min": [0, 0, 0]}]}"#).unwrap();
    assert_eq!(code(&mrfmap(&["simulate", "--scene", s(&bad), "--intrinsics", s(&intr), "-o", s(&o)])), 2);
}

#[test]
fn missing_trajectory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path());
    std::fs::remove_file(ds.join("trajectory.txt")).unwrap();
    let out = mrfmap(&["build", "--dataset", s(&ds), "-o", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("trajectory.txt"));
}

#[test]
fn calibrate_reports_bad_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("samples.csv");
    std::fs::write(&csv, "u,v,z_meas,z_gt\n1,2,1.0,1.0\n3,4,oops,1.0\n").unwrap();
    let out = mrfmap(&["calibrate", "--samples", s(&csv), "--width", "40", "--height", "40", "-o", s(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn calibrate_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("samples.csv");
    let mut text = String::from("u,v,z_meas,z_gt\n");
    // Paired ±dz residuals at each depth leave the bias fit exact.
    for i in 0..200 {
        let d = 0.5 + i as f64 * 0.02;
        for dz in [0.002, -0.002] {
            text.push_str(&format!("{},{},{},{d}\n", i % 20, (i / 20) % 20, 1.01 * d + dz));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let out = mrfmap(&["calibrate", "--samples", s(&csv), "--width", "20", "--height", "20", "-o", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = SensorNoiseModel::load(&dir.path().join("noise_model.json")).unwrap();
    assert!((model.aggregate().bias[1] - 1.01).abs() < 1e-6);
    assert!(dir.path().join("fit_diagnostics.json").exists());
}

#[test]
fn simulate_build_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path());
    for f in ["trajectory.txt", "depth.txt", "depth_gt.txt", "intrinsics.json", "volume.json", "noise_model.json"] {
        assert!(ds.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(ds.join("noisy")).unwrap().count(), 6);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        let out = mrfmap(&["--threads", "1", "build", "--dataset", s(&ds), "--seed", "5", "--tau-trans", "0.1", "-o", s(o)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let bytes = std::fs::read(a.join("map.mrfm")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("map.mrfm")).unwrap(), "builds differ");
    let map = ProbabilityMap::load(&a.join("map.mrfm")).unwrap();
    assert!(map.allocated_bricks() > 0);
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("build.json")).unwrap()).unwrap();
    assert_eq!(log["seed"], 5);
    assert_eq!(log["method"], "mrf");
    assert_eq!(log["keyframes_used"].as_array().unwrap().len(), 6);

    let e = dir.path().join("e");
    let out = mrfmap(&["eval", "--dataset", s(&ds), "--map", s(&a.join("map.mrfm")), "--png", "-o", s(&e)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let scores = mrfmap::map_eval::read_scores_csv(&e.join("scores.csv")).unwrap();
    assert_eq!(scores.len(), 6);
    assert!(scores.iter().all(|r| r.score > 0.7), "{scores:?}");
    assert_eq!(std::fs::read_dir(e.join("classification")).unwrap().count(), 6);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(e.join("summary.json")).unwrap()).unwrap();
    assert!(summary["per_resolution"]["0.05"].is_object());
}

#[test]
fn compare_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path());
    let o = dir.path().join("cmp");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"output": "{}", "dataset": {{"path": "{}", "tau_trans": 0.1}}, "resolutions": [0.1, 0.05],
                "mrf": {{"passes": 2}}}}"#,
            s(&o),
            s(&ds)
        ),
    )
    .unwrap();
    let out = mrfmap(&["--config", s(&cfg), "compare"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = mrfmap_cli::commands::read_compare_csv(&o.join("compare.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    for res in [0.1, 0.05] {
        let get = |m| rows.iter().find(|r| r.resolution == res && r.method == m).unwrap().mean;
        assert!(get(mrfmap::Method::Mrf) > get(mrfmap::Method::LogOdds), "{rows:?}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout, std::fs::read_to_string(o.join("compare.txt")).unwrap());

    std::fs::write(&cfg, r#"{"grid": {"voxels": 3}}"#).unwrap();
    assert_eq!(code(&mrfmap(&["--config", s(&cfg), "compare"])), 2);
}
