mod common;

use common::{cli_smoke, dynsplat, report_is_complete};

#[test]
fn simulate_run_eval_with_fusion_off() {
    let dir = tempfile::tempdir().unwrap();
    let report = cli_smoke(dir.path(), &["--mask_fusion=off"]).unwrap();
    assert!(!report.mask_fusion);
    assert!(report_is_complete(&report));
    assert_eq!(report.frames, 25);
    assert_eq!(report.keyframes, 3);
    let out = dir.path().join("out");
    for f in ["trajectory.txt", "trajectory_final.txt", "map.txt", "config.json", "renders/000020.png"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let live = std::fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(live.lines().count(), 25);
}

#[test]
fn eval_of_a_trajectory_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(dynsplat(&["simulate", "--out", data.to_str().unwrap(), "--n_frames=12"]).status.success());
    let gt = data.join("groundtruth.txt");
    let g = gt.to_str().unwrap();
    let out = dynsplat(&["eval", "--est", g, "--gt", g]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["ate_rmse"].as_f64().unwrap() < 1e-9, "{v}");
    assert_eq!(v["pairs"].as_u64().unwrap(), 12);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(dynsplat(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(dynsplat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dynsplat(&["simulate", "--out", d, "--no_such_key=1"]).status.code(), Some(1));
    assert_eq!(dynsplat(&["simulate", "--out", d, "--seed=minus"]).status.code(), Some(1));
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    let code = dynsplat(&["run", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code();
    assert_eq!(code, Some(1));
}

#[test]
fn tracking_lost_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert!(dynsplat(&["simulate", "--out", data.to_str().unwrap(), "--n_frames=3"]).status.success());
    let res = dynsplat(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--pose_min_pixels=100000",
    ]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn config_prints_the_defaults() {
    let out = dynsplat(&["config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = dynsplat::io_eval::Config::from_json(&text).unwrap();
    assert_eq!(cfg, dynsplat::io_eval::Config::default());
}

#[test]
fn render_reproduces_saved_keyframes() {
    let dir = tempfile::tempdir().unwrap();
    cli_smoke(dir.path(), &[]).unwrap();
    let out = dir.path().join("out");
    let renders = dir.path().join("again");
    let res = dynsplat(&[
        "render",
        "--map",
        out.join("map.txt").to_str().unwrap(),
        "--poses",
        out.join("trajectory_final.txt").to_str().unwrap(),
        "--intrinsics",
        dir.path().join("data/intrinsics.json").to_str().unwrap(),
        "--out",
        renders.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let a = dynsplat::io_eval::read_color_png(renders.join("000010.png")).unwrap();
    let b = dynsplat::io_eval::read_color_png(out.join("renders/000010.png")).unwrap();
    assert_eq!(a, b);
}
