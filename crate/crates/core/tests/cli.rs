use std::path::Path;
use std::process::{Command, Output};

fn downpour(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_downpour"))
        .args(args)
        .current_dir(cwd)
        .env("DOWNPOUR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_augment_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&downpour(&["synth", "--out", "scene", "--width", "64", "--height", "48"], d));
    for f in ["frame1.ppm", "frame2.ppm", "depth1.pfm", "depth2.pfm", "cameras.txt", "flow_gt.flo"] {
        assert!(d.join("scene").join(f).exists(), "missing {f}");
    }
    ok(&downpour(&["augment", "scene", "--preset", "fog", "--out", "fog"], d));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("fog/metrics.json")).unwrap()).unwrap();
    let robustness = metrics["aee_robustness"].as_f64().expect("robustness in metrics.json");
    assert!(robustness.is_finite() && robustness >= 0.0);
    assert!(d.join("fog/manifest.json").exists());

    let eval = downpour(&["eval", "--benign", "fog/flow_benign.flo", "--attacked", "fog/flow_attacked.flo"], d);
    ok(&eval);
    let text = String::from_utf8_lossy(&eval.stdout);
    let reread: f64 = text.trim().parse().expect("eval prints the robustness");
    // .flo stores f32
    assert!((reread - robustness).abs() <= 1e-5 * robustness.max(1.0), "{reread} vs {robustness}");
}

#[test]
fn attack_with_zero_steps_reports_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&downpour(&["synth", "--out", "scene", "--width", "64", "--height", "48"], d));
    ok(&downpour(&["attack", "scene", "--preset", "snow", "--steps", "0", "--out", "att"], d));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("att/report.json")).unwrap()).unwrap();
    assert_eq!(report["initial"]["loss"], report["final"]["loss"]);
    assert_eq!(report["initial_aee_robustness_render"], report["final_aee_robustness_render"]);
    assert!(d.join("att/particles_best.dpps").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&downpour(&["synth", "--out", "scene", "--width", "32", "--height", "24"], d));
    let out = downpour(&["augment", "scene", "--preset", "hail", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("snow") && err.contains("fog"), "{err}");
    assert_eq!(downpour(&["frobnicate"], d).status.code(), Some(2));
}

#[test]
fn missing_scene_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = downpour(&["augment", "does-not-exist", "--preset", "snow", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = downpour(&["gradcheck"], tmp.path());
    ok(&out);
}

#[test]
fn dump_preset_prints_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = downpour(&["--dump-preset", "rain"], tmp.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("blur_particles = 20"), "{text}");
}
