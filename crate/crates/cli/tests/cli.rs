use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn dogs(args: &[&str]) -> (bool, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_dogs"))
        .args(args)
        .output()
        .unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().last().unwrap_or_else(|| {
        panic!(
            "no output; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        )
    });
    (out.status.success(), serde_json::from_str(line).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_scene(dir: &Path) -> String {
    let scene_dir = dir.join("scene");
    let (ok, v) = dogs(&[
        "gen",
        "--out",
        p(&scene_dir),
        "--seed",
        "3",
        "--gaussians",
        "30",
        "--cameras",
        "16",
        "--image-size",
        "24",
    ]);
    assert!(ok, "{v}");
    assert_eq!(v["views"], 16);
    v["scene"].as_str().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_runs_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_scene(tmp.path());
    let runs = tmp.path().join("runs");

    let manifest = tmp.path().join("split.json");
    let svg = tmp.path().join("split.svg");
    let (ok, v) = dogs(&[
        "split",
        "--scene",
        &scene,
        "--workers",
        "2",
        "--out",
        p(&manifest),
        "--svg",
        p(&svg),
    ]);
    assert!(ok, "{v}");
    assert_eq!(v["blocks"], 2);
    let m: Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["blocks"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let central = runs.join("a_central");
    let (ok, v) = dogs(&[
        "train",
        "--scene",
        &scene,
        "--out",
        p(&central),
        "--centralized",
        "--iterations",
        "30",
    ]);
    assert!(ok, "{v}");
    assert_eq!(v["mode"], "centralized");

    let config = tmp.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"blocks": 3, "consensus": {"interval": 7}, "train": {"iterations": 30}}"#,
    )
    .unwrap();
    let dist = runs.join("b_dist");
    let (ok, v) = dogs(&[
        "train",
        "--scene",
        &scene,
        "--out",
        p(&dist),
        "--config",
        p(&config),
        "--workers",
        "2",
        "--consensus-interval",
        "10",
    ]);
    assert!(ok, "{v}");
    let record: Value =
        serde_json::from_slice(&std::fs::read(dist.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["blocks"], 2);
    assert_eq!(record["metrics"]["config"]["consensus"]["interval"], 10);
    assert_eq!(record["metrics"]["config"]["train"]["iterations"], 30);
    let diag = std::fs::read_to_string(dist.join("diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 3);

    let model = dist.join("model.gspl");
    let png = tmp.path().join("view.png");
    let (ok, v) = dogs(&[
        "render",
        "--scene",
        &scene,
        "--model",
        p(&model),
        "--view",
        "7",
        "--out",
        p(&png),
    ]);
    assert!(ok, "{v}");
    assert!(png.is_file());
    let (ok, v) = dogs(&["eval", "--scene", &scene, "--model", p(&model)]);
    assert!(ok, "{v}");
    assert_eq!(v["psnr"], record["metrics"]["mean_psnr"]);

    let out = tmp.path().join("report");
    let (ok, v) = dogs(&["report", "--runs", p(&runs), "--out", p(&out)]);
    assert!(ok, "{v}");
    assert_eq!(v["runs"], 2);
    let csv = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("residuals_b_dist.csv").is_file());
    assert!(out.join("strip_a_central.png").is_file());

    let first = std::fs::read(out.join("strip_b_dist.png")).unwrap();
    let (ok, _) = dogs(&["report", "--runs", p(&runs), "--out", p(&out)]);
    assert!(ok);
    assert_eq!(std::fs::read(out.join("strip_b_dist.png")).unwrap(), first);
    assert_eq!(std::fs::read_to_string(out.join("runs.csv")).unwrap(), csv);
}

#[test]
fn failures_print_an_error_line_and_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let (ok, v) = dogs(&[
        "report",
        "--runs",
        p(tmp.path()),
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert!(!ok);
    assert_eq!(v["kind"], "NoRunsFound");
    assert!(v["error"].as_str().unwrap().contains("no runs found"));

    let (ok, v) = dogs(&[
        "eval",
        "--scene",
        p(&tmp.path().join("missing.dogs")),
        "--model",
        "x",
    ]);
    assert!(!ok);
    assert!(v["error"].as_str().unwrap().contains("missing.dogs"));
}

#[test]
fn sockets_mode_matches_simulated() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_scene(tmp.path());
    let run = |mode: &str| {
        let out = tmp.path().join(mode);
        let (ok, v) = dogs(&[
            "train",
            "--scene",
            &scene,
            "--out",
            p(&out),
            "--mode",
            mode,
            "--workers",
            "2",
            "--iterations",
            "20",
            "--consensus-interval",
            "10",
        ]);
        assert!(ok, "{v}");
        std::fs::read(out.join("model.gspl")).unwrap()
    };
    assert_eq!(run("simulated"), run("sockets"));
}
