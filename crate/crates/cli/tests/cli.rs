//! End-to-end tests that drive the compiled binary the way a user
//! would, from `demo init` through `eval report`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn emokg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emokg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = emokg(args);
    assert!(
        out.status.success(),
        "emokg {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

struct Demo {
    _dir: TempDir,
    root: PathBuf,
}

fn init_demo() -> Demo {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("demo");
    run_ok(&["demo", "init", "--out", path_str(&root)]);
    let root = root.canonicalize().unwrap();
    Demo { _dir: dir, root }
}

#[test]
fn demo_init_writes_workspace() {
    let demo = init_demo();
    for name in [
        "graph.jsonl",
        "manifest.csv",
        "config.toml",
        "rules.json",
        "decoder.json",
        "images/forest_dog.png",
        "images/street_bench.png",
        "images/beach_waves.png",
    ] {
        assert!(demo.root.join(name).exists(), "missing {name}");
    }
}

#[test]
fn kg_build_demo_and_query_produce_paths() {
    let dir = TempDir::new().unwrap();
    let graph = dir.path().join("graph.jsonl");
    let stdout = run_ok(&[
        "kg",
        "build",
        "--demo",
        "--embed-dim",
        "16",
        "--out",
        path_str(&graph),
    ]);
    assert!(stdout.contains("24 nodes"));

    let sub = dir.path().join("sub.json");
    run_ok(&[
        "kg",
        "query",
        "--graph",
        path_str(&graph),
        "--start",
        "forest,dog",
        "--emotion",
        "fear",
        "--out",
        path_str(&sub),
    ]);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sub).unwrap()).unwrap();
    let paths = doc["paths"].as_array().unwrap();
    assert!(!paths.is_empty());
    for p in paths {
        let nodes = p["nodes"].as_array().unwrap();
        assert_eq!(nodes.last().unwrap(), "fear");
    }
}

#[test]
fn kg_build_requires_a_source() {
    let dir = TempDir::new().unwrap();
    let out = emokg(&[
        "kg",
        "build",
        "--out",
        path_str(&dir.path().join("g.jsonl")),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--records") && stderr.contains("--demo"));
}

#[test]
fn kg_query_rejects_unknown_emotion() {
    let dir = TempDir::new().unwrap();
    let graph = dir.path().join("graph.jsonl");
    run_ok(&["kg", "build", "--demo", "--out", path_str(&graph)]);
    let out = emokg(&[
        "kg",
        "query",
        "--graph",
        path_str(&graph),
        "--start",
        "forest",
        "--emotion",
        "melancholy",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("melancholy"));
}

#[test]
fn era_localize_writes_mask_and_sidecar() {
    let demo = init_demo();
    let mask = demo.root.join("mask.png");
    let stdout = run_ok(&[
        "era",
        "localize",
        "--image",
        path_str(&demo.root.join("images/forest_dog.png")),
        "--decoder",
        path_str(&demo.root.join("decoder.json")),
        "--map-size",
        "32",
        "--out",
        path_str(&mask),
    ]);
    assert!(stdout.contains("area"));
    assert!(mask.exists());
    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(demo.root.join("mask.box.json")).unwrap(),
    )
    .unwrap();
    assert!(sidecar["area"].as_u64().unwrap() > 0);
    assert!(sidecar["bbox"].is_object());
    assert_eq!(sidecar["threshold"].as_f64().unwrap(), 0.5);
}

#[test]
fn cues_select_then_prompt_compiles() {
    let demo = init_demo();
    let dir = TempDir::new().unwrap();
    let sub = dir.path().join("sub.json");
    run_ok(&[
        "kg",
        "query",
        "--graph",
        path_str(&demo.root.join("graph.jsonl")),
        "--start",
        "forest,dog",
        "--emotion",
        "fear",
        "--out",
        path_str(&sub),
    ]);
    let bank = dir.path().join("bank.json");
    let prompt = dir.path().join("prompt.txt");
    let stdout = run_ok(&[
        "cues",
        "select",
        "--graph",
        path_str(&demo.root.join("graph.jsonl")),
        "--subgraph",
        path_str(&sub),
        "--image",
        path_str(&demo.root.join("images/forest_dog.png")),
        "--emotion",
        "fear",
        "--out",
        path_str(&bank),
        "--prompt-out",
        path_str(&prompt),
    ]);
    assert!(stdout.contains("admitted"));
    let bank_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&bank).unwrap()).unwrap();
    assert!(!bank_doc["admitted"].as_array().unwrap().is_empty());
    let text = std::fs::read_to_string(&prompt).unwrap();
    assert!(!text.trim().is_empty());
    assert!(!text.contains("fear"), "prompt leaks the emotion word: {text}");
}

#[test]
fn edit_run_writes_image_and_trajectory() {
    let demo = init_demo();
    let dir = TempDir::new().unwrap();
    let mask = dir.path().join("mask.png");
    run_ok(&[
        "era",
        "localize",
        "--image",
        path_str(&demo.root.join("images/street_bench.png")),
        "--decoder",
        path_str(&demo.root.join("decoder.json")),
        "--map-size",
        "32",
        "--out",
        path_str(&mask),
    ]);
    let edited = dir.path().join("edited.png");
    let traj = dir.path().join("traj.json");
    run_ok(&[
        "edit",
        "run",
        "--image",
        path_str(&demo.root.join("images/street_bench.png")),
        "--mask",
        path_str(&mask),
        "--prompt",
        "a rusty bench under dim light",
        "--steps",
        "6",
        "--latent-res",
        "16",
        "--channels",
        "2",
        "--out",
        path_str(&edited),
        "--dump-trajectory",
        path_str(&traj),
    ]);
    assert!(edited.exists());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&traj).unwrap()).unwrap();
    for kind in ["inversion", "reconstruction", "editing"] {
        assert_eq!(doc[kind]["states"].as_array().unwrap().len(), 7);
    }
    let inv_end = doc["inversion"]["states"][6]["l2"].as_f64().unwrap();
    let rec_start = doc["reconstruction"]["states"][0]["l2"].as_f64().unwrap();
    assert!((inv_end - rec_start).abs() < 1e-9);
}

#[test]
fn pipeline_batch_runs_demo_manifest_and_reports() {
    let demo = init_demo();
    let run_dir = demo.root.join("run");
    let stdout = run_ok(&[
        "pipeline",
        "batch",
        "--manifest",
        path_str(&demo.root.join("manifest.csv")),
        "--config",
        path_str(&demo.root.join("config.toml")),
        "--out",
        path_str(&run_dir),
    ]);
    assert!(stdout.contains("3 succeeded, 0 failed"));
    for name in [
        "index.json",
        "summary.json",
        "eval_manifest.csv",
        "item_000/record.json",
        "item_000/mask.png",
        "item_000/edited.png",
        "item_002/record.json",
    ] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }

    let eval_dir = demo.root.join("eval");
    let stdout = run_ok(&[
        "eval",
        "report",
        "--manifest",
        path_str(&run_dir.join("eval_manifest.csv")),
        "--classifier",
        "stub",
        "--dim",
        "32",
        "--out",
        path_str(&eval_dir),
    ]);
    assert!(stdout.contains("rows 3"));
    assert!(eval_dir.join("report.csv").exists());
    assert!(eval_dir.join("report.md").exists());
}

#[test]
fn pipeline_batch_is_deterministic_across_runs() {
    let demo = init_demo();
    let run_a = demo.root.join("run_a");
    let run_b = demo.root.join("run_b");
    for dir in [&run_a, &run_b] {
        run_ok(&[
            "pipeline",
            "batch",
            "--manifest",
            path_str(&demo.root.join("manifest.csv")),
            "--config",
            path_str(&demo.root.join("config.toml")),
            "--out",
            path_str(dir),
        ]);
    }
    for name in [
        "index.json",
        "item_000/record.json",
        "item_001/record.json",
        "item_002/record.json",
        "item_000/edited.png",
    ] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn pipeline_batch_partial_failure_exits_two() {
    let demo = init_demo();
    let manifest = demo.root.join("broken.csv");
    std::fs::write(
        &manifest,
        "image_path,emotions,o_prompt,starts\n\
         images/forest_dog.png,fear,a dog in a forest,forest;dog\n\
         images/missing.png,awe,,beach\n",
    )
    .unwrap();
    let out = emokg(&[
        "pipeline",
        "batch",
        "--manifest",
        path_str(&manifest),
        "--config",
        path_str(&demo.root.join("config.toml")),
        "--out",
        path_str(&demo.root.join("run_broken")),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1 succeeded, 1 failed"), "stdout: {stdout}");
    let record: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(demo.root.join("run_broken/item_001/record.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(record["status"], "failed");
    let ok_record: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(demo.root.join("run_broken/item_000/record.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(ok_record["status"], "ok");
}

#[test]
fn pipeline_run_single_image_prints_prompt() {
    let demo = init_demo();
    let stdout = run_ok(&[
        "pipeline",
        "run",
        "--image",
        path_str(&demo.root.join("images/beach_waves.png")),
        "--emotion",
        "awe",
        "--config",
        path_str(&demo.root.join("config.toml")),
        "--starts",
        "beach,waves",
        "--out",
        path_str(&demo.root.join("single")),
    ]);
    assert!(stdout.contains("1 succeeded"));
    assert!(stdout.contains("prompt:"));
    assert!(demo.root.join("single/item_000/edited.png").exists());
}

#[test]
fn pipeline_run_fails_on_unknown_emotion() {
    let demo = init_demo();
    let out = emokg(&[
        "pipeline",
        "run",
        "--image",
        path_str(&demo.root.join("images/beach_waves.png")),
        "--emotion",
        "serenity",
        "--config",
        path_str(&demo.root.join("config.toml")),
        "--out",
        path_str(&demo.root.join("single_bad")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("serenity"));
}

#[test]
fn config_falls_back_to_environment_variable() {
    let demo = init_demo();
    let out = Command::new(env!("CARGO_BIN_EXE_emokg"))
        .args([
            "pipeline",
            "run",
            "--image",
            path_str(&demo.root.join("images/forest_dog.png")),
            "--emotion",
            "fear",
            "--starts",
            "forest,dog",
            "--out",
            path_str(&demo.root.join("env_run")),
        ])
        .env("EMOKG_CONFIG", path_str(&demo.root.join("config.toml")))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(demo.root.join("env_run/item_000/edited.png").exists());
}
