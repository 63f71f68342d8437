//! Black-box CLI tests against the built binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::synth_sources;
use editforge::bench::{write_manifest, BenchCase};
use editforge::store::ArtifactStore;
use editforge::taxonomy::Taxonomy;

fn editforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            r#"
schema_version = 1

[paths]
source_manifest = "sources.jsonl"
artifact_store = "store"
output_dir = "out"
{extra}
"#
        ),
    )
    .unwrap();
    path
}

fn seed_sources(dir: &Path, n: usize) {
    let store = ArtifactStore::open(dir.join("store")).unwrap();
    let sources = synth_sources(&store, n);
    editforge::curation::append_jsonl(&dir.join("sources.jsonl"), &sources).unwrap();
}

fn seed_bench_manifest(dir: &Path) -> std::path::PathBuf {
    let store = ArtifactStore::open(dir.join("store")).unwrap();
    let tax = Taxonomy::default_taxonomy();
    let img = editforge::imaging::GrayImage::constant(16, 16, 0.4);
    let image = store.put_image(&img.encode_png().unwrap(), "png").unwrap();
    let cases = vec![
        BenchCase {
            id: "b-0".to_string(),
            image: image.clone(),
            instruction_en: "add a red bird".to_string(),
            instruction_cn: None,
            subtask: tax.classify("subject_addition").unwrap(),
            reasoning_points: None,
        },
        BenchCase {
            id: "b-1".to_string(),
            image,
            instruction_en: "move the cup left of the plate".to_string(),
            instruction_cn: None,
            subtask: tax.classify("spatial_reasoning").unwrap(),
            reasoning_points: Some(vec!["cup ends up left of plate".to_string()]),
        },
    ];
    let path = dir.join("bench.jsonl");
    write_manifest(&path, &cases).unwrap();
    path
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag
    let out = editforge(dir.path(), &["curate", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
    // missing --config
    let out = editforge(dir.path(), &["curate"]);
    assert_eq!(out.status.code(), Some(2));
    // config present but editor endpoint missing (non-mock run)
    let cfg = write_config(dir.path(), "");
    seed_sources(dir.path(), 2);
    let out = editforge(dir.path(), &["--config", cfg.to_str().unwrap(), "curate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generator"));
    // help exits 0
    let out = editforge(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    seed_sources(dir.path(), 3);
    let out = editforge(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--mock", "--dry-run", "curate"],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(!dir.path().join("out").exists(), "dry run wrote outputs");
}

#[test]
fn mock_curate_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    seed_sources(dir.path(), 5);
    let out = editforge(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--mock",
            "curate",
            "--run-id",
            "t1",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Instruction Gen."), "missing stage table: {stdout}");
    assert!(stdout.contains("Failed Edit Filter"));

    let run_dir = dir.path().join("out/runs/t1");
    assert!(run_dir.join("manifest.jsonl").exists());
    let out = editforge(
        dir.path(),
        &["stats", "--run-dir", run_dir.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("Data Volume"));
}

#[test]
fn mock_bench_deterministic_and_canonical_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let manifest = seed_bench_manifest(dir.path());

    let run = || {
        editforge(
            dir.path(),
            &[
                "--config",
                cfg.to_str().unwrap(),
                "--mock",
                "bench",
                "--manifest",
                manifest.to_str().unwrap(),
                "--model",
                "m1",
            ],
        )
    };
    let out = run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("Overall="));
    let report = dir.path().join("out/bench/m1_en_report.json");
    let first = std::fs::read(&report).unwrap();
    let out = run();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(first, std::fs::read(&report).unwrap(), "reports not byte-identical");

    // canonical shape enforcement on a 2-case manifest
    let out = editforge(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--mock",
            "bench",
            "--manifest",
            manifest.to_str().unwrap(),
            "--canonical",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // report re-export round-trips
    let out = editforge(
        dir.path(),
        &[
            "report",
            "--report",
            report.to_str().unwrap(),
            "--out-dir",
            dir.path().join("reexport").to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert_eq!(
        std::fs::read(dir.path().join("out/bench/m1_en_overall.csv")).unwrap(),
        std::fs::read(dir.path().join("reexport/m1_en_overall.csv")).unwrap()
    );
}

#[test]
fn mock_verify_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let store = ArtifactStore::open(dir.path().join("store")).unwrap();
    let tax = Taxonomy::default_taxonomy();
    let img = editforge::imaging::GrayImage::constant(16, 16, 0.3);
    let image = store.put_image(&img.encode_png().unwrap(), "png").unwrap();
    let mut t = editforge::model::Triplet::new(
        "v-0".to_string(),
        image.clone(),
        "add a red bird".to_string(),
        tax.classify("subject_addition").unwrap(),
    );
    t.edited = Some(image);
    t.status = editforge::model::TripletStatus::Edited;
    let input = dir.path().join("edited.jsonl");
    editforge::curation::append_jsonl(&input, &[t]).unwrap();

    let output = dir.path().join("verified.jsonl");
    let out = editforge(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--mock",
            "verify",
            "--input",
            input.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let verified: Vec<editforge::model::Triplet> =
        editforge::curation::read_jsonl(&output).unwrap();
    assert_eq!(verified.len(), 1);
    assert_eq!(verified[0].status, editforge::model::TripletStatus::Verified);
    assert_eq!(
        verified[0].refined_instruction.as_deref(),
        Some("add a red bird")
    );
}

#[test]
fn audit_d2po_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |tw: f64, rw: f64, tl: f64, rl: f64| {
        serde_json::json!({
            "context_id": "c", "beta": 1.0,
            "logp_theta_w": tw, "logp_ref_w": rw,
            "logp_theta_l": tl, "logp_ref_l": rl,
        })
        .to_string()
    };
    let pairs = dir.path().join("pairs.jsonl");
    // three symmetric pairs (loss ln 2) plus two malformed lines
    std::fs::write(
        &pairs,
        format!(
            "{}\nnot json\n{}\n{{\"beta\": 1.0}}\n{}\n",
            mk(-1.0, -2.0, -1.0, -2.0),
            mk(-0.5, -0.5, -0.5, -0.5),
            mk(-3.0, -1.0, -3.0, -1.0),
        ),
    )
    .unwrap();
    let out = editforge(dir.path(), &["audit-d2po", "--pairs", pairs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pairs=3"), "{stdout}");
    assert!(stdout.contains("skipped=2"), "{stdout}");
    assert!(stdout.contains("mean_loss=0.693147"), "{stdout}");
    assert!(stdout.contains("grad_pass_rate=1.0000"), "{stdout}");
}
