//! End-to-end command-line pipeline on a tiny corpus, including the exit-code
//! contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn echoid() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echoid"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn echoid");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn echoid").status.code().unwrap_or(-1)
}

struct Corpus {
    _tmp: tempfile::TempDir,
    raw: PathBuf,
    echo: PathBuf,
}

fn tiny_corpus() -> Corpus {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let echo = tmp.path().join("echo");
    run_ok(echoid().args([
        "synth",
        "--out",
        raw.to_str().unwrap(),
        "--users",
        "4",
        "--pretrain-users",
        "2",
        "--days",
        "2",
        "--sessions",
        "5",
        "--session-secs",
        "1.0",
        "--seed",
        "3",
    ]));
    run_ok(echoid().args([
        "process",
        "--manifest",
        raw.join("manifest.json").to_str().unwrap(),
        "--out",
        echo.to_str().unwrap(),
    ]));
    Corpus {
        _tmp: tmp,
        raw,
        echo,
    }
}

#[test]
fn full_pipeline_on_tiny_corpus() {
    let corpus = tiny_corpus();
    let dir = corpus.raw.parent().unwrap();

    // Session files: 4 users × 2 days × 5 sessions, plus manifest and digest.
    let rec_count = std::fs::read_dir(&corpus.raw)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "rec")
        })
        .count();
    assert_eq!(rec_count, 40);
    assert!(corpus.raw.join("run_digest.json").exists());

    let base = dir.join("base.ckpt");
    run_ok(echoid().args([
        "pretrain",
        "--manifest",
        corpus.echo.join("manifest.json").to_str().unwrap(),
        "--out",
        base.to_str().unwrap(),
        "--epochs",
        "2",
        "--drop-practice",
        "1",
    ]));
    assert!(base.exists());

    // Single-user enrollment.
    let user_ckpt = dir.join("u02.ckpt");
    run_ok(echoid().args([
        "enroll",
        "--manifest",
        corpus.echo.join("manifest.json").to_str().unwrap(),
        "--base",
        base.to_str().unwrap(),
        "--user",
        "u02",
        "--out",
        user_ckpt.to_str().unwrap(),
        "--epochs",
        "2",
        "--drop-practice",
        "1",
    ]));
    assert!(user_ckpt.exists());

    // Protocol evaluation with CSV output.
    let report = dir.join("report.json");
    let csv = dir.join("report.csv");
    run_ok(echoid().args([
        "eval",
        "--manifest",
        corpus.echo.join("manifest.json").to_str().unwrap(),
        "--base",
        base.to_str().unwrap(),
        "--protocol",
        "leave_one_day_out",
        "--out",
        report.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--drop-practice",
        "1",
        "--enroll-epochs",
        "2",
    ]));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    // Leave-one-day-out over 2 days: a 2×2 grid of cells.
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.lines().count() > 4);

    // Fine-tune from day 2 data.
    let tuned = dir.join("u02_ft.ckpt");
    run_ok(echoid().args([
        "finetune",
        "--manifest",
        corpus.echo.join("manifest.json").to_str().unwrap(),
        "--model",
        user_ckpt.to_str().unwrap(),
        "--user",
        "u02",
        "--day",
        "2",
        "--out",
        tuned.to_str().unwrap(),
        "--drop-practice",
        "1",
    ]));
    assert!(tuned.exists());

    // Merge two copies of the report.
    let merged = dir.join("merged.csv");
    run_ok(echoid().args([
        "report",
        "--out",
        merged.to_str().unwrap(),
        report.to_str().unwrap(),
        report.to_str().unwrap(),
    ]));
    let merged_text = std::fs::read_to_string(&merged).unwrap();
    let body_lines = merged_text.lines().count() - 1;
    assert_eq!(body_lines % 2, 0, "two reports produce paired rows");

    // Chirp export.
    let chirp = dir.join("tx_right.f32");
    run_ok(echoid().args(["export-chirp", "--band", "right", "--out", chirp.to_str().unwrap()]));
    assert_eq!(std::fs::metadata(&chirp).unwrap().len(), 600 * 4);
    assert!(dir.join("tx_right.f32.json").exists());
}

#[test]
fn synth_rejects_zero_sessions() {
    let tmp = tempfile::tempdir().unwrap();
    let code = exit_code(echoid().args([
        "synth",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--sessions",
        "0",
    ]));
    assert_eq!(code, 2);
}

#[test]
fn synth_refuses_nonempty_dir_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("existing.txt"), "x").unwrap();
    let code = exit_code(echoid().args([
        "synth",
        "--out",
        tmp.path().to_str().unwrap(),
        "--users",
        "2",
        "--pretrain-users",
        "1",
        "--days",
        "1",
        "--sessions",
        "1",
        "--session-secs",
        "0.5",
    ]));
    assert_eq!(code, 2);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let code = exit_code(echoid().args([
        "process",
        "--manifest",
        "/nonexistent/manifest.json",
        "--out",
        "/tmp/never-created-echoid",
    ]));
    assert_eq!(code, 3);
}

fn corrupt_manifest_with_duplicate_session(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    // Point user 1's first session id at user 0's first session id.
    let id0 = manifest["users"][0]["days"][0]["sessions"][0]["id"]
        .as_str()
        .unwrap()
        .to_string();
    manifest["users"][1]["days"][0]["sessions"][0]["id"] = serde_json::Value::String(id0);
    std::fs::write(path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
}

#[test]
fn corrupted_manifest_triggers_exit_code_4() {
    let corpus = tiny_corpus();
    let manifest_path = corpus.echo.join("manifest.json");
    corrupt_manifest_with_duplicate_session(&manifest_path);
    let report = corpus.echo.join("report.json");
    let code = exit_code(echoid().args([
        "eval",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--scratch",
        "--protocol",
        "cross_day",
        "--out",
        report.to_str().unwrap(),
        "--drop-practice",
        "1",
        "--enroll-epochs",
        "1",
    ]));
    assert_eq!(code, 4, "duplicate session ids must fail as leakage");
}
