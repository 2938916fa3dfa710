//! End-to-end runs of the `raidx` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "steps = 20\neval_every = 0\nk = 5\ndata.n_train = 40\ndata.n_test = 20\ndata.scenes = 10\n";

fn raidx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raidx"))
        .args(args)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_pipeline_writes_artifacts_and_infers() {
    let dir = setup(SMALL);
    for cmd in ["gen-data", "build-index", "train", "eval"] {
        let o = raidx(dir.path(), &[cmd]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = dir.path().join("out");
    for f in ["index.rdxi", "ckpt/final.rdxc", "runlog.jsonl", "report.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 20);

    let overlay = dir.path().join("sal.ppm");
    let o = raidx(dir.path(), &["infer", "--item", "3", "--saliency", overlay.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let first = text.lines().next().unwrap();
    if first == "verdict: UNPARSEABLE" {
        assert!(text.contains("\nfailure_reason: "));
        assert!(text.contains("\nraw: "));
    } else {
        assert!(first == "verdict: REAL" || first == "verdict: FAKE", "{text}");
        assert!(text.contains("\nthink: "));
    }
    let ppm = fs::read(&overlay).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);
}

#[test]
fn infer_reads_pgm_images() {
    let dir = setup(SMALL);
    for cmd in ["gen-data", "build-index", "train"] {
        assert_eq!(raidx(dir.path(), &[cmd]).status.code(), Some(0));
    }
    let mut pgm = b"P5\n32 32\n255\n".to_vec();
    pgm.extend((0..32 * 32).map(|i| (i % 251) as u8));
    let path = dir.path().join("img.pgm");
    fs::write(&path, pgm).unwrap();
    let o = raidx(dir.path(), &["infer", "--image", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("verdict: "));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = setup("k = 0\n");
    let o = raidx(dir.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("raidx: "));

    let dir = setup("no_such_key = 1\n");
    assert_eq!(raidx(dir.path(), &["gen-data"]).status.code(), Some(2));

    let dir = setup(SMALL);
    assert_eq!(raidx(dir.path(), &["gen-data", "--arm", "sometimes"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_three() {
    let dir = setup(SMALL);
    assert_eq!(raidx(dir.path(), &["train"]).status.code(), Some(3));
    assert_eq!(raidx(dir.path(), &["gen-data"]).status.code(), Some(0));
    assert_eq!(raidx(dir.path(), &["train"]).status.code(), Some(3), "full-rag needs the index");
    assert_eq!(raidx(dir.path(), &["eval"]).status.code(), Some(3));
    let missing = dir.path().join("nope.pgm");
    assert_eq!(raidx(dir.path(), &["infer", "--image", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn corrupt_dataset_exits_with_three() {
    let dir = setup(SMALL);
    assert_eq!(raidx(dir.path(), &["gen-data"]).status.code(), Some(0));
    let grid = dir.path().join("out/dataset/train.f32");
    let mut bytes = fs::read(&grid).unwrap();
    bytes[17] ^= 0x40;
    fs::write(&grid, bytes).unwrap();
    assert_eq!(raidx(dir.path(), &["build-index"]).status.code(), Some(3));
}

#[test]
fn seed_flag_changes_the_dataset() {
    let dir = setup(SMALL);
    let a = stdout(&raidx(dir.path(), &["gen-data", "--seed", "1"]));
    let b = stdout(&raidx(dir.path(), &["gen-data", "--seed", "2"]));
    let c = stdout(&raidx(dir.path(), &["gen-data", "--seed", "1"]));
    assert!(a.starts_with("dataset "));
    assert_ne!(a, b);
    assert_eq!(a, c);
}
