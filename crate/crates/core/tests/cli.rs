use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retarget")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SYNTH: &str = r#"{"seed": 4, "characters": 3, "clips_per_kind": 1, "frames": 24}"#;
const TRAIN: &str = r#"{"batch_size": 4, "window_length": 8, "steps": 3, "lr": 1e-3, "checkpoint_every": 0, "seed": 2,
 "model": {"encoder": {"dim": 8, "queries": 1, "temporal_layers": 1, "heads": 2, "ff_mult": 2, "dropout": 0.0},
           "decoder": {"dim": 8, "layers": 1, "heads": 2, "ff_mult": 2, "dropout": 0.0}}}"#;

#[test]
fn parse_minimal_fixture() {
    let out = cli(&["parse", &fixture("minimal.bvh"), "--summary"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("joints: 3"), "{text}");
    assert!(text.contains("frames: 1"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["parse"]).status.code(), Some(1));
    let bad = write(dir.path(), "bad.bvh", "HIERARCHY\nROOT a\n{\n");
    assert_eq!(cli(&["parse", &bad]).status.code(), Some(2));

    let synth = write(dir.path(), "synth.json", SYNTH);
    let data = dir.path().join("data").display().to_string();
    assert!(cli(&["synth", "--out", &data, "--config", &synth]).status.success());
    let bad_train = write(dir.path(), "train.json", r#"{"window_length": 1}"#);
    let ck = dir.path().join("ck").display().to_string();
    assert_eq!(cli(&["train", "--data", &data, "--config", &bad_train, "--out", &ck]).status.code(), Some(3));
    let long = write(dir.path(), "long.json", &TRAIN.replace("\"window_length\": 8", "\"window_length\": 100"));
    assert_eq!(cli(&["train", "--data", &data, "--config", &long, "--out", &ck]).status.code(), Some(3));
}

#[test]
fn train_eval_retarget_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    let synth = write(dir.path(), "synth.json", SYNTH);
    let train = write(dir.path(), "train.json", TRAIN);
    assert!(cli(&["synth", "--out", &d("data"), "--config", &synth]).status.success());
    for run in ["a", "b"] {
        let out = cli(&["train", "--data", &d("data"), "--config", &train, "--out", &d(run)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = |r: &str| std::fs::read(dir.path().join(r).join("loss.csv")).unwrap();
    assert_eq!(csv("a"), csv("b"));
    assert_eq!(String::from_utf8(csv("a")).unwrap().lines().count(), 4);

    let ckpt = d("a/final.ckpt");
    for r in ["r1.json", "r2.json"] {
        assert!(cli(&["eval", "--ckpt", &ckpt, "--data", &d("data"), "--report", &d(r)]).status.success());
    }
    assert_eq!(std::fs::read(d("r1.json")).unwrap(), std::fs::read(d("r2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d("r1.json")).unwrap()).unwrap();
    assert_eq!(report["splits"].as_array().unwrap().len(), 4);

    let src = d("data/clips/char00__walk_0.bvh");
    let tgt = d("data/characters/char01_split.bvh");
    for out in ["o1.bvh", "o2.bvh"] {
        let res = cli(&["retarget", "--src", &src, "--target-skeleton", &tgt, "--ckpt", &ckpt, "--out", &d(out), "--seed", "3"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(std::fs::read(d("o1.bvh")).unwrap(), std::fs::read(d("o2.bvh")).unwrap());
    let parsed = cli(&["parse", &d("o1.bvh"), "--summary"]);
    assert!(String::from_utf8(parsed.stdout).unwrap().contains("frames: 24"));
}

#[test]
fn eval_report_matches_library_call() {
    use retarget::dataset::Dataset;
    use retarget::eval::evaluate_checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    let synth = write(dir.path(), "synth.json", SYNTH);
    let train = write(dir.path(), "train.json", TRAIN);
    assert!(cli(&["synth", "--out", &d("data"), "--config", &synth]).status.success());
    assert!(cli(&["train", "--data", &d("data"), "--config", &train, "--out", &d("ck")]).status.success());
    assert!(cli(&["eval", "--ckpt", &d("ck/final.ckpt"), "--data", &d("data"), "--report", &d("r.json"), "--seed", "9"]).status.success());
    let from_cli: retarget::eval::EvalReport = serde_json::from_slice(&std::fs::read(d("r.json")).unwrap()).unwrap();
    let ds = Dataset::load(Path::new(&d("data"))).unwrap();
    let direct = evaluate_checkpoint::<f32>(Path::new(&d("ck/final.ckpt")), &ds, 9).unwrap();
    assert_eq!(from_cli, direct);
}
