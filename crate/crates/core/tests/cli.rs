use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motifhead::model::{save_checkpoint, HeadConfig, HeadParams};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motifhead")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Single linear layer: hug = 0.5 x0 + x3 - 1, brawl = 1e-4 x2 - 6.05.
/// On the fixture store img_b's brawl probability is about 0.62
/// (expected table values computed independently in Python).
fn write_checkpoint(dir: &Path) -> PathBuf {
    let mut p = HeadParams::zeros(&HeadConfig::mlp(4, &[], 2)).unwrap();
    p.set_flat(&[0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 1e-4, 0.0, -1.0, -6.05]).unwrap();
    let path = dir.join("fixed.mhck");
    save_checkpoint(&p, &["hug".into(), "brawl".into()], &path).unwrap();
    path
}

fn all_test_manifest(dir: &Path) -> PathBuf {
    let path = dir.join("all_test.jsonl");
    std::fs::write(
        &path,
        "{\"motifs\":[\"hug\",\"brawl\"]}\n\
         {\"id\":\"img_a\",\"primary\":[\"hug\"],\"split\":\"test\"}\n\
         {\"id\":\"img_b\",\"primary\":[\"brawl\"],\"tag\":\"red_flag\",\"split\":\"test\"}\n\
         {\"id\":\"img_c\",\"primary\":[\"hug\"],\"tag\":\"canonical\",\"split\":\"test\"}\n",
    )
    .unwrap();
    path
}

#[test]
fn eval_perfect_fixture_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path());
    let manifest = all_test_manifest(dir.path());
    let store = fixture("three_by_four.mhed");
    let o = run(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--store", s(&store)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("all 3 1 1 1 1 1 1\n"), "{text}");
    assert!(text.contains("red_flag 1 1 1 1 1 1 1\n"), "{text}");
    assert!(text.contains("canonical 1 1 1 1 1 1 1\n"), "{text}");

    let o = run(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--store", s(&store), "--threshold", "0.7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    // img_b now predicts nothing
    assert!(text.contains("red_flag 1 0 0 0 0 1 0\n"), "{text}");
    assert!(!text.contains("all 3 1 1 1"), "{text}");
}

#[test]
fn eval_writes_reports_and_rejects_empty_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path());
    let out = dir.path().join("reports");
    let o = run(&[
        "eval", "--checkpoint", s(&ck), "--manifest", s(&all_test_manifest(dir.path())),
        "--store", s(&fixture("three_by_four.mhed")), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics_all.json", "metrics_red_flag.json", "metrics_canonical.json", "metrics.dat"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let train_only = dir.path().join("train_only.jsonl");
    std::fs::write(&train_only, "{\"motifs\":[\"hug\",\"brawl\"]}\n{\"id\":\"img_a\",\"primary\":[\"hug\"],\"split\":\"train\"}\n").unwrap();
    let o = run(&["eval", "--checkpoint", s(&ck), "--manifest", s(&train_only), "--store", s(&fixture("three_by_four.mhed"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn predict_table() {
    let dir = tempfile::tempdir().unwrap();
    let ck = write_checkpoint(dir.path());
    let o = run(&["predict", "--checkpoint", s(&ck), "--store", s(&fixture("three_by_four.mhed")), "--ids", "img_b,img_a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o),
        "image_id\thug\tbrawl\tpredicted\n\
         img_b\t0.289050\t0.622553\tbrawl\n\
         img_a\t0.939913\t0.002352\thug\n"
    );
    let o = run(&["predict", "--checkpoint", s(&ck), "--store", s(&fixture("three_by_four.mhed")), "--ids", "nope"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.mhed");
    let manifest = fixture("three_by_four.jsonl");
    let o = run(&["train", "--manifest", s(&manifest), "--store", s(&missing), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing.mhed"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train.loss]\nsmt = 1.5\n").unwrap();
    let o = run(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest),
        "--store", s(&fixture("three_by_four.mhed")), "--out", s(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("smt out of range"), "{}", stderr(&o));

    std::fs::write(&cfg, "[train]\ndropout = 0.5\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dropout"), "{}", stderr(&o));

    let o = run(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(run(&["gen-synth", "--classes", "3", "--dim", "8", "--per-class", "10", "--out", s(&data)]).status.success());
    let o = run(&[
        "train", "--manifest", s(&data.join("manifest.jsonl")), "--store", s(&data.join("store.mhed")),
        "--lr", "1e300", "--epochs", "5", "--out", s(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn full_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p);
    let o = run(&["gen-synth", "--classes", "4", "--dim", "8", "--per-class", "15", "--seed", "2", "--out", s(&d("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 60 images"));
    let (m, st) = (d("data/manifest.jsonl"), d("data/store.mhed"));

    std::fs::write(d("run.toml"), format!("manifest = {:?}\nstore = {:?}\n[train]\nepochs = 5\nbatch_size = 16\n", s(&m), s(&st))).unwrap();
    let o = run(&["train", "--config", s(&d("run.toml")), "--out", s(&d("run")), "--hidden", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "manifest.jsonl", "loss.tsv", "checkpoint.mhck", "metrics_all.json", "metrics.dat", "evaluations.json"] {
        assert!(d("run").join(f).exists(), "{f}");
    }
    let snapshot = std::fs::read_to_string(d("run/config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 5") && snapshot.contains("hidden_dims = [8]"), "{snapshot}");
    assert_eq!(std::fs::read_to_string(d("run/loss.tsv")).unwrap().lines().count(), 6);

    std::fs::write(d("sweep.toml"), "[base]\nepochs = 3\n[[axes]]\nname = \"rfw\"\nvalues = [0.5, 1]\n[[axes]]\nname = \"cw\"\nvalues = [1, 2]\n").unwrap();
    let o = run(&["sweep", "--spec", s(&d("sweep.toml")), "--manifest", s(&m), "--store", s(&st), "--out", s(&d("sweep")), "--rank-by", "F1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dat = std::fs::read_to_string(d("sweep/sweep.dat")).unwrap();
    let lines: Vec<&str> = dat.lines().collect();
    assert_eq!(lines[0], "rfw/cw Precision Recall F1 F1_SM MA");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0.5/1 "));
    assert_eq!(std::fs::read_to_string(d("sweep/ranking.tsv")).unwrap().lines().count(), 5);
    assert!(d("sweep/point_003/checkpoint.mhck").exists());

    let o = run(&["cluster", "--store", s(&st), "--manifest", s(&m), "--k", "4", "--out", s(&d("cl"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("purity"));
    let cont = std::fs::read_to_string(d("cl/contingency.tsv")).unwrap();
    assert_eq!(cont.lines().count(), 5);
    assert_eq!(std::fs::read_to_string(d("cl/assignments.tsv")).unwrap().lines().count(), 61);

    let o = run(&["predict", "--checkpoint", s(&d("run/checkpoint.mhck")), "--store", s(&st), "--out", s(&d("pred.tsv"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(d("pred.tsv")).unwrap().lines().count(), 61);
}

#[test]
fn help_shows_defaults() {
    let train = stdout(&run(&["train", "--help"]));
    for needle in ["[default: 200]", "[default: 256]", "[default: 0.001]", "[default: 0.5]", "[default: 2]"] {
        assert!(train.contains(needle), "missing {needle}:\n{train}");
    }
    let synth = stdout(&run(&["gen-synth", "--help"]));
    for needle in ["[default: 0.015]", "[default: 0.056]", "[default: 0.108]"] {
        assert!(synth.contains(needle), "missing {needle}:\n{synth}");
    }
    assert!(stdout(&run(&["cluster", "--help"])).contains("[default: 20]"));
}
