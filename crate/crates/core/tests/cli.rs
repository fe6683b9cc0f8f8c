use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use molmark::molecule::write_xyz;
use molmark::synth::synthetic_corpus;

fn molmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molmark")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = molmark(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup(dir: &Path, epochs: usize) -> String {
    let corpus: String = synthetic_corpus(8, 4, 7, 21).unwrap().iter().map(write_xyz).collect();
    fs::write(dir.join("corpus.xyz"), corpus).unwrap();
    let cfg = format!(
        r#"corpus = "corpus.xyz"
epochs = {epochs}
seed = 4
batch_size = 4

[codec]
capacity = 4
channels = 4
d_model = 4
growth = 2

[[sweeps]]
kind = "rotation"
axis = "X"
start = 0.0
stop = 180.0
step = 60.0

[[sweeps]]
kind = "reflection"
axis = "Y"
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = setup(d, 3);
    ok(&["train", "--config", &cfg, "--out", &p(d, "run")]);
    let ck = p(d, "run/checkpoint.mwm");
    assert_eq!(fs::read_to_string(d.join("run/metrics.jsonl")).unwrap().lines().count(), 3);
    assert!(d.join("run/config.toml").exists());

    ok(&["embed", "--checkpoint", &ck, "--corpus", &p(d, "corpus.xyz"), "--out", &p(d, "emb"), "--watermark", "1010"]);
    let manifest = fs::read_to_string(d.join("emb/manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "molecule_id,bits");
    assert_eq!(lines.len(), 9);
    assert!(lines[1..].iter().all(|l| l.ends_with(",1010")));

    let wm = p(d, "emb/watermarked.xyz");
    let man = p(d, "emb/manifest.csv");
    let out = ok(&["extract", "--checkpoint", &ck, "--corpus", &wm, "--manifest", &man, "--out", &p(d, "ext")]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("bit accuracy"));

    ok(&["attack", "--checkpoint", &ck, "--corpus", &wm, "--manifest", &man, "--out", &p(d, "atk"), "--config", &cfg]);
    let rows = fs::read_to_string(d.join("atk/attack_transforms.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4 + 1);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("atk/attack.json")).unwrap()).unwrap();
    assert_eq!(report["molecules"].as_array().unwrap().len(), 8);

    ok(&["evaluate", "--corpus", &p(d, "corpus.xyz"), "--watermarked", &wm, "--out", &p(d, "eval")]);
    let csv = fs::read_to_string(d.join("eval/evaluate.csv")).unwrap();
    assert!(csv.starts_with("metric,original,watermarked,delta"));
    assert_eq!(csv.lines().count(), 6);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/evaluate.json")).unwrap()).unwrap();
    assert!(json["weight_original"]["median"].as_f64().unwrap() > 0.0);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = setup(d, 2);
    for run in ["a", "b"] {
        ok(&["train", "--config", &cfg, "--out", &p(d, run)]);
        let ck = p(d, &format!("{run}/checkpoint.mwm"));
        ok(&["embed", "--checkpoint", &ck, "--corpus", &p(d, "corpus.xyz"), "--out", &p(d, &format!("{run}/emb")), "--seed", "9"]);
        let wm = p(d, &format!("{run}/emb/watermarked.xyz"));
        let man = p(d, &format!("{run}/emb/manifest.csv"));
        ok(&["attack", "--checkpoint", &ck, "--corpus", &wm, "--manifest", &man, "--out", &p(d, &format!("{run}/atk")), "--config", &cfg]);
    }
    for f in ["metrics.jsonl", "checkpoint.mwm", "emb/manifest.csv", "emb/watermarked.xyz", "atk/attack.json", "atk/attack_molecules.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = setup(d, 0);
    // unknown flag and missing corpus are usage errors
    assert_eq!(molmark(&["train", "--bogus"]).status.code(), Some(1));
    let out = molmark(&["train", "--config", &cfg, "--corpus", &p(d, "missing.xyz"), "--out", &p(d, "r")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    ok(&["train", "--config", &cfg, "--out", &p(d, "r")]);
    let ck = p(d, "r/checkpoint.mwm");
    let out = molmark(&["embed", "--checkpoint", &ck, "--corpus", &p(d, "corpus.xyz"), "--out", &p(d, "e"), "--seed", "1", "--capacity", "8"]);
    assert_eq!(out.status.code(), Some(1));
    let out = molmark(&["embed", "--checkpoint", &ck, "--corpus", &p(d, "corpus.xyz"), "--out", &p(d, "e"), "--watermark", "101"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("bad.xyz"), "2\nbad\nC 0 0 0\nXx 1 1 1\n").unwrap();
    let out = molmark(&["extract", "--checkpoint", &ck, "--corpus", &p(d, "bad.xyz"), "--out", &p(d, "x")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(molmark(&["--help"]).status.code(), Some(0));
}
