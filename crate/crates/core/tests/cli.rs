//! The `stagevlm` binary, driven as a subprocess.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stagevlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagevlm"))
        .current_dir(dir)
        .env_remove("STAGEVLM_OUT_DIR")
        .arg("--quiet")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, n: &str) {
    ok(&stagevlm(dir, &["synth", "--n", n, "--seed", "3", "--out", "corpus"]));
}

#[test]
fn train_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "6");
    for out in ["a", "b"] {
        ok(&stagevlm(d, &["train", "--stage", "0", "--data", "corpus/data.jsonl", "--out", out, "--epochs", "4", "--seed", "2"]));
    }
    let curve = fs::read_to_string(d.join("a/curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "step,lr_vision,lr_projector,lr_language,loss");
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(curve, fs::read_to_string(d.join("b/curve.csv")).unwrap());
    assert_eq!(fs::read(d.join("a/model.ckpt")).unwrap(), fs::read(d.join("b/model.ckpt")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], 0);
    assert_eq!(manifest["steps"], 4);
    assert!(manifest["final_loss"].is_f64());

    // a second run into a populated directory is refused
    let again = stagevlm(d, &["train", "--stage", "0", "--data", "corpus/data.jsonl", "--out", "a", "--epochs", "1"]);
    assert_eq!(code(&again), 1);
}

#[test]
fn resume_with_other_width_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "4");
    ok(&stagevlm(d, &["train", "--stage", "1", "--data", "corpus/data.jsonl", "--out", "s1", "--epochs", "1"]));
    let mut cfg = String::from("[model]\n");
    cfg += "[model.vision]\nimage_size = 32\npatch_size = 8\nhidden = 64\nlayers = 2\nheads = 4\nmlp_ratio = 2.0\n";
    cfg += "[model.decoder]\nhidden = 32\nintermediate = 256\nlayers = 2\nheads = 4\nkv_heads = 2\nvocab = 512\nmax_positions = 128\n";
    fs::write(d.join("narrow.toml"), cfg).unwrap();
    let out = stagevlm(
        d,
        &["train", "--stage", "2", "--data", "corpus/data.jsonl", "--config", "narrow.toml", "--resume", "s1/model.ckpt", "--out", "s2"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("decoder.hidden: 32 vs 64"), "{}", stderr(&out));
    assert!(!d.join("s2").exists());
}

#[test]
fn default_output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_stagevlm"))
        .current_dir(d)
        .env("STAGEVLM_OUT_DIR", "elsewhere")
        .args(["mask-dump", "--layout", "image:1,text:1", "--kind", "causal"])
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(fs::read_to_string(d.join("elsewhere/mask.csv")).unwrap(), "0,1\n1,0\n1,1\n");
}

#[test]
fn generate_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "4");
    ok(&stagevlm(d, &["train", "--stage", "1", "--data", "corpus/data.jsonl", "--out", "m", "--epochs", "1"]));
    let zero = stagevlm(d, &["generate", "--ckpt", "m/model.ckpt", "--image", "corpus/images/00000.ppm", "--max-new", "0"]);
    assert_eq!(code(&zero), 2);
    let args = ["generate", "--ckpt", "m/model.ckpt", "--image", "corpus/images/00000.ppm", "--max-new", "5", "--topk", "4", "--seed", "7"];
    let a = ok(&stagevlm(d, &args));
    assert_eq!(a, ok(&stagevlm(d, &args)));
    assert!(a.split_whitespace().count() <= 5);
    let warned = stagevlm(d, &["generate", "--ckpt", "m/model.ckpt", "--image", "corpus/images/00000.ppm", "--prompt", "zebra colour", "--max-new", "2"]);
    ok(&warned);
    assert!(stderr(&warned).contains("zebra colour"));
    let missing = stagevlm(d, &["generate", "--ckpt", "m/model.ckpt", "--image", "nope.ppm"]);
    assert_eq!(code(&missing), 1);
    ok(&stagevlm(d, &["generate", "--ckpt", "m/model.ckpt", "--data", "corpus/data.jsonl", "--out", "pred.jsonl", "--max-new", "3"]));
    assert_eq!(fs::read_to_string(d.join("pred.jsonl")).unwrap().lines().count(), 4);
}

fn write_refs_as_predictions(d: &Path) {
    let refs = fs::read_to_string(d.join("corpus/refs.jsonl")).unwrap();
    let mut pred = String::new();
    for line in refs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let p = serde_json::json!({ "image_id": v["image_id"], "caption": v["captions"][0] });
        pred += &format!("{p}\n");
    }
    fs::write(d.join("pred.jsonl"), pred).unwrap();
}

#[test]
fn eval_identity_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "5");
    write_refs_as_predictions(d);
    ok(&stagevlm(d, &["eval", "--pred", "pred.jsonl", "--refs", "corpus/refs.jsonl", "--metrics", "bleu,rouge", "--out", "e.csv"]));
    let csv = fs::read_to_string(d.join("e.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,score"));
    for line in lines {
        let (_, score) = line.split_once(',').unwrap();
        assert_eq!(score.parse::<f64>().unwrap(), 1.0, "{line}");
    }

    let bad = stagevlm(d, &["eval", "--pred", "pred.jsonl", "--refs", "corpus/refs.jsonl", "--metrics", "bleu,meteor"]);
    assert_eq!(code(&bad), 2);
    for name in ["meteor", "bleu4", "rouge_l", "cider"] {
        assert!(stderr(&bad).contains(name), "{}", stderr(&bad));
    }

    let first = |f: &str| fs::read_to_string(d.join(f)).unwrap().lines().next().unwrap().to_string() + "\n";
    fs::write(d.join("one_pred.jsonl"), first("pred.jsonl")).unwrap();
    fs::write(d.join("one_ref.jsonl"), first("corpus/refs.jsonl")).unwrap();
    let single = stagevlm(d, &["eval", "--pred", "one_pred.jsonl", "--refs", "one_ref.jsonl", "--metrics", "cider"]);
    assert_eq!(code(&single), 1);
    assert!(stderr(&single).contains("at least 2 images"), "{}", stderr(&single));
}

#[test]
fn mask_dump_matches_builder() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&stagevlm(d, &["mask-dump", "--layout", "image:2,text:2", "--kind", "stage1", "--out", "m.csv"]));
    assert_eq!(fs::read_to_string(d.join("m.csv")).unwrap(), "0,1,2,3\n1,1,0,0\n1,1,0,0\n1,1,1,0\n1,1,1,1\n");
    ok(&stagevlm(d, &["mask-dump", "--layout", "image:2,text:2", "--kind", "full", "--out", "f.csv"]));
    let full = fs::read_to_string(d.join("f.csv")).unwrap();
    assert!(full.lines().skip(1).all(|l| l == "1,1,1,1"));
    let inter = stagevlm(d, &["mask-dump", "--layout", "image:1,text:1,image:1,text:1", "--kind", "stage1"]);
    assert_eq!(code(&inter), 1);
    assert!(stderr(&inter).contains("image segments"));
    assert_eq!(code(&stagevlm(d, &["mask-dump", "--layout", "image:2", "--kind", "sideways"])), 2);
}

#[test]
fn compare_loss_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "4");
    ok(&stagevlm(d, &["train", "--stage", "1", "--data", "corpus/data.jsonl", "--out", "m", "--epochs", "1"]));
    ok(&stagevlm(
        d,
        &["compare-loss", "--ckpt", "m/model.ckpt", "--corpus-a", "corpus/data.jsonl", "--corpus-b", "corpus/data.jsonl", "--out", "c.csv"],
    ));
    let csv = fs::read_to_string(d.join("c.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().rsplit(',').collect();
    assert_eq!(row[0].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[1], row[2]);

    fs::write(d.join("empty.jsonl"), "").unwrap();
    let empty = stagevlm(d, &["compare-loss", "--ckpt", "m/model.ckpt", "--corpus-a", "empty.jsonl"]);
    assert_eq!(code(&empty), 1);
}
