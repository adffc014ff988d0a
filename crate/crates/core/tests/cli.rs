use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rationale_assoc::checkpoint::save_model;
use rationale_assoc::cli::{read_manifest, sha256_file};
use rationale_assoc::format::{task_vocab, Mode, TaskFormat};
use rationale_assoc::instance::load_dataset;
use rationale_assoc::model::{ModelConfig, ModelParams, TrainedModel};

fn rassoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rassoc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = rassoc(args);
    assert!(
        out.status.success(),
        "rassoc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (gen, ckpt) = (root.join("gen"), root.join("ckpt"));
    ok(&["gen", "--out-dir", s(&gen), "--n", "120", "--seed", "3"]);
    let dataset = gen.join("dataset.jsonl");
    assert_eq!(load_dataset(&dataset).unwrap().len(), 120);

    ok(&["train", "--dataset", s(&dataset), "--out-dir", s(&ckpt), "--epochs", "25", "--patience", "25", "--lr", "1e-2", "--seed", "3"]);
    for name in ["i_or.ckpt", "i_r.ckpt", "r_o.ckpt", "ir_o.ckpt", "train_curves.csv", "manifest.json"] {
        assert!(ckpt.join(name).exists(), "{name} missing");
    }
    let dev = ckpt.join("dev.jsonl");

    let measure = |tag: &str| {
        let (sw, at, tb) = (root.join(format!("sweep{tag}")), root.join(format!("attr{tag}")), root.join(format!("tables{tag}")));
        ok(&[
            "sweep", "--dataset", s(&dev), "--checkpoint-dir", s(&ckpt), "--out-dir", s(&sw),
            "--sigma2-grid", "0,5,50",
        ]);
        ok(&["attr", "--dataset", s(&dev), "--checkpoint-dir", s(&ckpt), "--out-dir", s(&at)]);
        ok(&["tables", "--dataset", s(&dev), "--checkpoint-dir", s(&ckpt), "--out-dir", s(&tb)]);
        [sw, at, tb]
    };
    let first = measure("1");
    let second = measure("2");
    for (a, b) in first.iter().zip(&second) {
        let ma = read_manifest(&a.join("manifest.json")).unwrap();
        let mb = read_manifest(&b.join("manifest.json")).unwrap();
        assert!(!ma.artifacts.is_empty());
        assert_eq!(ma.artifacts, mb.artifacts, "{} differs between runs", a.display());
        for (name, digest) in &ma.artifacts {
            assert_eq!(&sha256_file(&a.join(name)).unwrap(), digest);
        }
    }

    let sweep_csv = fs::read_to_string(first[0].join("sweep.csv")).unwrap();
    let mut lines = sweep_csv.lines();
    assert_eq!(lines.next(), Some("sigma2,accuracy,flip_rate,proxy_accuracy,proxy_accuracy_rstar,case"));
    assert!(lines.next().unwrap().starts_with("0,"));
    let tables = fs::read_to_string(first[2].join("sufficiency_gap.csv")).unwrap();
    assert!(tables.starts_with("config,accuracy,delta,evaluated,parse_failures"));

    // rerun from the manifest rewrites identical artifacts
    let manifest = first[1].join("manifest.json");
    let before = read_manifest(&manifest).unwrap();
    ok(&["rerun", s(&manifest)]);
    assert_eq!(read_manifest(&manifest).unwrap().artifacts, before.artifacts);
}

#[test]
fn untrained_checkpoint_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(&["gen", "--out-dir", s(root), "--n", "30"]);
    let dataset = root.join("dataset.jsonl");
    let data = load_dataset(&dataset).unwrap();
    let vocab = task_vocab(&data);
    let params = ModelParams::init(&ModelConfig::new(vocab.len()), 1);
    for mode in [Mode::InputToLabelRationale, Mode::RationaleToLabel] {
        let model = TrainedModel::untrained(vocab.clone(), params.clone(), mode, TaskFormat::Qa);
        save_model(&root.join(rationale_assoc::cli::checkpoint_name(mode)), &model).unwrap();
    }
    let out = rassoc(&["sweep", "--dataset", s(&dataset), "--checkpoint-dir", s(root), "--out-dir", s(&root.join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(rassoc(&["gen", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(rassoc(&["frobnicate"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = rassoc(&["gen", "--out-dir", s(tmp.path()), "--sufficiency", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(rassoc(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rassoc(&[
        "attr", "--dataset", s(&tmp.path().join("absent.jsonl")), "--checkpoint-dir", s(tmp.path()),
        "--out-dir", s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
