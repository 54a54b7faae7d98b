//! End-to-end checks of the command-line workflow.

use std::path::Path;
use std::process::{Command, Output};

fn renmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_renmt"))
        .args(args)
        .output()
        .expect("failed to launch renmt")
}

fn ok(args: &[&str]) -> String {
    let out = renmt(args);
    assert!(
        out.status.success(),
        "renmt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn usage_error_exits_2() {
    let out = renmt(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = renmt(&[
        "train",
        "--train",
        dir.path().join("nope").to_str().unwrap(),
        "--dev",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("model").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[data]:"), "stderr: {err}");
    assert!(err.contains("nope.src"), "error should name the file: {err}");
}

#[test]
fn gen_data_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "gen-data", "--task", "ambiguous-lexicon", "--n", "50", "--min-len", "3",
            "--max-len", "9", "--vocab-size", "30", "--seed", "7", "--out",
            out.to_str().unwrap(),
        ]);
    }
    let read = |p: &Path, ext: &str| std::fs::read(p.with_extension(ext)).unwrap();
    assert_eq!(read(&a, "src"), read(&b, "src"));
    assert_eq!(read(&a, "tgt"), read(&b, "tgt"));
    assert!(!read(&a, "src").is_empty());
    assert!(a.with_extension("manifest").exists());
}

#[test]
fn help_lists_flags_with_paper_defaults() {
    let out = ok(&["train", "--help"]);
    for needle in [
        "--learning-rate",
        "0.0005",
        "--clip-norm",
        "[default: 1.0]",
        "--dropout",
        "[default: 0.3]",
        "--epochs",
        "[default: 10]",
        "--max-len",
        "[default: 50]",
    ] {
        assert!(out.contains(needle), "train --help missing {needle:?}:\n{out}");
    }
    let out = ok(&["translate", "--help"]);
    assert!(out.contains("--beam") && out.contains("[default: 10]"));
}

/// Full workflow: gen-data, train, translate, evaluate, bench, saliency.
#[test]
fn full_workflow_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("data/train");
    let model = dir.path().join("model");
    ok(&[
        "gen-data", "--task", "copy", "--n", "40", "--min-len", "2", "--max-len", "6",
        "--vocab-size", "10", "--seed", "5", "--out", corpus.to_str().unwrap(),
    ]);
    ok(&[
        "train", "--train", corpus.to_str().unwrap(), "--dev", corpus.to_str().unwrap(),
        "--out", model.to_str().unwrap(), "--variant", "shallow", "--emb-dim", "8",
        "--rnn-dim", "8", "--attn-dim", "8", "--epochs", "2", "--batch-size", "8",
        "--learning-rate", "0.01", "--seed", "3",
    ]);
    for file in ["model.ckpt", "model.last.ckpt", "optimizer.last.ckpt", "metrics.csv",
                 "src.vocab", "tgt.vocab", "model.cfg"] {
        assert!(model.join(file).exists(), "missing {file}");
    }

    // resume appends to the metric series
    let before = std::fs::read_to_string(model.join("metrics.csv")).unwrap();
    ok(&[
        "train", "--train", corpus.to_str().unwrap(), "--dev", corpus.to_str().unwrap(),
        "--out", model.to_str().unwrap(), "--variant", "shallow", "--emb-dim", "8",
        "--rnn-dim", "8", "--attn-dim", "8", "--epochs", "1", "--batch-size", "8",
        "--learning-rate", "0.01", "--seed", "3", "--resume",
    ]);
    let after = std::fs::read_to_string(model.join("metrics.csv")).unwrap();
    assert!(after.starts_with(before.trim_end()), "resume must extend the series");
    assert!(after.lines().count() > before.lines().count());
    let last = after.lines().last().unwrap();
    assert!(last.starts_with("2,"), "resumed epoch numbering continues: {last}");

    // translation is deterministic
    let hyp1 = dir.path().join("hyp1.txt");
    let hyp2 = dir.path().join("hyp2.txt");
    for hyp in [&hyp1, &hyp2] {
        ok(&[
            "translate", "--model", model.to_str().unwrap(), "--input",
            corpus.with_extension("src").to_str().unwrap(), "--output",
            hyp.to_str().unwrap(), "--beam", "2", "--max-len", "10",
        ]);
    }
    assert_eq!(
        std::fs::read(&hyp1).unwrap(),
        std::fs::read(&hyp2).unwrap(),
        "fixed model and flags must translate identically"
    );

    let report = ok(&[
        "evaluate", "--model", model.to_str().unwrap(), "--test", corpus.to_str().unwrap(),
        "--buckets", "4", "--max-len", "10",
    ]);
    assert!(report.starts_with("section,label,sentences,bleu,accuracy,refine_rate"));
    assert!(report.contains("corpus,all,40,"));

    let bench = ok(&[
        "bench", "--model", model.to_str().unwrap(), "--test", corpus.to_str().unwrap(),
        "--repeats", "1", "--max-len", "10",
    ]);
    assert!(bench.contains("refine_rate=100.0"), "shallow refines every step: {bench}");

    let sal = dir.path().join("sal");
    ok(&[
        "saliency", "--model", model.to_str().unwrap(), "--test", corpus.to_str().unwrap(),
        "--index", "0", "--out", sal.to_str().unwrap(),
    ]);
    let pgm = std::fs::read_to_string(sal.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with("P2\n"));
    assert!(sal.with_extension("csv").exists());
}

/// A model that memorized its single training pair decodes it exactly, so
/// evaluate reports BLEU 100 and the baseline benchmark reports P = 0.
#[test]
fn memorized_model_evaluates_to_bleu_100() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&[
        "gen-data", "--task", "copy", "--n", "1", "--min-len", "5", "--max-len", "5",
        "--vocab-size", "6", "--seed", "2", "--out", corpus.to_str().unwrap(),
    ]);
    let model = dir.path().join("m");
    ok(&[
        "train", "--train", corpus.to_str().unwrap(), "--dev", corpus.to_str().unwrap(),
        "--out", model.to_str().unwrap(), "--variant", "baseline", "--emb-dim", "8",
        "--rnn-dim", "8", "--attn-dim", "8", "--epochs", "150", "--patience", "150",
        "--batch-size", "1", "--learning-rate", "0.02", "--dropout", "0.0", "--seed", "4",
    ]);
    let report = ok(&[
        "evaluate", "--model", model.to_str().unwrap(), "--test", corpus.to_str().unwrap(),
        "--max-len", "10",
    ]);
    let corpus_row = report.lines().nth(1).unwrap();
    assert!(corpus_row.starts_with("corpus,all,1,100.0000,1.000000"), "{corpus_row}");

    let bench = ok(&[
        "bench", "--model", model.to_str().unwrap(), "--test", corpus.to_str().unwrap(),
        "--repeats", "1", "--max-len", "10",
    ]);
    assert!(bench.contains("refine_rate=0.0"), "baseline P must be 0: {bench}");
}

#[test]
fn config_file_merges_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&[
        "gen-data", "--task", "copy", "--n", "12", "--min-len", "2", "--max-len", "4",
        "--vocab-size", "8", "--seed", "9", "--out", corpus.to_str().unwrap(),
    ]);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning-rate = 0.02\nrnn-dim = 8\n").unwrap();
    let model = dir.path().join("m");
    ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--train", corpus.to_str().unwrap(),
        "--dev", corpus.to_str().unwrap(), "--out", model.to_str().unwrap(),
        "--emb-dim", "8", "--attn-dim", "8", "--batch-size", "6",
    ]);
    let metrics = std::fs::read_to_string(model.join("metrics.csv")).unwrap();
    // one epoch from the file: header + train + dev rows
    assert_eq!(metrics.lines().count(), 3);

    // explicit flag beats the file
    let model2 = dir.path().join("m2");
    ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--train", corpus.to_str().unwrap(),
        "--dev", corpus.to_str().unwrap(), "--out", model2.to_str().unwrap(),
        "--emb-dim", "8", "--attn-dim", "8", "--batch-size", "6", "--epochs", "2",
    ]);
    let metrics2 = std::fs::read_to_string(model2.join("metrics.csv")).unwrap();
    assert_eq!(metrics2.lines().count(), 5);

    // unknown keys are rejected
    std::fs::write(&cfg, "not-a-flag = 1\n").unwrap();
    let out = renmt(&[
        "train", "--config", cfg.to_str().unwrap(), "--train", corpus.to_str().unwrap(),
        "--dev", corpus.to_str().unwrap(), "--out", dir.path().join("m3").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}
