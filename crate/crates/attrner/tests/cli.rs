//! End-to-end CLI checks: train, evaluate, tag, classify, derive-labels,
//! gradcheck and oracle, driven through the built binary.

use std::path::Path;
use std::process::Command;

use attrner::synth;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrner"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.tsv");
    let dev = dir.path().join("dev.tsv");
    std::fs::write(&train, synth::ambiguous_corpus(40, 60, 0.5)).unwrap();
    std::fs::write(&dev, synth::ambiguous_corpus(41, 20, 0.5)).unwrap();
    let config = dir.path().join("train.cfg");
    std::fs::write(
        &config,
        "base_lr = 3e-3\nepochs = 3\npatience_epochs = 3\nbatch_size = 16\nseeds = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");

    // train (embedding-site label injection, CRF head)
    let stdout = run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--train",
        train.to_str().unwrap(),
        "--dev",
        dev.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--mode",
        "embedding",
        "--channels",
        "label",
    ]));
    assert!(stdout.contains("cell mode=embedding"), "{stdout}");
    assert!(stdout.contains("aggregate test_f1"), "{stdout}");
    for f in ["results.txt", "vocab.tsv", "model.ckpt", "curve.tsv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    // evaluate on dev with gold-derived labels
    let stdout = run_ok(bin().args([
        "evaluate",
        "--model",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--vocab",
        out_dir.join("vocab.tsv").to_str().unwrap(),
        "--data",
        dev.to_str().unwrap(),
        "--mode",
        "embedding",
        "--channels",
        "label",
    ]));
    assert!(stdout.starts_with("span precision="), "{stdout}");
    assert!(stdout.contains("token precision="), "{stdout}");

    // derive-labels annotates and stays parseable
    let labeled = dir.path().join("labeled.tsv");
    run_ok(bin().args([
        "derive-labels",
        "--data",
        dev.to_str().unwrap(),
        "--out",
        labeled.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&labeled).unwrap();
    assert!(text.contains("#label: "), "derived labels missing");

    // tag raw input (gold column `_`), reusing derived labels for injection
    let raw = dir.path().join("raw.tsv");
    let raw_text: String = std::fs::read_to_string(&labeled)
        .unwrap()
        .lines()
        .map(|l| {
            if l.is_empty() || l.starts_with('#') {
                l.to_string()
            } else {
                let mut cols: Vec<&str> = l.split('\t').collect();
                cols[2] = "_";
                cols.join("\t")
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&raw, raw_text + "\n").unwrap();
    let tagged = dir.path().join("tagged.tsv");
    run_ok(bin().args([
        "tag",
        "--model",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--vocab",
        out_dir.join("vocab.tsv").to_str().unwrap(),
        "--data",
        raw.to_str().unwrap(),
        "--out",
        tagged.to_str().unwrap(),
        "--mode",
        "embedding",
        "--channels",
        "label",
    ]));
    let tagged_text = std::fs::read_to_string(&tagged).unwrap();
    assert!(!tagged_text.contains("\t_\n"), "tagger left untagged rows");
    assert!(attrner::corpus::parse_column_file(&tagged_text, "t").is_ok());

    // gradcheck passes and prints a PASS line
    let stdout = run_ok(bin().args(["gradcheck", "--mode", "attention", "--channels", "label,pos"]));
    assert!(stdout.contains("PASS"), "{stdout}");

    // oracle agrees on a quick batch
    let stdout = run_ok(bin().args(["oracle", "--instances", "50"]));
    assert!(stdout.contains("viterbi_mismatches=0"), "{stdout}");
}

#[test]
fn pipeline_run_trains_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.tsv");
    std::fs::write(&train, synth::ambiguous_corpus(50, 40, 0.5)).unwrap();
    let config = dir.path().join("train.cfg");
    std::fs::write(
        &config,
        "base_lr = 3e-3\nepochs = 1\npatience_epochs = 1\nbatch_size = 16\nseeds = 1\nmax_len = 64\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--train",
        train.to_str().unwrap(),
        "--dev",
        train.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--mode",
        "classifier",
        "--channels",
        "label",
        "--run-kind",
        "pipeline",
    ]));
    assert!(out_dir.join("classifier.ckpt").exists(), "pipeline run must save the classifier");

    // classify prints one label per sentence
    let stdout = run_ok(bin().args([
        "classify",
        "--model",
        out_dir.join("classifier.ckpt").to_str().unwrap(),
        "--vocab",
        out_dir.join("vocab.tsv").to_str().unwrap(),
        "--data",
        train.to_str().unwrap(),
    ]));
    assert_eq!(stdout.lines().count(), 40, "{stdout}");
    assert!(stdout.lines().all(|l| l.contains('\t')));
}

#[test]
fn unknown_config_key_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "learning_rate = 0.1\n").unwrap();
    let data = dir.path().join("d.tsv");
    std::fs::write(&data, synth::ambiguous_corpus(60, 5, 0.5)).unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--train",
            data.to_str().unwrap(),
            "--dev",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn checkpoint_survives_cli_round_trip() {
    // a model checkpoint written by train reloads with identical bytes
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tsv");
    std::fs::write(&data, synth::ambiguous_corpus(70, 20, 0.5)).unwrap();
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, "epochs = 1\npatience_epochs = 1\nseeds = 1\n").unwrap();
    let out_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--train",
        data.to_str().unwrap(),
        "--dev",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let path = out_dir.join("model.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let (cfg, params) = attrner::checkpoint::load_checkpoint(Path::new(&path)).unwrap();
    assert_eq!(attrner::checkpoint::serialize_checkpoint(&cfg, &params), bytes);
}
