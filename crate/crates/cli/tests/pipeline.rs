use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightnmt")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.display().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn toy_data(dir: &Path) {
    ok(dir, &["synth-corpus", "--langs", "de,fr,en", "--train-lines", "120", "--test-lines", "6", "--output", "data", "--seed", "4"]);
    ok(dir, &["learn-bpe", "--corpus", "data", "--merges", "120", "--output", "bpe/bpe"]);
}

#[test]
fn full_toy_pipeline_produces_a_scoreboard() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_data(d);
    let data_before = snapshot(&d.join("data"));
    let short = ["--preset", "toy", "--max-tokens", "300", "--log-every", "10"];
    let mut args = vec!["train", "--corpus", "data", "--bpe", "bpe/bpe", "--max-updates", "40", "--output", "run"];
    args.extend(short);
    ok(d, &args);
    ok(d, &["surgery", "deep-shallow", "--input", "run/model.weights", "--output", "ds/model.weights", "--keep-dec", "1"]);
    let mut args = vec![
        "finetune", "--parent", "ds/model.weights", "--workflow", "multiparallel", "--corpus", "data", "--bpe", "bpe/bpe", "--max-updates", "20",
        "--output", "ft",
    ];
    args.extend(short);
    ok(d, &args);
    ok(d, &[
        "translate", "--model", "ft/model.weights", "--bpe", "bpe/bpe", "--corpus", "data", "--prefix", "test", "--output-dir", "hyp", "--beam", "5",
        "--batch", "64", "--max-len", "30",
    ]);
    ok(d, &["score", "bleu", "--hyp-dir", "hyp", "--corpus", "data", "--prefix", "test", "--output", "scores/bleu.tsv"]);
    let out = ok(d, &["scoreboard", "--scores", "scores/bleu.tsv", "--output", "scores/board.tsv"]);
    let board = String::from_utf8(out.stdout).unwrap();
    for row in ["to_en\t2\t", "from_en\t2\t", "non_en\t2\t"] {
        assert!(board.contains(row), "{board}");
    }

    // one manifest per run, with the effective configuration
    for m in [
        "data/manifest.json",
        "bpe/bpe.merges.manifest.json",
        "run/manifest.json",
        "ds/model.weights.manifest.json",
        "ft/manifest.json",
        "hyp/manifest.json",
        "scores/bleu.tsv.manifest.json",
        "scores/board.tsv.manifest.json",
    ] {
        let v = manifest(&d.join(m));
        assert!(v["command"].is_string() && v["wall_seconds"].is_number(), "{m}");
    }
    let ft = manifest(&d.join("ft/manifest.json"));
    assert_eq!(ft["command"], "finetune");
    assert_eq!(ft["config"]["train"]["max_updates"], 20);
    assert_eq!(ft["summary"]["updates"], 20);
    let ds = manifest(&d.join("ds/model.weights.manifest.json"));
    assert_eq!(ds["summary"]["enc_layers"], 4);
    assert_eq!(ds["summary"]["dec_layers"], 1);
    assert_eq!(snapshot(&d.join("data")), data_before, "inputs must not change");
}

#[test]
fn filtering_and_pivot_commands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_data(d);
    ok(d, &["count-freqs", "--bpe", "bpe/bpe", "--corpus", "data", "--output", "freqs"]);
    ok(d, &["build-vocab", "--bpe", "bpe/bpe", "--freqs", "freqs", "--min-freq", "2", "--output", "vocabs"]);
    for l in ["de", "fr", "en"] {
        assert!(d.join(format!("vocabs/{l}.langvocab")).exists());
    }
    ok(d, &["train", "--corpus", "data", "--bpe", "bpe/bpe", "--preset", "toy", "--max-updates", "10", "--output", "run"]);
    ok(d, &["filter-model", "--model", "run/model.weights", "--lang-vocab", "vocabs/fr.langvocab", "--output", "fr.weights"]);
    let m = manifest(&d.join("fr.weights.manifest.json"));
    assert!(m["summary"]["rows_after"]["fr"].as_u64().unwrap() < m["summary"]["rows_before"].as_u64().unwrap());
    ok(d, &["surgery", "multi-decoder", "--input", "run/model.weights", "--lang-vocab", "vocabs", "--output", "md.weights"]);
    ok(d, &["surgery", "hybrid", "--input", "run/model.weights", "--output", "hy.weights"]);
    ok(d, &[
        "translate", "--model", "md.weights", "--bpe", "bpe/bpe", "--input", "data/test.de-fr.de", "--pair", "de-fr", "--output", "md.out", "--max-len",
        "20",
    ]);
    ok(d, &[
        "translate", "--model", "run/model.weights", "--bpe", "bpe/bpe", "--lang-vocab", "vocabs", "--input", "data/test.de-fr.de", "--pair", "de-fr",
        "--output", "piv.out", "--pivot", "--max-len", "20",
    ]);
    assert_eq!(fs::read_to_string(d.join("piv.out")).unwrap().lines().count(), 6);
    assert_eq!(fs::read_to_string(d.join("piv.out.en")).unwrap().lines().count(), 6);
    ok(d, &["apply-bpe", "--bpe", "bpe/bpe", "--lang-vocab", "vocabs/de.langvocab", "--input", "data/test.de-en.de", "--output", "seg.txt"]);
    ok(d, &["make-multiparallel", "--corpus", "data", "--output", "mp"]);
    assert!(d.join("mp/train.de-fr.de").exists());
    ok(d, &["noise", "unk", "--input", "data/test.de-en.de", "--output", "unk.txt"]);
    ok(d, &[
        "translate", "--model", "run/model.weights", "--bpe", "bpe/bpe", "--input", "data/test.de-en.de", "--pair", "de-en", "--output", "clean.out",
        "--max-len", "20",
    ]);
    ok(d, &["translate", "--model", "run/model.weights", "--bpe", "bpe/bpe", "--input", "unk.txt", "--pair", "de-en", "--output", "unk.out", "--max-len", "20"]);
    ok(d, &["score", "consistency", "--hyp", "clean.out", "--noisy-hyp", "unk.out", "--direction", "de-en", "--output", "cons.tsv"]);
    ok(d, &["score", "chrf", "--hyp", "clean.out", "--ref", "data/test.de-en.en", "--direction", "de-en", "--output", "chrf.tsv"]);
    ok(d, &[
        "benchmark", "wps", "--model", "run/model.weights", "--bpe", "bpe/bpe", "--input", "data/test.de-en.de", "--tgt", "en", "--max-len", "20",
        "--repeats", "2", "--output", "wps.json", "--threads", "4",
    ]);
    let m = manifest(&d.join("wps.json.manifest.json"));
    assert_eq!(m["threads"], 1);
    ok(d, &["benchmark", "profile", "--model", "run/model.weights", "--bpe", "bpe/bpe", "--input", "data/test.de-en.de", "--tgt", "en", "--max-len", "20", "--output", "prof.json"]);
    let prof: Value = serde_json::from_str(&fs::read_to_string(d.join("prof.json")).unwrap()).unwrap();
    assert!(prof["decoder"].as_f64().unwrap() > 0.0);
}

#[test]
fn char_noise_is_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("in.txt"), "ein kleiner test\nzweite zeile hier\n\nx\n").unwrap();
    let go = |out: &str, seed: &str| ok(d, &["noise", "char", "--ops", "3", "--seed", seed, "--input", "in.txt", "--output", out]);
    go("a.txt", "7");
    go("b.txt", "7");
    go("c.txt", "8");
    assert_eq!(fs::read(d.join("a.txt")).unwrap(), fs::read(d.join("b.txt")).unwrap());
    assert_eq!(fs::read(d.join("a.txt.ops.tsv")).unwrap(), fs::read(d.join("b.txt.ops.tsv")).unwrap());
    assert_ne!(fs::read(d.join("a.txt")).unwrap(), fs::read(d.join("c.txt")).unwrap());
    assert_eq!(fs::read_to_string(d.join("in.txt")).unwrap(), "ein kleiner test\nzweite zeile hier\n\nx\n");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    toy_data(d);
    fs::write(d.join("c.toml"), "[train]\npeak_lr = 0.002\nmax_updates = 9\n\n[model]\nenc_layers = 1\ndec_layers = 1\n").unwrap();
    ok(d, &["train", "--config", "c.toml", "--corpus", "data", "--bpe", "bpe/bpe", "--preset", "toy", "--max-updates", "3", "--output", "run"]);
    let m = manifest(&d.join("run/manifest.json"));
    assert_eq!(m["config"]["train"]["max_updates"], 3);
    assert_eq!(m["config"]["train"]["peak_lr"], 0.002);
    assert_eq!(m["config"]["train"]["warmup_updates"], 100);
    assert_eq!(m["config"]["model"]["enc_layers"], 1);
    assert_eq!(m["summary"]["updates"], 3);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(d, &["noise", "char", "--bogus-flag", "--input", "a", "--output", "b"]).status.code(), Some(1));
    assert_eq!(run(d, &["noise", "char", "--input", "missing.txt", "--output", "b"]).status.code(), Some(2));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
    toy_data(d);
    let out = run(d, &[
        "train", "--corpus", "data", "--bpe", "bpe/bpe", "--preset", "toy", "--max-updates", "30", "--peak-lr", "1e30", "--warmup", "1", "--output",
        "boom",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
