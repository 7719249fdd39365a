//! Corpus, subword and noise commands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lightnmt::corpus::{build_multiparallel, noise_char, noise_unk, NoiseKind, NoiseOp};
use lightnmt::subword::{build_lang_vocab, count_frequencies, BpeModel, FreqTable};
use lightnmt::training::toy::synth_corpus;
use lightnmt::Lang;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{data, usage, CliResult};
use crate::files::{
    bpe_paths, ensure_dir, freqs_from_tsv, freqs_path, freqs_to_tsv, lang_vocab_path, load_bpe, load_corpus, read_lines,
    write_lines, write_text,
};
use crate::manifest::Outcome;
use crate::Ctx;

/// A corpus directory of `<prefix>.<src>-<tgt>.<lang>` files.
#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub prefix: String,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Comma-separated languages; `en` is the pivot of the training data.
    #[arg(long, value_delimiter = ',', default_value = "de,fr,en")]
    pub langs: Vec<String>,
    #[arg(long, default_value_t = 400)]
    pub train_lines: usize,
    #[arg(long, default_value_t = 20)]
    pub test_lines: usize,
    /// Share of the English pool each language's training data covers.
    #[arg(long, default_value_t = 0.7)]
    pub coverage: f64,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn synth(a: &SynthArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let langs: Vec<Lang> = a.langs.iter().map(Lang::new).collect();
    if !langs.iter().any(Lang::is_english) || langs.len() < 2 {
        return Err(usage("--langs needs `en` and at least one other language"));
    }
    if !(0.0..=1.0).contains(&a.coverage) {
        return Err(usage("--coverage must be in [0, 1]"));
    }
    let c = synth_corpus(&langs, a.train_lines, a.test_lines, a.coverage, ctx.seed);
    c.train.save_dir(&a.output, "train")?;
    c.test.save_dir(&a.output, "test")?;
    let sizes: BTreeMap<String, usize> = c.train.sizes().into_iter().map(|(d, n)| (d.to_string(), n)).collect();
    Ok(Outcome::new(json!({"langs": a.langs, "train_lines": a.train_lines, "test_lines": a.test_lines, "coverage": a.coverage}))
        .output_dir(&a.output)
        .summary(json!({ "train_sizes": sizes, "test_directions": c.test.directions().count() })))
}

#[derive(Args, Debug)]
pub struct LearnBpeArgs {
    /// Plain text files to learn from.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 1000)]
    pub merges: usize,
    /// Languages that get a code token (default: the corpus languages).
    #[arg(long, value_delimiter = ',')]
    pub langs: Option<Vec<String>>,
    /// Output prefix: writes `<output>.merges` and `<output>.vocab`.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn learn_bpe(a: &LearnBpeArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let mut lines: Vec<String> = Vec::new();
    for f in &a.input {
        lines.extend(read_lines(f)?);
    }
    let mut langs: BTreeSet<Lang> = BTreeSet::new();
    if let Some(dir) = &a.corpus.corpus {
        let c = load_corpus(dir, &a.corpus.prefix)?;
        for p in c.pairs() {
            lines.push(p.src);
            lines.push(p.tgt);
        }
        langs.extend(c.languages());
    }
    if let Some(l) = &a.langs {
        langs = l.iter().map(Lang::new).collect();
    }
    if lines.is_empty() {
        return Err(usage("give --input files or --corpus"));
    }
    let langs: Vec<Lang> = langs.into_iter().collect();
    let bpe = BpeModel::learn(lines.iter().map(String::as_str), a.merges, &langs);
    let (m, v) = bpe_paths(&a.output);
    crate::files::ensure_parent(&m)?;
    bpe.save(&m, &v)?;
    let mut out = Outcome::new(json!({"merges": a.merges, "langs": langs}))
        .inputs(&a.input)
        .output(&m)
        .output(&v)
        .summary(json!({"learned_merges": bpe.merges().len(), "vocab_size": bpe.vocab().len(), "lines": lines.len()}));
    if let Some(dir) = &a.corpus.corpus {
        out = out.input(dir);
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct ApplyBpeArgs {
    /// BPE prefix (`<bpe>.merges`, `<bpe>.vocab`).
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Segment so every piece stays inside this language vocabulary.
    #[arg(long)]
    pub lang_vocab: Option<PathBuf>,
}

pub fn apply_bpe(a: &ApplyBpeArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let bpe = load_bpe(&a.bpe)?;
    let constraint = match &a.lang_vocab {
        Some(p) => Some(lightnmt::subword::LangVocab::load(p)?),
        None => None,
    };
    let lines = read_lines(&a.input)?;
    let out: Vec<String> = lines
        .iter()
        .map(|l| match &constraint {
            Some(v) => bpe.tokenize_constrained(l, v).join(" "),
            None => bpe.tokenize(l).join(" "),
        })
        .collect();
    write_lines(&a.output, &out)?;
    let mut o = Outcome::new(json!({"constrained": a.lang_vocab.is_some()}))
        .input(&a.input)
        .inputs(bpe_paths_vec(&a.bpe))
        .output(&a.output)
        .summary(json!({"lines": out.len()}));
    if let Some(p) = &a.lang_vocab {
        o = o.input(p);
    }
    Ok(o)
}

fn bpe_paths_vec(prefix: &std::path::Path) -> Vec<PathBuf> {
    let (m, v) = bpe_paths(prefix);
    vec![m, v]
}

#[derive(Args, Debug)]
pub struct CountFreqsArgs {
    #[arg(long)]
    pub bpe: PathBuf,
    /// Plain text files in one language (needs --lang).
    #[arg(long)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub lang: Option<String>,
    /// Count every language of a corpus, each over all its sides.
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output directory; writes `<lang>.freqs.tsv`.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn count_freqs(a: &CountFreqsArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let bpe = load_bpe(&a.bpe)?;
    let mut by_lang: BTreeMap<Lang, Vec<String>> = BTreeMap::new();
    if !a.input.is_empty() {
        let lang = a.lang.as_ref().ok_or_else(|| usage("--input needs --lang"))?;
        let e = by_lang.entry(Lang::new(lang)).or_default();
        for f in &a.input {
            e.extend(read_lines(f)?);
        }
    }
    if let Some(dir) = &a.corpus.corpus {
        let c = load_corpus(dir, &a.corpus.prefix)?;
        for d in c.directions().cloned().collect::<Vec<_>>() {
            for (s, t) in c.lines(&d).unwrap_or_default() {
                by_lang.entry(d.src.clone()).or_default().push(s.to_string());
                by_lang.entry(d.tgt.clone()).or_default().push(t.to_string());
            }
        }
    }
    if by_lang.is_empty() {
        return Err(usage("give --input with --lang, or --corpus"));
    }
    ensure_dir(&a.output)?;
    let mut outcome = Outcome::new(json!({"prefix": a.corpus.prefix})).inputs(&a.input).output_dir(&a.output);
    let mut sizes = BTreeMap::new();
    for (lang, lines) in &by_lang {
        let t = count_frequencies(&bpe, lines.iter().map(String::as_str), lang);
        let p = freqs_path(&a.output, lang);
        write_text(&p, &freqs_to_tsv(&t))?;
        sizes.insert(lang.to_string(), t.wordpiece_counts.len());
        outcome.outputs.push(p);
    }
    Ok(outcome.summary(json!({ "distinct_wordpieces": sizes })))
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub bpe: PathBuf,
    /// Frequency tables (files or directories of `*.freqs.tsv`).
    #[arg(long, required = true)]
    pub freqs: Vec<PathBuf>,
    /// Minimum frequency K.
    #[arg(long, default_value_t = 1)]
    pub min_freq: u64,
    /// Maximum number of multi-character wordpieces N (default: no cap).
    #[arg(long)]
    pub max_pieces: Option<usize>,
    /// Output directory; writes `<lang>.langvocab`.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn build_vocab(a: &BuildVocabArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let bpe = load_bpe(&a.bpe)?;
    let mut files = Vec::new();
    for p in &a.freqs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.to_string_lossy().ends_with(crate::files::FREQS_SUFFIX))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut tables: BTreeMap<Lang, FreqTable> = BTreeMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| data(format!("{}: {e}", f.display())))?;
        let t = freqs_from_tsv(&text, f)?;
        let lang = t.language.clone().ok_or_else(|| data(format!("{}: no #language line", f.display())))?;
        tables.entry(lang.clone()).or_insert_with(|| FreqTable { language: Some(lang), ..Default::default() }).merge(&t);
    }
    if tables.is_empty() {
        return Err(data("no frequency tables found"));
    }
    ensure_dir(&a.output)?;
    let mut outcome = Outcome::new(json!({"min_freq": a.min_freq, "max_pieces": a.max_pieces})).inputs(&files).output_dir(&a.output);
    let mut sizes = BTreeMap::new();
    for (lang, t) in &tables {
        let mut v = build_lang_vocab(&bpe, t, a.min_freq, a.max_pieces);
        v.language = lang.clone();
        let p = lang_vocab_path(&a.output, lang);
        v.save(&p)?;
        sizes.insert(lang.to_string(), v.len());
        outcome.outputs.push(p);
    }
    Ok(outcome.summary(json!({ "vocab_sizes": sizes, "global_vocab": bpe.vocab().len() })))
}

#[derive(Args, Debug)]
pub struct MultiparallelArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output directory (same file prefix as the input).
    #[arg(long)]
    pub output: PathBuf,
}

pub fn make_multiparallel(a: &MultiparallelArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let dir = a.corpus.corpus.as_ref().ok_or_else(|| usage("--corpus is required"))?;
    let c = load_corpus(dir, &a.corpus.prefix)?;
    let mp = build_multiparallel(&c);
    mp.save_dir(&a.output, &a.corpus.prefix)?;
    let sizes: BTreeMap<String, usize> = mp.directions().map(|d| (d.to_string(), mp.size(d))).collect();
    Ok(Outcome::new(json!({"prefix": a.corpus.prefix})).input(dir).output_dir(&a.output).summary(json!({ "sizes": sizes })))
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    /// Insert one unknown character at the beginning, middle or end.
    Unk,
    /// Random character deletions, insertions, swaps and substitutions.
    Char,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    #[arg(value_enum)]
    pub kind: NoiseType,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Character operations per sentence (char noise).
    #[arg(long, default_value_t = 3)]
    pub ops: usize,
}

fn op_row(line: usize, op: &NoiseOp) -> String {
    let kind = match op.kind {
        NoiseKind::Unk(p) => format!("unk-{}", serde_json::to_value(p).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
        NoiseKind::Char(k) => serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
    };
    let ch = op.ch.map(|c| c.escape_default().to_string()).unwrap_or_default();
    format!("{line}\t{kind}\t{}\t{ch}", op.position)
}

/// Writes the noised file plus `<output>.ops.tsv` listing every edit.
pub fn noise(a: &NoiseArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let lines = read_lines(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut out = Vec::with_capacity(lines.len());
    let mut log = vec!["line\top\tposition\tchar".to_string()];
    for (i, l) in lines.iter().enumerate() {
        match a.kind {
            NoiseType::Unk => {
                let (s, op) = noise_unk(l, &mut rng);
                log.push(op_row(i + 1, &op));
                out.push(s);
            }
            NoiseType::Char => {
                let (s, ops) = noise_char(l, a.ops, &mut rng);
                log.extend(ops.iter().map(|op| op_row(i + 1, op)));
                out.push(s);
            }
        }
    }
    write_lines(&a.output, &out)?;
    let mut sidecar = a.output.clone().into_os_string();
    sidecar.push(".ops.tsv");
    let sidecar = PathBuf::from(sidecar);
    write_lines(&sidecar, &log)?;
    Ok(Outcome::new(json!({"kind": a.kind, "ops": a.ops}))
        .input(&a.input)
        .output(&a.output)
        .output(&sidecar)
        .summary(json!({"lines": out.len(), "edits": log.len() - 1})))
}
