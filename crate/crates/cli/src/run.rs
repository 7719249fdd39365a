//! Decoding, scoring and benchmarking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use lightnmt::decoding::{DecodeConfig, Translator};
use lightnmt::eval::{self, bleu, bleu_consistency, chrf, count_words, measure_wps, BleuConfig, MetricScore, Scoreboard};
use lightnmt::profile::Profiler;
use lightnmt::{Direction, Lang};
use serde_json::json;

use crate::config::{resolve, Flags};
use crate::error::{data, usage, CliResult};
use crate::files::{bpe_paths, ensure_dir, load_bpe, load_corpus, load_lang_vocabs, load_model, read_lines, write_lines, write_text};
use crate::manifest::Outcome;
use crate::Ctx;

#[derive(Args, Debug, Clone)]
pub struct DecodeFlags {
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f64>,
    /// Keep searching until every beam slot holds a finished hypothesis.
    #[arg(long)]
    pub no_early_stop: bool,
    /// Decode in input order (online setting).
    #[arg(long)]
    pub no_sort: bool,
    /// Rerun the decoder over the whole prefix at every step.
    #[arg(long)]
    pub full_recompute: bool,
}

impl DecodeFlags {
    fn resolve(&self, ctx: &Ctx) -> CliResult<DecodeConfig> {
        let mut f = Flags::default();
        f.set("beam_size", self.beam)
            .set("batch_size", self.batch)
            .set("max_len", self.max_len)
            .set("min_len", self.min_len)
            .set("length_penalty", self.length_penalty)
            .on("full_recompute", self.full_recompute);
        if self.no_early_stop {
            f.set("early_stop", Some(false));
        }
        if self.no_sort {
            f.set("sort_by_length", Some(false));
        }
        let c = resolve(DecodeConfig::default(), &ctx.file, "decode", &f)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelInputs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    /// Test-time target vocabularies (files or directories of `*.langvocab`).
    #[arg(long)]
    pub lang_vocab: Vec<PathBuf>,
}

fn target_of(pair: &Option<String>, tgt: &Option<String>) -> CliResult<Lang> {
    match (pair, tgt) {
        (_, Some(t)) => Ok(Lang::new(t)),
        (Some(p), None) => Direction::parse(p).map(|d| d.tgt).ok_or_else(|| usage(format!("--pair `{p}` is not src-tgt"))),
        (None, None) => Err(usage("give --pair src-tgt or --tgt")),
    }
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub model: ModelInputs,
    #[command(flatten)]
    pub decode: DecodeFlags,
    /// Source file (one sentence per line).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Direction `src-tgt` of the input file.
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long)]
    pub tgt: Option<String>,
    /// Translate every direction of a corpus instead of one file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub prefix: String,
    /// Corpus mode output directory: `<prefix>.<src>-<tgt>.hyp`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Go through English: source to English, then English to the target.
    #[arg(long)]
    pub pivot: bool,
}

struct Decoded {
    text: Vec<String>,
    english: Option<Vec<String>>,
    unfinished: usize,
    empty: usize,
}

fn decode_lines(t: &Translator<'_, f32>, lines: &[String], tgt: &Lang, pivot: bool) -> CliResult<Decoded> {
    let mut prof = Profiler::disabled();
    if pivot {
        let out = t.translate_pivot(lines, tgt, &mut prof)?;
        Ok(Decoded {
            unfinished: out.iter().filter(|o| !o.finished).count(),
            empty: out.iter().filter(|o| o.empty_pivot).count(),
            english: Some(out.iter().map(|o| o.english.clone()).collect()),
            text: out.into_iter().map(|o| o.text).collect(),
        })
    } else {
        let out = t.translate(lines, tgt, &mut prof)?;
        Ok(Decoded {
            unfinished: out.iter().filter(|o| !o.finished).count(),
            empty: out.iter().filter(|o| o.text.is_empty()).count(),
            english: None,
            text: out.into_iter().map(|o| o.text).collect(),
        })
    }
}

pub fn hyp_path(dir: &Path, prefix: &str, d: &Direction) -> PathBuf {
    dir.join(format!("{prefix}.{d}.hyp"))
}

pub fn translate(a: &TranslateArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let dc = a.decode.resolve(ctx)?;
    let weights = load_model(&a.model.model)?;
    let bpe = load_bpe(&a.model.bpe)?;
    let (vocabs, vocab_files) = load_lang_vocabs(&a.model.lang_vocab)?;
    let mut t = Translator::new(&weights, &bpe, dc.clone());
    t.lang_vocabs = vocabs;
    let (m, v) = bpe_paths(&a.model.bpe);
    let base = Outcome::new(json!({"decode": dc, "pivot": a.pivot})).input(&a.model.model).input(m).input(v).inputs(vocab_files);
    match (&a.input, &a.corpus) {
        (Some(input), None) => {
            let output = a.output.as_ref().ok_or_else(|| usage("--input needs --output"))?;
            let tgt = target_of(&a.pair, &a.tgt)?;
            let lines = read_lines(input)?;
            let d = decode_lines(&t, &lines, &tgt, a.pivot)?;
            write_lines(output, &d.text)?;
            let mut o = base.input(input).output(output);
            if let Some(en) = &d.english {
                let mut p = output.clone().into_os_string();
                p.push(".en");
                let p = PathBuf::from(p);
                write_lines(&p, en)?;
                o = o.output(p);
            }
            Ok(o.summary(json!({"sentences": lines.len(), "unfinished": d.unfinished, "empty": d.empty, "target": tgt})))
        }
        (None, Some(dir)) => {
            let out_dir = a.output_dir.as_ref().ok_or_else(|| usage("--corpus needs --output-dir"))?;
            ensure_dir(out_dir)?;
            let corpus = load_corpus(dir, &a.prefix)?;
            let mut o = base.input(dir).output_dir(out_dir);
            let mut stats = BTreeMap::new();
            for d in corpus.directions().cloned().collect::<Vec<_>>() {
                let lines: Vec<String> = corpus.lines(&d).unwrap_or_default().into_iter().map(|(s, _)| s.to_string()).collect();
                let dec = decode_lines(&t, &lines, &d.tgt, a.pivot)?;
                let p = hyp_path(out_dir, &a.prefix, &d);
                write_lines(&p, &dec.text)?;
                o.outputs.push(p);
                stats.insert(d.to_string(), json!({"sentences": lines.len(), "unfinished": dec.unfinished, "empty": dec.empty}));
            }
            Ok(o.summary(json!({ "directions": stats })))
        }
        _ => Err(usage("give either --input/--output or --corpus/--output-dir")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Bleu,
    Chrf,
    /// BLEU between outputs on clean and on noised input.
    Consistency,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(value_enum)]
    pub metric: Metric,
    /// Hypotheses (for consistency: outputs on clean input).
    #[arg(long)]
    pub hyp: Option<PathBuf>,
    /// References (bleu, chrf).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Outputs on noised input (consistency).
    #[arg(long)]
    pub noisy_hyp: Option<PathBuf>,
    /// Row label `src-tgt` (default: taken from a `name.src-tgt.ext` file name).
    #[arg(long)]
    pub direction: Option<String>,
    /// Score every `<prefix>.<src>-<tgt>.hyp` in this directory.
    #[arg(long)]
    pub hyp_dir: Option<PathBuf>,
    /// Consistency over directories: outputs on noised input.
    #[arg(long)]
    pub noisy_hyp_dir: Option<PathBuf>,
    /// Reference corpus for --hyp-dir.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub prefix: String,
    /// none or intl
    #[arg(long)]
    pub tokenize: Option<String>,
    /// none or exp
    #[arg(long)]
    pub smooth: Option<String>,
    #[arg(long)]
    pub effective_order: bool,
    #[arg(long, default_value_t = 6)]
    pub chrf_order: usize,
    #[arg(long, default_value_t = 2.0)]
    pub chrf_beta: f64,
    /// TSV with one row per direction.
    #[arg(long)]
    pub output: PathBuf,
}

fn direction_from_name(p: &Path) -> Option<Direction> {
    let name = p.file_name()?.to_str()?;
    name.split('.').find_map(Direction::parse)
}

pub fn score(a: &ScoreArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let mut f = Flags::default();
    f.set("tokenize", a.tokenize.clone()).set("smoothing", a.smooth.clone()).on("effective_order", a.effective_order);
    let bc: BleuConfig = resolve(BleuConfig::default(), &ctx.file, "bleu", &f)?;
    let name = match a.metric {
        Metric::Bleu => "bleu",
        Metric::Chrf => "chrf",
        Metric::Consistency => "consistency",
    };
    // (direction, hyps, refs-or-noisy)
    let mut jobs: Vec<(Direction, Vec<String>, Vec<String>)> = Vec::new();
    let mut inputs: Vec<PathBuf> = Vec::new();
    let second = if a.metric == Metric::Consistency { &a.noisy_hyp } else { &a.reference };
    if let (Some(h), Some(r)) = (&a.hyp, second) {
        let dir = match &a.direction {
            Some(d) => Direction::parse(d).ok_or_else(|| usage(format!("--direction `{d}` is not src-tgt")))?,
            None => direction_from_name(h).ok_or_else(|| usage("give --direction; none in the hypothesis file name"))?,
        };
        jobs.push((dir, read_lines(h)?, read_lines(r)?));
        inputs.extend([h.clone(), r.clone()]);
    } else if let Some(hd) = &a.hyp_dir {
        if a.metric == Metric::Consistency {
            let nd = a.noisy_hyp_dir.as_ref().ok_or_else(|| usage("consistency over --hyp-dir needs --noisy-hyp-dir"))?;
            for (d, p) in hyp_files(hd, &a.prefix)? {
                let np = hyp_path(nd, &a.prefix, &d);
                jobs.push((d, read_lines(&p)?, read_lines(&np)?));
                inputs.extend([p, np]);
            }
        } else {
            let cd = a.corpus.as_ref().ok_or_else(|| usage("--hyp-dir needs --corpus with the references"))?;
            let corpus = load_corpus(cd, &a.prefix)?;
            for (d, p) in hyp_files(hd, &a.prefix)? {
                let refs: Vec<String> = corpus
                    .lines(&d)
                    .ok_or_else(|| data(format!("no references for {d} in {}", cd.display())))?
                    .into_iter()
                    .map(|(_, t)| t.to_string())
                    .collect();
                jobs.push((d, read_lines(&p)?, refs));
                inputs.push(p);
            }
            inputs.push(cd.clone());
        }
    } else {
        return Err(usage("give --hyp with --ref (or --noisy-hyp), or --hyp-dir"));
    }
    if jobs.is_empty() {
        return Err(data("nothing to score"));
    }
    let mut ms = MetricScore::new(name);
    let mut details = BTreeMap::new();
    for (d, h, r) in &jobs {
        let v = match a.metric {
            Metric::Bleu => {
                let s = bleu(h, r, &bc)?;
                details.insert(d.to_string(), json!(s));
                s.score
            }
            Metric::Chrf => chrf(h, r, a.chrf_order, a.chrf_beta)?,
            Metric::Consistency => {
                let c = bleu_consistency(h, r, &bc)?;
                details.insert(d.to_string(), json!({"clean_as_reference": c.clean_as_reference, "noisy_as_reference": c.noisy_as_reference}));
                c.clean_as_reference
            }
        };
        ms.per_direction.insert(d.clone(), v);
    }
    let tsv = ms.to_tsv();
    print!("{tsv}");
    write_text(&a.output, &tsv)?;
    Ok(Outcome::new(json!({"metric": name, "bleu": bc, "chrf_order": a.chrf_order, "chrf_beta": a.chrf_beta}))
        .inputs(inputs)
        .output(&a.output)
        .summary(json!({"mean": ms.value(), "directions": ms.per_direction.len(), "details": details})))
}

fn hyp_files(dir: &Path, prefix: &str) -> CliResult<Vec<(Direction, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| data(format!("{}: {e}", dir.display())))? {
        let p = e.map_err(|e| data(e.to_string()))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(mid) = name.strip_prefix(&format!("{prefix}.")).and_then(|r| r.strip_suffix(".hyp")) else { continue };
        if let Some(d) = Direction::parse(mid) {
            out.push((d, p));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    /// Words per second over repeated runs.
    Wps,
    /// Time per component bucket.
    Profile,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(value_enum)]
    pub kind: BenchKind,
    #[command(flatten)]
    pub model: ModelInputs,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub tgt: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// JSON report.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn benchmark(a: &BenchmarkArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    // timings are only meaningful without concurrent work
    ctx.threads = 1;
    let dc = a.decode.resolve(ctx)?;
    let weights = load_model(&a.model.model)?;
    let bpe = load_bpe(&a.model.bpe)?;
    let (vocabs, vocab_files) = load_lang_vocabs(&a.model.lang_vocab)?;
    let mut t = Translator::new(&weights, &bpe, dc.clone());
    t.lang_vocabs = vocabs;
    let lines = read_lines(&a.input)?;
    if lines.is_empty() {
        return Err(data("empty benchmark input"));
    }
    let tgt = Lang::new(&a.tgt);
    let report = match a.kind {
        BenchKind::Wps => {
            if a.repeats == 0 {
                return Err(usage("--repeats must be >= 1"));
            }
            let r = measure_wps(a.repeats, dc.beam_size, dc.batch_size, || {
                Ok(t.translate(&lines, &tgt, &mut Profiler::disabled())?.into_iter().map(|o| o.text).collect())
            })?;
            json!(r)
        }
        BenchKind::Profile => {
            let r = eval::profile(&t, &lines, &tgt)?;
            let mut v = json!(r);
            v["overhead"] = json!(r.overhead());
            v["consistent"] = json!(r.is_consistent());
            v
        }
    };
    write_text(&a.output, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    let (m, v) = bpe_paths(&a.model.bpe);
    Ok(Outcome::new(json!({"kind": format!("{:?}", a.kind).to_lowercase(), "decode": dc, "repeats": a.repeats}))
        .input(&a.model.model)
        .input(m)
        .input(v)
        .inputs(vocab_files)
        .input(&a.input)
        .output(&a.output)
        .summary(json!({"sentences": lines.len(), "source_words": count_words(&lines), "report": report})))
}

#[derive(Args, Debug)]
pub struct ScoreboardArgs {
    /// Per-direction metric files written by `score` (one metric).
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn scoreboard(a: &ScoreboardArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let mut merged: Option<MetricScore> = None;
    for p in &a.scores {
        let text = std::fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
        let s = MetricScore::from_tsv(&text)?;
        match merged.as_mut() {
            None => merged = Some(s),
            Some(m) if m.metric == s.metric => m.per_direction.extend(s.per_direction),
            Some(m) => return Err(data(format!("cannot combine metrics {} and {}", m.metric, s.metric))),
        }
    }
    let merged = merged.ok_or_else(|| data("no scores"))?;
    let board = Scoreboard::from_scores(&merged);
    let tsv = board.to_tsv();
    print!("{tsv}");
    write_text(&a.output, &tsv)?;
    Ok(Outcome::new(json!({})).inputs(&a.scores).output(&a.output).summary(json!(board)))
}
