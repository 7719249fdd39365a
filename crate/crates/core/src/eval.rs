//! Corpus metrics (BLEU, chrF, consistency), throughput and latency
//! reports, and direction-group averages.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::decoding::Translator;
use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::profile::{calibrate_null_span, Bucket, Profiler};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenize {
    /// Split on whitespace only.
    #[default]
    None,
    /// Separate punctuation and symbols from words first.
    Intl,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    None,
    /// Zero-match orders get precision `1 / (2^k * total)`, k counting the
    /// zero orders so far.
    Exp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BleuConfig {
    pub tokenize: Tokenize,
    pub smoothing: Smoothing,
    /// Ignore n-gram orders the hypothesis side has none of.
    pub effective_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    pub score: f64,
    /// Per-order precisions in percent.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub sys_len: usize,
    pub ref_len: usize,
}

fn intl_rules() -> &'static [(Regex, &'static str)] {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (r"([\{-~\[-` -&\(-\+:-@/])", " $1 "),
            (r"([^0-9])([\.,])", "$1 $2 "),
            (r"([\.,])([^0-9])", " $1 $2"),
            (r"([0-9])(-)", "$1 $2 "),
        ]
        .into_iter()
        .map(|(p, r)| (Regex::new(p).expect("valid pattern"), r))
        .collect()
    })
}

pub fn tokenize(line: &str, mode: Tokenize) -> Vec<String> {
    match mode {
        Tokenize::None => line.split_whitespace().map(str::to_string).collect(),
        Tokenize::Intl => {
            let mut s = format!(" {} ", line.trim());
            for (re, rep) in intl_rules() {
                s = re.replace_all(&s, *rep).into_owned();
            }
            s.split_whitespace().map(str::to_string).collect()
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn check_lines(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Mismatch(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::Data("cannot score an empty corpus".into()));
    }
    Ok(())
}

/// Corpus BLEU-4 on a 0..100 scale.
pub fn bleu(hyps: &[String], refs: &[String], cfg: &BleuConfig) -> Result<BleuScore> {
    check_lines(hyps, refs)?;
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let mut ref_total = [0usize; 4];
    let (mut sys_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = tokenize(h, cfg.tokenize);
        let r = tokenize(r, cfg.tokenize);
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, &c) in &hc {
                correct[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
            ref_total[n - 1] += rc.values().sum::<usize>();
        }
    }
    let mut precisions = [0.0; 4];
    // Orders absent from both sides carry no evidence either way and are
    // left out, so a corpus of short lines still scores 100 against itself.
    let mut order = (0..4).rev().find(|&n| total[n] > 0 || ref_total[n] > 0).map_or(0, |n| n + 1);
    let mut smooth = 1.0;
    for n in 0..order {
        if total[n] == 0 {
            if cfg.effective_order {
                order = n;
                break;
            }
            continue;
        }
        precisions[n] = if correct[n] > 0 {
            100.0 * correct[n] as f64 / total[n] as f64
        } else if cfg.smoothing == Smoothing::Exp {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            0.0
        };
    }
    let bp = if sys_len == 0 {
        0.0
    } else if sys_len < ref_len {
        (1.0 - ref_len as f64 / sys_len as f64).exp()
    } else {
        1.0
    };
    let score = if order == 0 || precisions[..order].iter().any(|&p| p == 0.0) {
        0.0
    } else {
        bp * (precisions[..order].iter().map(|p| (p / 100.0).ln()).sum::<f64>() / order as f64).exp() * 100.0
    };
    Ok(BleuScore { score, precisions, brevity_penalty: bp, sys_len, ref_len })
}

fn char_ngrams(s: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Character n-gram F-score (orders 1..=`order`, whitespace removed) on a
/// 0..1 scale. Precision and recall are averaged over the orders both sides
/// have n-grams for, then combined with weight `beta` on recall.
pub fn chrf(hyps: &[String], refs: &[String], order: usize, beta: f64) -> Result<f64> {
    check_lines(hyps, refs)?;
    let mut matches = vec![0usize; order];
    let mut hyp_total = vec![0usize; order];
    let mut ref_total = vec![0usize; order];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=order {
            let hc = char_ngrams(&h, n);
            let rc = char_ngrams(&r, n);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            hyp_total[n - 1] += hc.values().sum::<usize>();
            ref_total[n - 1] += rc.values().sum::<usize>();
        }
    }
    let orders: Vec<usize> = (0..order).filter(|&n| hyp_total[n] > 0 && ref_total[n] > 0).collect();
    if orders.is_empty() {
        return Ok(0.0);
    }
    let k = orders.len() as f64;
    let p = orders.iter().map(|&n| matches[n] as f64 / hyp_total[n] as f64).sum::<f64>() / k;
    let r = orders.iter().map(|&n| matches[n] as f64 / ref_total[n] as f64).sum::<f64>() / k;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (b2 * p + r))
}

/// BLEU of noisy-input outputs against clean-input outputs, plus the
/// swapped orientation (the two differ in general).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Consistency {
    pub clean_as_reference: f64,
    pub noisy_as_reference: f64,
}

pub fn bleu_consistency(clean: &[String], noisy: &[String], cfg: &BleuConfig) -> Result<Consistency> {
    Ok(Consistency {
        clean_as_reference: bleu(noisy, clean, cfg)?.score,
        noisy_as_reference: bleu(clean, noisy, cfg)?.score,
    })
}

pub fn count_words<S: AsRef<str>>(lines: &[S]) -> usize {
    lines.iter().map(|l| l.as_ref().split_whitespace().count()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WpsReport {
    pub words: usize,
    pub seconds: Vec<f64>,
    pub wps: Vec<f64>,
    pub mean_wps: f64,
    pub beam: usize,
    pub batch: usize,
    /// No words were produced, so WPS is undefined (reported as 0).
    pub empty_output: bool,
}

impl WpsReport {
    pub fn from_runs(words: usize, seconds: Vec<f64>, beam: usize, batch: usize) -> Self {
        let wps: Vec<f64> = seconds.iter().map(|&s| words as f64 / s.max(1e-12)).collect();
        let mean_wps = if wps.is_empty() { 0.0 } else { wps.iter().sum::<f64>() / wps.len() as f64 };
        WpsReport { words, seconds, wps, mean_wps, beam, batch, empty_output: words == 0 }
    }
}

/// Run `job` `repeats` times, timing each run; WPS is the whitespace word
/// count of the detokenized outputs over wall time, averaged across runs.
pub fn measure_wps(repeats: usize, beam: usize, batch: usize, mut job: impl FnMut() -> Result<Vec<String>>) -> Result<WpsReport> {
    let mut seconds = Vec::with_capacity(repeats);
    let mut words = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let out = job()?;
        seconds.push(t.elapsed().as_secs_f64());
        let n = count_words(&out);
        if words.is_some_and(|w| w != n) {
            return Err(Error::Mismatch("repeated runs produced different outputs".into()));
        }
        words = Some(n);
    }
    Ok(WpsReport::from_runs(words.unwrap_or(0), seconds, beam, batch))
}

/// Wall time per component in seconds. The decoder bucket includes its
/// sub-buckets; `total` also covers untimed glue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total: f64,
    pub encoder: f64,
    pub decoder: f64,
    pub self_attn_or_rnn: f64,
    pub cross_attn: f64,
    pub softmax: f64,
    pub beam_topk: f64,
    pub beam: usize,
    pub batch: usize,
    pub sentences: usize,
    /// Timed spans and the measured cost of one empty span.
    pub spans: u64,
    pub null_span: f64,
}

impl TimingReport {
    pub fn from_profiler(p: &Profiler, total: Duration, beam: usize, batch: usize, sentences: usize) -> Self {
        let s = |b| p.total(b).as_secs_f64();
        TimingReport {
            total: total.as_secs_f64(),
            encoder: s(Bucket::Encoder),
            decoder: s(Bucket::Decoder),
            self_attn_or_rnn: s(Bucket::SelfAttnOrRnn),
            cross_attn: s(Bucket::CrossAttn),
            softmax: s(Bucket::Softmax),
            beam_topk: s(Bucket::BeamTopk),
            beam,
            batch,
            sentences,
            spans: p.span_count(),
            null_span: calibrate_null_span(10_000).as_secs_f64(),
        }
    }

    /// Estimated instrumentation cost included in the timings.
    pub fn overhead(&self) -> f64 {
        self.spans as f64 * self.null_span
    }

    /// Sub-buckets fit in the decoder, and the top-level buckets in the total.
    pub fn is_consistent(&self) -> bool {
        let all = [self.total, self.encoder, self.decoder, self.self_attn_or_rnn, self.cross_attn, self.softmax, self.beam_topk];
        all.iter().all(|&x| x >= 0.0)
            && self.self_attn_or_rnn + self.cross_attn + self.softmax <= self.decoder
            && self.encoder + self.decoder + self.beam_topk <= self.total
    }
}

/// Translate `sentences` once with the profiler on.
pub fn profile<F: Float>(translator: &Translator<'_, F>, sentences: &[String], tgt: &Lang) -> Result<TimingReport> {
    let mut prof = Profiler::enabled();
    let t = Instant::now();
    translator.translate(sentences, tgt, &mut prof)?;
    let total = t.elapsed();
    Ok(TimingReport::from_profiler(&prof, total, translator.config.beam_size, translator.config.batch_size, sentences.len()))
}

/// A metric over several directions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: String,
    pub per_direction: BTreeMap<Direction, f64>,
}

impl MetricScore {
    pub fn new(metric: impl Into<String>) -> Self {
        MetricScore { metric: metric.into(), per_direction: BTreeMap::new() }
    }

    /// Unweighted mean over directions.
    pub fn value(&self) -> f64 {
        mean(self.per_direction.values().copied())
    }

    /// `direction<TAB>metric<TAB>value`, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("direction\tmetric\tvalue\n");
        for (d, v) in &self.per_direction {
            s.push_str(&format!("{d}\t{}\t{v:.4}\n", self.metric));
        }
        s
    }

    /// Parse rows written by [`to_tsv`](Self::to_tsv); rows for other
    /// metrics are an error, so one file holds one metric.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut out: Option<MetricScore> = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("direction\t") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format("metrics file", format!("line {}: {line:?}", i + 1));
            let [d, m, v] = cols[..] else { return Err(bad()) };
            let dir = Direction::parse(d).ok_or_else(bad)?;
            let v: f64 = v.parse().map_err(|_| bad())?;
            let entry = out.get_or_insert_with(|| MetricScore::new(m));
            if entry.metric != m {
                return Err(Error::format("metrics file", format!("mixes metrics {} and {m}", entry.metric)));
            }
            entry.per_direction.insert(dir, v);
        }
        out.ok_or_else(|| Error::format("metrics file", "no rows"))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Averages over directions into English, out of English, and between two
/// non-English languages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scoreboard {
    pub metric: String,
    pub to_en: Option<f64>,
    pub from_en: Option<f64>,
    pub non_en: Option<f64>,
    pub counts: [usize; 3],
}

impl Scoreboard {
    pub fn from_scores(score: &MetricScore) -> Self {
        let group = |f: &dyn Fn(&Direction) -> bool| {
            let xs: Vec<f64> = score.per_direction.iter().filter(|(d, _)| f(d)).map(|(_, &v)| v).collect();
            (xs.len(), (!xs.is_empty()).then(|| mean(xs.into_iter())))
        };
        let (a, to_en) = group(&|d| d.tgt.is_english());
        let (b, from_en) = group(&|d| d.src.is_english());
        let (c, non_en) = group(&|d| !d.src.is_english() && !d.tgt.is_english());
        Scoreboard { metric: score.metric.clone(), to_en, from_en, non_en, counts: [a, b, c] }
    }

    pub fn to_tsv(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!(
            "group\tdirections\t{m}\nto_en\t{}\t{}\nfrom_en\t{}\t{}\nnon_en\t{}\t{}\n",
            self.counts[0],
            fmt(self.to_en),
            self.counts[1],
            fmt(self.from_en),
            self.counts[2],
            fmt(self.non_en),
            m = self.metric
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_hand_cases() {
        let c = BleuConfig::default();
        let b = bleu(&lines(&["the cat sat on the mat"]), &lines(&["the cat sat on a mat"]), &c).unwrap();
        // precisions 5/6, 3/5, 2/4, 1/3, equal lengths
        let expect = 100.0 * (5.0 / 6.0 * 3.0 / 5.0 * 0.5 / 3.0f64).powf(0.25);
        assert!((b.score - expect).abs() < 1e-9);
        let tt = bleu(&lines(&["the the cat"]), &lines(&["the cat sat"]), &c).unwrap();
        assert_eq!(tt.score, 0.0);
        let smooth = BleuConfig { smoothing: Smoothing::Exp, effective_order: true, ..c };
        let tt = bleu(&lines(&["the the cat"]), &lines(&["the cat sat"]), &smooth).unwrap();
        // 2/3, 1/2, smoothed 1/2 over three orders
        assert!((tt.score - 100.0 * (2.0 / 3.0 * 0.25f64).powf(1.0 / 3.0)).abs() < 1e-9);
        assert!(bleu(&[], &[], &c).is_err());
        assert!(bleu(&lines(&["a"]), &lines(&["a", "b"]), &c).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        let c = BleuConfig::default();
        let b = bleu(&lines(&["a b c d"]), &lines(&["a b c d e f"]), &c).unwrap();
        assert!((b.brevity_penalty - (1.0 - 1.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn intl_splits_punctuation() {
        assert_eq!(tokenize("Hello, world! (3.5-4)", Tokenize::Intl), ["Hello", ",", "world", "!", "(", "3.5", "-", "4", ")"]);
        assert_eq!(tokenize(" a  b ", Tokenize::None), ["a", "b"]);
    }

    #[test]
    fn chrf_bounds() {
        let x = lines(&["hello there", "general kenobi"]);
        assert!((chrf(&x, &x, 6, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(chrf(&lines(&["abc"]), &lines(&["xyz"]), 6, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn consistency_is_asymmetric() {
        let c = BleuConfig::default();
        let clean = lines(&["a b c d e"]);
        let noisy = lines(&["a b c d e f g"]);
        let r = bleu_consistency(&clean, &noisy, &c).unwrap();
        assert_ne!(r.clean_as_reference, r.noisy_as_reference);
        assert_eq!(bleu_consistency(&clean, &clean, &c).unwrap().clean_as_reference, 100.0);
    }

    #[test]
    fn wps_counts_words() {
        let r = measure_wps(2, 5, 64, || Ok(lines(&["a b", "c"]))).unwrap();
        assert_eq!(r.words, 3);
        assert_eq!(r.seconds.len(), 2);
        let doubled = WpsReport::from_runs(6, vec![1.0], 5, 64);
        assert_eq!(doubled.mean_wps, 2.0 * WpsReport::from_runs(3, vec![1.0], 5, 64).mean_wps);
        assert!(WpsReport::from_runs(0, vec![1.0], 5, 64).empty_output);
    }

    #[test]
    fn scoreboard_groups() {
        let mut s = MetricScore::new("bleu");
        s.per_direction.insert(Direction::new("de", "en"), 30.0);
        s.per_direction.insert(Direction::new("fr", "en"), 20.0);
        s.per_direction.insert(Direction::new("en", "de"), 10.0);
        s.per_direction.insert(Direction::new("de", "fr"), 5.0);
        let b = Scoreboard::from_scores(&s);
        assert_eq!((b.to_en, b.from_en, b.non_en), (Some(25.0), Some(10.0), Some(5.0)));
        assert_eq!(MetricScore::from_tsv(&s.to_tsv()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn bleu_self_and_reordering(corpus in prop::collection::vec("[a-d]{1,3}( [a-d]{1,3}){0,6}", 1..6), seed in 0u64..100) {
            let c = BleuConfig::default();
            let refs: Vec<String> = corpus.iter().map(|s| s.chars().rev().collect()).collect();
            prop_assert!((bleu(&corpus, &corpus, &c).unwrap().score - 100.0).abs() < 1e-9);
            let base = bleu(&corpus, &refs, &c).unwrap().score;
            let mut idx: Vec<usize> = (0..corpus.len()).collect();
            idx.rotate_left(seed as usize % corpus.len());
            let h: Vec<String> = idx.iter().map(|&i| corpus[i].clone()).collect();
            let r: Vec<String> = idx.iter().map(|&i| refs[i].clone()).collect();
            prop_assert!((bleu(&h, &r, &c).unwrap().score - base).abs() < 1e-9);
        }
    }
}
