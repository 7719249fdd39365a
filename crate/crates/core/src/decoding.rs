//! Greedy and beam decoding over a [`StepModel`], plus sentence-level
//! translation (tokenize, add language codes, decode, detokenize) and pivot
//! translation through English.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::insert_language_code;
use crate::error::{Error, Result};
use crate::lang::Lang;
use crate::model::{decoder_logits, encode, DecoderRoute, DecoderState, EncodedBatch, EncoderCache, IncrementalDecoder, ModelWeights};
use crate::profile::{Bucket, Profiler};
use crate::subword::{BpeModel, LangVocab, BOS, EOS, PAD};
use crate::tensor::{self, log_softmax_in_place, Eager, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub batch_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// EOS is disallowed before this many tokens have been generated.
    pub min_len: usize,
    pub length_penalty: f64,
    /// Stop a sentence once no live hypothesis can beat its best finished one.
    pub early_stop: bool,
    /// Sort sources by length before batching (results are returned in input
    /// order either way).
    pub sort_by_length: bool,
    /// Recompute the whole prefix at every step instead of using cached state.
    pub full_recompute: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            batch_size: 64,
            max_len: 256,
            min_len: 0,
            length_penalty: 1.0,
            early_stop: true,
            sort_by_length: true,
            full_recompute: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_size, batch_size and max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// One output sequence. Tokens are global ids without the start token or EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub tokens: Vec<u32>,
    pub finished: bool,
    /// Sum of token log-probabilities (EOS included when finished); greedy
    /// decoding does not track it.
    pub score: Option<f64>,
    /// `score / len^length_penalty`.
    pub norm_score: Option<f64>,
}

/// A decoder that maps previous tokens to next-token logits, one row per
/// hypothesis, keeping whatever per-hypothesis state it needs.
pub trait StepModel<F: Float> {
    type State: Clone;

    fn route(&self) -> &DecoderRoute<F>;

    /// Encode the sources; one initial state per sentence.
    fn start(&mut self, srcs: &[Vec<u32>], prof: &mut Profiler) -> Result<Vec<Self::State>>;

    /// Logits `[states.len(), vocab]` after consuming `prev` (local ids).
    fn step(&mut self, states: &mut [Self::State], prev: &[u32], prof: &mut Profiler) -> Result<Tensor<F>>;
}

/// Cached-state decoding.
pub struct CachedStepper<'a, F: Float> {
    pub decoder: IncrementalDecoder<'a, F>,
    cache: Option<EncoderCache<F>>,
}

impl<'a, F: Float> CachedStepper<'a, F> {
    pub fn new(weights: &'a ModelWeights<F>, route: DecoderRoute<F>) -> Result<Self> {
        Ok(CachedStepper { decoder: IncrementalDecoder::new(weights, route)?, cache: None })
    }
}

impl<F: Float> StepModel<F> for CachedStepper<'_, F> {
    type State = DecoderState<F>;

    fn route(&self) -> &DecoderRoute<F> {
        self.decoder.route()
    }

    fn start(&mut self, srcs: &[Vec<u32>], prof: &mut Profiler) -> Result<Vec<DecoderState<F>>> {
        let (cache, states) = self.decoder.start(srcs, prof)?;
        self.cache = Some(cache);
        Ok(states)
    }

    fn step(&mut self, states: &mut [DecoderState<F>], prev: &[u32], prof: &mut Profiler) -> Result<Tensor<F>> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::Mismatch("step before start".into()))?;
        self.decoder.step(cache, states, prev, prof)
    }
}

/// Reference decoding that reruns the whole-sequence decoder on the full
/// prefix at every step.
pub struct RecomputeStepper<'a, F: Float> {
    weights: &'a ModelWeights<F>,
    route: DecoderRoute<F>,
    encoded: Vec<Arc<Tensor<F>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    pub sentence: usize,
    pub prefix: Vec<u32>,
}

impl<'a, F: Float> RecomputeStepper<'a, F> {
    pub fn new(weights: &'a ModelWeights<F>, route: DecoderRoute<F>) -> Self {
        RecomputeStepper { weights, route, encoded: Vec::new() }
    }
}

impl<F: Float> StepModel<F> for RecomputeStepper<'_, F> {
    type State = PrefixState;

    fn route(&self) -> &DecoderRoute<F> {
        &self.route
    }

    fn start(&mut self, srcs: &[Vec<u32>], prof: &mut Profiler) -> Result<Vec<PrefixState>> {
        let t = prof.start();
        self.encoded.clear();
        for src in srcs {
            self.encoded.push(encode(&mut Eager, self.weights, std::slice::from_ref(src))?.states);
        }
        prof.stop(Bucket::Encoder, t);
        Ok((0..srcs.len()).map(|s| PrefixState { sentence: s, prefix: Vec::new() }).collect())
    }

    fn step(&mut self, states: &mut [PrefixState], prev: &[u32], prof: &mut Profiler) -> Result<Tensor<F>> {
        let t = prof.start();
        let v = self.route.vocab_size();
        let mut out = Tensor::zeros(&[states.len(), v]);
        for (r, (s, &tok)) in states.iter_mut().zip(prev).enumerate() {
            s.prefix.push(tok);
            let enc = EncodedBatch { states: Arc::clone(&self.encoded[s.sentence]), spans: vec![(0, self.encoded[s.sentence].rows())] };
            let logits = decoder_logits(&mut Eager, self.weights, &self.route, &enc, std::slice::from_ref(&s.prefix))?;
            out.row_mut(r).copy_from_slice(logits.row(s.prefix.len() - 1));
        }
        prof.stop(Bucket::Decoder, t);
        Ok(out)
    }
}

/// Local ids the search may never emit, plus the local EOS id.
struct Masks {
    eos: u32,
    banned: Vec<u32>,
}

impl Masks {
    fn new<F: Float>(route: &DecoderRoute<F>, extra_banned: &[u32]) -> Result<Self> {
        let eos = route.to_local(EOS).ok_or_else(|| Error::Mismatch("target vocabulary lacks EOS".into()))?;
        let banned = [PAD, BOS].iter().chain(extra_banned).filter_map(|&g| route.to_local(g)).collect();
        Ok(Masks { eos, banned })
    }

    fn apply<F: Float>(&self, row: &mut [F], generated: usize, cfg: &DecodeConfig) {
        for &b in &self.banned {
            row[b as usize] = F::neg_infinity();
        }
        if generated < cfg.min_len {
            row[self.eos as usize] = F::neg_infinity();
        }
    }
}

/// Argmax decoding; returns one translation per source. Sequences that reach
/// `max_len` without EOS are returned unfinished.
pub fn greedy<F: Float, S: StepModel<F>>(
    model: &mut S,
    srcs: &[Vec<u32>],
    starts: &[u32],
    cfg: &DecodeConfig,
    banned: &[u32],
    prof: &mut Profiler,
) -> Result<Vec<Translation>> {
    cfg.validate()?;
    let masks = Masks::new(model.route(), banned)?;
    let mut states = model.start(srcs, prof)?;
    let mut prev = model.route().localize(starts)?;
    let mut out: Vec<Translation> =
        srcs.iter().map(|_| Translation { tokens: Vec::new(), finished: false, score: None, norm_score: None }).collect();
    let mut active: Vec<usize> = (0..srcs.len()).collect();
    for t in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let mut logits = model.step(&mut states, &prev, prof)?;
        let sel = prof.start();
        let mut keep = Vec::with_capacity(active.len());
        let mut next = Vec::with_capacity(active.len());
        for (r, &s) in active.iter().enumerate() {
            let row = logits.row_mut(r);
            masks.apply(row, t, cfg);
            let best = argmax(row);
            if best == masks.eos {
                out[s].finished = true;
            } else {
                out[s].tokens.push(model.route().to_global(best));
                keep.push(r);
                next.push(best);
            }
        }
        prof.stop(Bucket::BeamTopk, sel);
        if keep.len() != active.len() {
            states = keep.iter().map(|&r| states[r].clone()).collect();
            active = keep.iter().map(|&r| active[r]).collect();
        }
        prev = next;
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
fn argmax<F: Float>(row: &[F]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

#[derive(Clone)]
struct Live<St> {
    tokens: Vec<u32>,
    score: f64,
    state: St,
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f64,
    hyp: usize,
    token: u32,
}

/// Higher score first; ties go to the earlier hypothesis, then lower token.
fn better(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.hyp.cmp(&b.hyp)).then(a.token.cmp(&b.token))
}

/// Keep the `k` best of `row` (offset by `base`) in `buf`, sorted best first.
fn push_top_k(buf: &mut Vec<Candidate>, k: usize, cand: Candidate) {
    if buf.len() == k && better(&cand, buf.last().expect("non-empty")).is_ge() {
        return;
    }
    let pos = buf.partition_point(|c| better(c, &cand).is_lt());
    buf.insert(pos, cand);
    if buf.len() > k {
        buf.pop();
    }
}

fn normalize(score: f64, len: usize, lp: f64) -> f64 {
    score / (len.max(1) as f64).powf(lp)
}

/// Batched beam search. Returns, per source, hypotheses ranked by normalized
/// score: the finished ones, or the live ones (flagged unfinished) when none
/// finished within `max_len`.
pub fn beam_search<F: Float, S: StepModel<F>>(
    model: &mut S,
    srcs: &[Vec<u32>],
    starts: &[u32],
    cfg: &DecodeConfig,
    banned: &[u32],
    prof: &mut Profiler,
) -> Result<Vec<Vec<Translation>>> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let lp = cfg.length_penalty;
    let masks = Masks::new(model.route(), banned)?;
    let init = model.start(srcs, prof)?;
    let starts = model.route().localize(starts)?;
    let mut live: Vec<Vec<Live<S::State>>> =
        init.into_iter().map(|state| vec![Live { tokens: Vec::new(), score: 0.0, state }]).collect();
    let mut finished: Vec<Vec<Translation>> = vec![Vec::new(); srcs.len()];
    let mut done = vec![false; srcs.len()];

    for t in 0..cfg.max_len {
        let rows: Vec<(usize, usize)> =
            (0..srcs.len()).filter(|&s| !done[s]).flat_map(|s| (0..live[s].len()).map(move |h| (s, h))).collect();
        if rows.is_empty() {
            break;
        }
        let mut states: Vec<S::State> = rows.iter().map(|&(s, h)| live[s][h].state.clone()).collect();
        let prev: Vec<u32> = rows.iter().map(|&(s, h)| live[s][h].tokens.last().copied().unwrap_or(starts[s])).collect();
        let mut logits = model.step(&mut states, &prev, prof)?;

        let t_dec = prof.start();
        let t_soft = prof.start();
        for r in 0..rows.len() {
            let row = logits.row_mut(r);
            log_softmax_in_place(row);
            masks.apply(row, t, cfg);
        }
        prof.stop(Bucket::Softmax, t_soft);
        prof.stop(Bucket::Decoder, t_dec);

        let t_top = prof.start();
        let mut states: Vec<Option<S::State>> = states.into_iter().map(Some).collect();
        let mut r0 = 0;
        for s in 0..srcs.len() {
            if done[s] {
                continue;
            }
            let n = live[s].len();
            let mut top: Vec<Candidate> = Vec::with_capacity(2 * k + 1);
            for h in 0..n {
                let base = live[s][h].score;
                for (j, &lpv) in logits.row(r0 + h).iter().enumerate() {
                    if lpv == F::neg_infinity() {
                        continue;
                    }
                    push_top_k(&mut top, 2 * k, Candidate { score: base + lpv.as_f64(), hyp: h, token: j as u32 });
                }
            }
            let mut next: Vec<Live<S::State>> = Vec::with_capacity(k);
            for (rank, c) in top.iter().enumerate() {
                if c.token == masks.eos {
                    if rank < k {
                        let tokens: Vec<u32> = live[s][c.hyp].tokens.iter().map(|&x| model.route().to_global(x)).collect();
                        let norm = normalize(c.score, tokens.len() + 1, lp);
                        finished[s].push(Translation { tokens, finished: true, score: Some(c.score), norm_score: Some(norm) });
                    }
                } else if next.len() < k {
                    let mut tokens = live[s][c.hyp].tokens.clone();
                    tokens.push(c.token);
                    let slot = r0 + c.hyp;
                    let state = match states[slot].take() {
                        Some(st) => {
                            states[slot] = Some(st.clone());
                            st
                        }
                        None => unreachable!("state taken and restored"),
                    };
                    next.push(Live { tokens, score: c.score, state });
                }
            }
            r0 += n;
            live[s] = next;
            let best_finished = finished[s].iter().filter_map(|h| h.norm_score).fold(f64::NEG_INFINITY, f64::max);
            // Scores only fall as hypotheses grow, so a live hypothesis can at
            // best reach score / max_len^lp.
            let bound = live[s].iter().map(|h| normalize(h.score, cfg.max_len, lp)).fold(f64::NEG_INFINITY, f64::max);
            if live[s].is_empty() || finished[s].len() >= k || (cfg.early_stop && !finished[s].is_empty() && best_finished >= bound) {
                done[s] = true;
            }
        }
        prof.stop(Bucket::BeamTopk, t_top);
    }

    let route = model.route();
    Ok((0..srcs.len())
        .map(|s| {
            let mut hyps = std::mem::take(&mut finished[s]);
            if hyps.is_empty() {
                hyps = live[s]
                    .iter()
                    .map(|h| Translation {
                        tokens: h.tokens.iter().map(|&x| route.to_global(x)).collect(),
                        finished: false,
                        score: Some(h.score),
                        norm_score: Some(normalize(h.score, h.tokens.len(), lp)),
                    })
                    .collect();
            }
            hyps.sort_by(|a, b| b.norm_score.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.norm_score.unwrap_or(f64::NEG_INFINITY)));
            hyps
        })
        .collect())
}

/// Decode a batch with the strategy the config selects (greedy for beam 1,
/// cached or recomputed state). Returns the best hypothesis per source.
pub fn decode_batch<F: Float>(
    weights: &ModelWeights<F>,
    route: &DecoderRoute<F>,
    srcs: &[Vec<u32>],
    starts: &[u32],
    cfg: &DecodeConfig,
    banned: &[u32],
    prof: &mut Profiler,
) -> Result<Vec<Translation>> {
    fn best(mut n: Vec<Vec<Translation>>) -> Vec<Translation> {
        n.iter_mut().map(|h| h.remove(0)).collect()
    }
    if cfg.full_recompute {
        let mut m = RecomputeStepper::new(weights, route.clone());
        return if cfg.beam_size == 1 {
            greedy(&mut m, srcs, starts, cfg, banned, prof)
        } else {
            beam_search(&mut m, srcs, starts, cfg, banned, prof).map(best)
        };
    }
    let mut m = CachedStepper::new(weights, route.clone())?;
    if cfg.beam_size == 1 {
        greedy(&mut m, srcs, starts, cfg, banned, prof)
    } else {
        beam_search(&mut m, srcs, starts, cfg, banned, prof).map(best)
    }
}

/// Sentence-level translation with a subword model.
pub struct Translator<'a, F: Float> {
    pub weights: &'a ModelWeights<F>,
    pub bpe: &'a BpeModel,
    pub config: DecodeConfig,
    /// Test-time target vocabularies; when present for the target language,
    /// the output projection is restricted to it.
    pub lang_vocabs: BTreeMap<Lang, LangVocab>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextOutput {
    pub text: String,
    pub tokens: Vec<u32>,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PivotOutput {
    pub text: String,
    pub english: String,
    pub finished: bool,
    /// The English intermediate was empty.
    pub empty_pivot: bool,
}

impl<'a, F: Float> Translator<'a, F> {
    pub fn new(weights: &'a ModelWeights<F>, bpe: &'a BpeModel, config: DecodeConfig) -> Self {
        Translator { weights, bpe, config, lang_vocabs: BTreeMap::new() }
    }

    pub fn route_for(&self, tgt: &Lang) -> Result<DecoderRoute<F>> {
        let route = self.weights.route(Some(tgt))?;
        match self.lang_vocabs.get(tgt) {
            Some(v) => route.filtered(v),
            None => Ok(route),
        }
    }

    /// Source ids (with EOS and, in encoder mode, the target code) and the
    /// decoder start token.
    pub fn prepare(&self, sentence: &str, tgt: &Lang) -> Result<(Vec<u32>, u32)> {
        let mut ids = self.bpe.encode(sentence);
        ids.push(EOS);
        if self.weights.config.languages.is_empty() {
            return Ok((ids, BOS));
        }
        insert_language_code(&ids, tgt, self.weights.config.lang_code_position, self.bpe.vocab())
    }

    fn banned(&self) -> Vec<u32> {
        let v = self.bpe.vocab();
        v.languages().filter_map(|l| v.lang_code(l)).collect()
    }

    /// Translate sentences into `tgt`, batching by `config.batch_size`.
    pub fn translate(&self, sentences: &[String], tgt: &Lang, prof: &mut Profiler) -> Result<Vec<TextOutput>> {
        let route = self.route_for(tgt)?;
        let prepared: Vec<(Vec<u32>, u32)> = sentences.iter().map(|s| self.prepare(s, tgt)).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        if self.config.sort_by_length {
            order.sort_by_key(|&i| std::cmp::Reverse(prepared[i].0.len()));
        }
        let banned = self.banned();
        let mut out: Vec<Option<TextOutput>> = vec![None; sentences.len()];
        for chunk in order.chunks(self.config.batch_size) {
            let srcs: Vec<Vec<u32>> = chunk.iter().map(|&i| prepared[i].0.clone()).collect();
            let starts: Vec<u32> = chunk.iter().map(|&i| prepared[i].1).collect();
            let res = decode_batch(self.weights, &route, &srcs, &starts, &self.config, &banned, prof)?;
            for (&i, t) in chunk.iter().zip(res) {
                out[i] = Some(TextOutput { text: self.bpe.decode(&t.tokens), tokens: t.tokens, finished: t.finished });
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every sentence decoded")).collect())
    }

    /// Translate into English, then from the detokenized English into `tgt`.
    pub fn translate_pivot(&self, sentences: &[String], tgt: &Lang, prof: &mut Profiler) -> Result<Vec<PivotOutput>> {
        let en = Lang::english();
        let first = self.translate(sentences, &en, prof)?;
        if tgt.is_english() {
            return Ok(first
                .into_iter()
                .map(|o| PivotOutput { empty_pivot: o.text.is_empty(), english: o.text.clone(), text: o.text, finished: o.finished })
                .collect());
        }
        let english: Vec<String> = first.iter().map(|o| o.text.clone()).collect();
        let nonempty: Vec<usize> = (0..english.len()).filter(|&i| !english[i].is_empty()).collect();
        let second_in: Vec<String> = nonempty.iter().map(|&i| english[i].clone()).collect();
        let second = self.translate(&second_in, tgt, prof)?;
        let mut out: Vec<PivotOutput> = first
            .iter()
            .map(|o| PivotOutput { text: String::new(), english: o.text.clone(), finished: o.finished, empty_pivot: true })
            .collect();
        for (&i, o) in nonempty.iter().zip(second) {
            out[i].text = o.text;
            out[i].finished &= o.finished;
            out[i].empty_pivot = false;
        }
        Ok(out)
    }
}

/// Local ids of every token a filtered decode may emit: the vocabulary plus EOS.
pub fn allowed_outputs(vocab: &LangVocab) -> HashSet<u32> {
    let mut s: HashSet<u32> = vocab.kept().iter().copied().collect();
    s.insert(EOS);
    s
}

/// Log-probability of a full output sequence (tokens then EOS), computed
/// with the whole-sequence decoder. Used as an exhaustive-search oracle.
pub fn sequence_log_prob<F: Float>(
    weights: &ModelWeights<F>,
    route: &DecoderRoute<F>,
    src: &[u32],
    start: u32,
    tokens: &[u32],
    finished: bool,
) -> Result<f64> {
    let start = route.to_local(start).ok_or_else(|| Error::Mismatch("start token not in target vocabulary".into()))?;
    let mut input = vec![start];
    input.extend(route.localize(tokens)?);
    let mut targets = route.localize(tokens)?;
    if finished {
        targets.push(route.to_local(EOS).ok_or_else(|| Error::Mismatch("no EOS".into()))?);
    } else {
        input.pop();
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let enc = encode(&mut Eager, weights, &[src.to_vec()])?;
    let logits = decoder_logits(&mut Eager, weights, route, &enc, &[input])?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let mut row = logits.row(r).to_vec();
        tensor::log_softmax_in_place(&mut row);
        total += row[t as usize].as_f64();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderKind, ModelConfig};

    fn toy(kind: DecoderKind, vocab: usize, seed: u64) -> ModelWeights<f64> {
        let mut cfg = ModelConfig::toy(1, 2, vocab);
        cfg.d_model = 8;
        cfg.ffn_dim = 16;
        cfg.decoder_kind = kind;
        let mut w = ModelWeights::build(&cfg, seed).unwrap();
        // sharper distributions make search differences visible
        let e = Arc::make_mut(w.params_mut().get_mut("embed.shared").unwrap());
        for x in e.data_mut() {
            *x *= 3.0;
        }
        w
    }

    fn cfg(beam: usize, max_len: usize) -> DecodeConfig {
        DecodeConfig { beam_size: beam, max_len, ..Default::default() }
    }

    /// Constant logits favouring EOS.
    struct EosModel(DecoderRoute<f64>);

    impl StepModel<f64> for EosModel {
        type State = ();
        fn route(&self) -> &DecoderRoute<f64> {
            &self.0
        }
        fn start(&mut self, srcs: &[Vec<u32>], _: &mut Profiler) -> Result<Vec<()>> {
            Ok(vec![(); srcs.len()])
        }
        fn step(&mut self, states: &mut [()], _: &[u32], _: &mut Profiler) -> Result<Tensor<f64>> {
            let v = self.0.vocab_size();
            let mut t = Tensor::zeros(&[states.len(), v]);
            for r in 0..states.len() {
                t.row_mut(r)[EOS as usize] = 10.0;
            }
            Ok(t)
        }
    }

    #[test]
    fn eos_dominated_model_gives_empty_output() {
        let w = toy(DecoderKind::Transformer, 8, 1);
        let mut m = EosModel(w.route(None).unwrap());
        let mut prof = Profiler::disabled();
        let g = greedy(&mut m, &[vec![5, 2]], &[BOS], &cfg(1, 5), &[], &mut prof).unwrap();
        assert!(g[0].tokens.is_empty() && g[0].finished);
        let b = beam_search(&mut m, &[vec![5, 2], vec![6, 2]], &[BOS, BOS], &cfg(4, 5), &[], &mut prof).unwrap();
        for n in &b {
            assert!(n[0].tokens.is_empty() && n[0].finished);
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_cache_equals_recompute() {
        for kind in [DecoderKind::Transformer, DecoderKind::Recurrent] {
            for seed in 0..5 {
                let w = toy(kind, 12, seed);
                let route = w.route(None).unwrap();
                let srcs = vec![vec![4, 5, 6, 2], vec![7, 2], vec![8, 9, 10, 11, 2]];
                let starts = vec![BOS; 3];
                let mut prof = Profiler::disabled();
                let mut cached = CachedStepper::new(&w, route.clone()).unwrap();
                let mut full = RecomputeStepper::new(&w, route.clone());
                let g = greedy(&mut cached, &srcs, &starts, &cfg(1, 8), &[], &mut prof).unwrap();
                let b1 = beam_search(&mut cached, &srcs, &starts, &cfg(1, 8), &[], &mut prof).unwrap();
                let gf = greedy(&mut full, &srcs, &starts, &cfg(1, 8), &[], &mut prof).unwrap();
                for s in 0..3 {
                    assert_eq!(g[s].tokens, b1[s][0].tokens);
                    assert_eq!(g[s].finished, b1[s][0].finished);
                    assert_eq!(g[s], gf[s]);
                }
                let b4 = beam_search(&mut cached, &srcs, &starts, &cfg(4, 8), &[], &mut prof).unwrap();
                let b4f = beam_search(&mut full, &srcs, &starts, &cfg(4, 8), &[], &mut prof).unwrap();
                for s in 0..3 {
                    assert_eq!(b4[s][0].tokens, b4f[s][0].tokens);
                }
            }
        }
    }

    #[test]
    fn beam_scores_are_sequence_log_probs() {
        let w = toy(DecoderKind::Transformer, 10, 3);
        let route = w.route(None).unwrap();
        let mut m = CachedStepper::new(&w, route.clone()).unwrap();
        let mut prof = Profiler::disabled();
        let res = beam_search(&mut m, &[vec![4, 5, 2]], &[BOS], &cfg(3, 6), &[], &mut prof).unwrap();
        for h in &res[0] {
            let lp = sequence_log_prob(&w, &route, &[4, 5, 2], BOS, &h.tokens, h.finished).unwrap();
            assert!((lp - h.score.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn min_len_forces_length() {
        let w = toy(DecoderKind::Transformer, 10, 4);
        let route = w.route(None).unwrap();
        let mut m = CachedStepper::new(&w, route).unwrap();
        let mut prof = Profiler::disabled();
        let c = DecodeConfig { beam_size: 2, max_len: 6, min_len: 5, ..Default::default() };
        let res = beam_search(&mut m, &[vec![4, 2]], &[BOS], &c, &[], &mut prof).unwrap();
        assert!(res[0].iter().all(|h| h.tokens.len() >= 5));
        let g = greedy(&mut m, &[vec![4, 2]], &[BOS], &DecodeConfig { beam_size: 1, ..c }, &[], &mut prof).unwrap();
        assert!(g[0].tokens.len() >= 5);
        assert!(g[0].tokens.iter().all(|&t| t != PAD && t != BOS));
    }

    #[test]
    fn filtered_decoding_emits_only_kept_tokens() {
        let w = toy(DecoderKind::Recurrent, 14, 6);
        let lv = LangVocab::from_kept("xx".into(), [0, 1, 2, 3, 6, 9, 13], None);
        let route = w.route(None).unwrap().filtered(&lv).unwrap();
        let mut m = CachedStepper::new(&w, route).unwrap();
        let mut prof = Profiler::disabled();
        let allowed = allowed_outputs(&lv);
        let res = beam_search(&mut m, &[vec![4, 5, 2], vec![11, 2]], &[BOS, BOS], &cfg(3, 7), &[], &mut prof).unwrap();
        for h in res.iter().flatten() {
            assert!(h.tokens.iter().all(|t| allowed.contains(t)));
        }
    }
}
