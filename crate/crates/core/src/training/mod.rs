//! Optimization loop: inverse-sqrt schedule, Adam with global-norm clipping,
//! encoder freezing, fine-tuning workflows and checkpoints.

pub mod toy;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{insert_language_code, make_batches, BatchConfig, BatchItem, CodePosition, PairSampler, TokenizedPair};
use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::model::{
    batch_loss, decoder_logits, encode, init_hybrid, init_multi_decoder, load_weights, save_weights, DecoderRoute, ModelWeights,
    TeacherBatch,
};
use crate::subword::{LangVocab, Vocab, EOS};
use crate::tensor::{Eager, Float, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_updates: u64,
    pub warmup_init_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub max_updates: u64,
    pub dropout: f64,
    pub freeze_encoder: bool,
    /// Restart the schedule when fine-tuning; `None` uses the workflow's
    /// default.
    pub lr_reset: Option<bool>,
    pub max_tokens: usize,
    pub seed: u64,
    /// Save a checkpoint every this many updates (0: never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            warmup_updates: 4000,
            warmup_init_lr: 1e-7,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            clip_norm: 0.0,
            max_updates: 10_000,
            dropout: 0.3,
            freeze_encoder: false,
            lr_reset: None,
            max_tokens: 4000,
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that train the synthetic tasks in a few thousand updates.
    pub fn toy() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            warmup_updates: 100,
            adam_betas: (0.9, 0.98),
            dropout: 0.0,
            max_updates: 2000,
            max_tokens: 400,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing)));
        }
        if self.warmup_updates == 0 {
            return Err(Error::Config("warmup_updates must be >= 1".into()));
        }
        if self.peak_lr <= 0.0 || self.clip_norm < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("peak_lr must be positive, clip_norm non-negative, dropout in [0, 1)".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate for update `step` (1-based): a linear ramp from
/// `warmup_init_lr` to `peak_lr`, then `peak_lr * sqrt(warmup / step)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warm = cfg.warmup_updates as f64;
    if step <= warm {
        cfg.warmup_init_lr + (cfg.peak_lr - cfg.warmup_init_lr) * step / warm
    } else {
        cfg.peak_lr * (warm / step).sqrt()
    }
}

/// Names excluded from updates when the encoder is frozen.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name == "embed.src"
}

/// Adam moments kept in double precision, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    /// Updates applied so far (for bias correction).
    pub t: u64,
}

impl Adam {
    fn update<F: Float>(&mut self, name: &str, param: &mut [F], grad: &[F], lr: f64, cfg: &TrainConfig) {
        let (b1, b2) = cfg.adam_betas;
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for i in 0..param.len() {
            let g = grad[i].as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            param[i] = F::of(param[i].as_f64() - step);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Owns a model's weights and optimizer state.
pub struct Trainer<F: Float> {
    pub weights: ModelWeights<F>,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Updates taken so far.
    pub step: u64,
    /// Update at which the current schedule started.
    pub schedule_start: u64,
}

impl<F: Float> Trainer<F> {
    pub fn new(mut weights: ModelWeights<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        weights.config.dropout = config.dropout;
        Ok(Trainer { weights, config, optimizer: Adam::default(), step: 0, schedule_start: 0 })
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.step + 1 - self.schedule_start, &self.config)
    }

    /// Forward, backward, clip and update on one batch. A non-finite loss
    /// leaves the weights untouched and is reported as an error.
    pub fn train_step(&mut self, batch: &TeacherBatch, lang: Option<&Lang>) -> Result<StepStats> {
        let route = self.weights.route(lang)?;
        let seed = self.config.seed ^ (self.step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut g = Graph::new(seed);
        let loss = batch_loss(&mut g, &self.weights, &route, batch, self.config.label_smoothing)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {value} at update {}", self.step + 1)));
        }
        let grads = g.backward(loss)?;
        let mut grads = g.param_grads(&grads);
        if self.config.freeze_encoder {
            grads.retain(|name, _| !is_encoder_param(name));
        }
        let norm = grads.values().flat_map(|t| t.data()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at update {}", self.step + 1)));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        if clip != 1.0 {
            for t in grads.values_mut() {
                for x in t.data_mut() {
                    *x = F::of(x.as_f64() * clip);
                }
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        self.optimizer.t += 1;
        for (name, grad) in &grads {
            let Some(param) = self.weights.params_mut().get_mut(name) else { continue };
            self.optimizer.update(name, Arc::make_mut(param).data_mut(), grad.data(), lr, &self.config);
        }
        Ok(StepStats { step: self.step, loss: value, lr, grad_norm: norm, tokens: batch.target_tokens() })
    }

    /// Restart the learning-rate schedule at the next update.
    pub fn reset_schedule(&mut self) {
        self.schedule_start = self.step;
    }
}

/// A training pair with the source ready for the encoder (EOS and any
/// language code added) and the decoder start token chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tgt_lang: Lang,
    pub src: Vec<u32>,
    pub start: u32,
    /// Global target ids without EOS.
    pub tgt: Vec<u32>,
}

impl BatchItem for Example {
    fn src_len(&self) -> usize {
        self.src.len()
    }
    fn tgt_len(&self) -> usize {
        self.tgt.len() + 1
    }
    fn tgt_lang(&self) -> &Lang {
        &self.tgt_lang
    }
}

impl Example {
    /// Add EOS to the source, then the target-language code where the model
    /// expects it. Vocabularies without language codes leave the source
    /// alone and start from BOS.
    pub fn from_pair(pair: &TokenizedPair, vocab: &Vocab, position: CodePosition) -> Result<Self> {
        let mut src = pair.src.clone();
        src.push(EOS);
        let (src, start) = if vocab.lang_code(&pair.tgt_lang).is_some() {
            insert_language_code(&src, &pair.tgt_lang, position, vocab)?
        } else {
            (src, crate::subword::BOS)
        };
        Ok(Example { tgt_lang: pair.tgt_lang.clone(), src, start, tgt: pair.tgt.clone() })
    }
}

pub fn examples_from_pairs(pairs: &[TokenizedPair], vocab: &Vocab, position: CodePosition) -> Result<Vec<Example>> {
    pairs.iter().map(|p| Example::from_pair(p, vocab, position)).collect()
}

/// Teacher-forcing inputs and outputs in the route's local ids.
pub fn teacher_batch<F: Float>(examples: &[&Example], route: &DecoderRoute<F>) -> Result<TeacherBatch> {
    let mut batch = TeacherBatch::default();
    for ex in examples {
        let mut tin = vec![ex.start];
        tin.extend_from_slice(&ex.tgt);
        let mut tout = ex.tgt.clone();
        tout.push(EOS);
        batch.src.push(ex.src.clone());
        batch.tgt_in.push(route.localize(&tin)?);
        batch.tgt_out.push(route.localize(&tout)?);
    }
    Ok(batch)
}

/// Target language of a batch when the model routes per language.
fn batch_language<'e, F: Float>(w: &ModelWeights<F>, batch: &[&'e Example]) -> Result<Option<&'e Lang>> {
    if !w.config.multi_decoder {
        return Ok(None);
    }
    let lang = &batch[0].tgt_lang;
    if batch.iter().any(|e| &e.tgt_lang != lang) {
        return Err(Error::Data("per-language decoders need batches with a single target language".into()));
    }
    Ok(Some(lang))
}

/// Append-only TSV log of `step, loss, lr, wps` where wps counts target
/// tokens per second of wall time.
pub struct RunLog {
    out: Option<BufWriter<File>>,
    last: Instant,
    tokens: usize,
    pub every: u64,
    pub history: Vec<StepStats>,
}

impl RunLog {
    pub fn new(path: Option<&Path>, every: u64) -> Result<Self> {
        let out = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
                writeln!(w, "step\tloss\tlr\twps").map_err(|e| Error::io(p, e))?;
                Some(w)
            }
            None => None,
        };
        Ok(RunLog { out, last: Instant::now(), tokens: 0, every: every.max(1), history: Vec::new() })
    }

    pub fn record(&mut self, s: StepStats) -> Result<()> {
        self.history.push(s);
        self.tokens += s.tokens;
        if s.step % self.every == 0 {
            let secs = self.last.elapsed().as_secs_f64().max(1e-9);
            let wps = self.tokens as f64 / secs;
            if let Some(w) = self.out.as_mut() {
                writeln!(w, "{}\t{:.6}\t{:.3e}\t{:.1}", s.step, s.loss, s.lr, wps).map_err(|e| Error::io("run log", e))?;
            }
            self.last = Instant::now();
            self.tokens = 0;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            w.flush().map_err(|e| Error::io("run log", e))?;
        }
        Ok(())
    }
}

/// Where and how often to write checkpoints during [`train`].
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub every: u64,
}

/// Train until `trainer.config.max_updates` total updates, cycling through
/// freshly shuffled batches of `examples`. Returns the number of updates
/// taken in this call.
pub fn train<F: Float, R: Rng>(
    trainer: &mut Trainer<F>,
    examples: &[Example],
    batching: &BatchConfig,
    rng: &mut R,
    log: &mut RunLog,
    checkpoints: Option<&CheckpointPlan>,
) -> Result<u64> {
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let begin = trainer.step;
    while trainer.step < trainer.config.max_updates {
        let batches = make_batches(examples.to_vec(), batching, rng);
        if batches.batches.is_empty() {
            return Err(Error::Data(format!("every example exceeds max_tokens = {}", batching.max_tokens)));
        }
        for b in &batches.batches {
            if trainer.step >= trainer.config.max_updates {
                break;
            }
            let refs: Vec<&Example> = b.iter().collect();
            let lang = batch_language(&trainer.weights, &refs)?;
            let route = trainer.weights.route(lang)?;
            let tb = teacher_batch(&refs, &route)?;
            let stats = trainer.train_step(&tb, lang)?;
            log.record(stats)?;
            if let Some(plan) = checkpoints {
                if plan.every > 0 && trainer.step % plan.every == 0 {
                    save_checkpoint(&plan.dir.join(format!("checkpoint{}", trainer.step)), trainer)?;
                }
            }
        }
    }
    log.flush()?;
    Ok(trainer.step - begin)
}

/// Draw `n` examples by sampling a direction with `sampler`, then a uniform
/// example from that direction. Directions without examples are redrawn.
pub fn sample_examples<R: Rng>(
    by_direction: &BTreeMap<Direction, Vec<Example>>,
    sampler: &PairSampler,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    if by_direction.values().all(Vec::is_empty) {
        return Err(Error::Data("no examples to sample".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let d = sampler.sample(rng);
        match by_direction.get(&d).filter(|v| !v.is_empty()) {
            Some(v) => out.push(v[rng.gen_range(0..v.len())].clone()),
            None => {
                misses += 1;
                if misses > 1000 * n.max(1) {
                    return Err(Error::Data("sampler keeps drawing directions without examples".into()));
                }
            }
        }
    }
    Ok(out)
}

/// Teacher-forced argmax accuracy over target tokens (EOS included).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Accuracy {
    pub per_lang: BTreeMap<Lang, (usize, usize)>,
}

impl Accuracy {
    pub fn overall(&self) -> f64 {
        let (c, t) = self.per_lang.values().fold((0, 0), |(a, b), &(c, t)| (a + c, b + t));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }

    pub fn of(&self, lang: &Lang) -> Option<f64> {
        self.per_lang.get(lang).filter(|(_, t)| *t > 0).map(|&(c, t)| c as f64 / t as f64)
    }
}

pub fn token_accuracy<F: Float>(w: &ModelWeights<F>, examples: &[Example], batch_size: usize) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    let mut by_lang: BTreeMap<&Lang, Vec<&Example>> = BTreeMap::new();
    for e in examples {
        by_lang.entry(&e.tgt_lang).or_default().push(e);
    }
    for (lang, exs) in by_lang {
        let route = w.route(w.config.multi_decoder.then_some(lang))?;
        let slot = acc.per_lang.entry(lang.clone()).or_default();
        for chunk in exs.chunks(batch_size.max(1)) {
            let tb = teacher_batch(chunk, &route)?;
            let enc = encode(&mut Eager, w, &tb.src)?;
            let logits = decoder_logits(&mut Eager, w, &route, &enc, &tb.tgt_in)?;
            for (r, &t) in tb.tgt_out.iter().flatten().enumerate() {
                let row = logits.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                slot.0 += usize::from(best == t as usize);
                slot.1 += 1;
            }
        }
    }
    Ok(acc)
}

/// Mean teacher-forced loss (no smoothing, no dropout) over `examples`.
pub fn evaluate_loss<F: Float>(w: &ModelWeights<F>, examples: &[Example], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut by_lang: BTreeMap<&Lang, Vec<&Example>> = BTreeMap::new();
    for e in examples {
        by_lang.entry(&e.tgt_lang).or_default().push(e);
    }
    for (lang, exs) in by_lang {
        let route = w.route(w.config.multi_decoder.then_some(lang))?;
        for chunk in exs.chunks(batch_size.max(1)) {
            let tb = teacher_batch(chunk, &route)?;
            let loss = batch_loss(&mut Eager, w, &route, &tb, 0.0)?;
            total += loss.item().as_f64() * tb.target_tokens() as f64;
            tokens += tb.target_tokens();
        }
    }
    if tokens == 0 {
        return Err(Error::Data("no target tokens to evaluate".into()));
    }
    Ok(total / tokens as f64)
}

/// Fine-tuning recipes: which surgery to apply and how to batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workflow {
    /// Same architecture, multi-parallel data.
    Multiparallel,
    /// One decoder per target language over filtered vocabularies.
    Multidecoder,
    /// Recurrent decoder with this many layers on the parent's encoder.
    Hybrid { dec_layers: usize },
}

impl Workflow {
    pub fn resets_lr(&self) -> bool {
        !matches!(self, Workflow::Multiparallel)
    }

    pub fn batching(&self, max_tokens: usize) -> BatchConfig {
        BatchConfig::new(max_tokens, matches!(self, Workflow::Multidecoder))
    }
}

/// Apply the workflow's surgery to a parent trainer state and return a
/// trainer ready to continue. Optimizer moments carry over for parameters
/// whose name survives the surgery.
pub fn start_finetune<F: Float>(
    parent: &ModelWeights<F>,
    parent_optimizer: Option<&Adam>,
    parent_step: u64,
    workflow: &Workflow,
    lang_vocabs: &BTreeMap<Lang, LangVocab>,
    config: TrainConfig,
) -> Result<Trainer<F>> {
    let weights = match workflow {
        Workflow::Multiparallel => parent.clone(),
        Workflow::Multidecoder => init_multi_decoder(parent, lang_vocabs)?,
        Workflow::Hybrid { dec_layers } => init_hybrid(parent, *dec_layers, config.seed)?,
    };
    let reset = config.lr_reset.unwrap_or_else(|| workflow.resets_lr());
    let mut trainer = Trainer::new(weights, config)?;
    trainer.step = parent_step;
    if let Some(opt) = parent_optimizer {
        let keep = |k: &String| trainer.weights.params().get(k).is_some_and(|t| t.numel() == opt.m[k].len());
        trainer.optimizer.m = opt.m.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        trainer.optimizer.v = opt.v.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        trainer.optimizer.t = opt.t;
    }
    if reset {
        trainer.reset_schedule();
    }
    trainer.config.max_updates += trainer.step;
    Ok(trainer)
}

/// Surgery plus training for `config.max_updates` further updates.
#[allow(clippy::too_many_arguments)]
pub fn finetune<F: Float, R: Rng>(
    parent: &ModelWeights<F>,
    workflow: &Workflow,
    lang_vocabs: &BTreeMap<Lang, LangVocab>,
    examples: &[Example],
    config: TrainConfig,
    rng: &mut R,
    log: &mut RunLog,
) -> Result<Trainer<F>> {
    let batching = workflow.batching(config.max_tokens);
    let mut t = start_finetune(parent, None, 0, workflow, lang_vocabs, config)?;
    train(&mut t, examples, &batching, rng, log, None)?;
    Ok(t)
}

const OPT_MAGIC: &[u8; 8] = b"LNMTOPT\0";

#[derive(Serialize, Deserialize)]
struct OptHeader {
    step: u64,
    schedule_start: u64,
    adam_t: u64,
    config: TrainConfig,
    moments: Vec<(String, usize)>,
}

/// Weights go to `{path}.weights`, optimizer state to `{path}.optim`.
pub fn save_checkpoint<F: Float>(path: &Path, t: &Trainer<F>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_weights(&path.with_extension("weights"), &t.weights)?;
    let opt_path = path.with_extension("optim");
    let header = OptHeader {
        step: t.step,
        schedule_start: t.schedule_start,
        adam_t: t.optimizer.t,
        config: t.config.clone(),
        moments: t.optimizer.m.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format("optimizer header", e.to_string()))?;
    let mut out = BufWriter::new(File::create(&opt_path).map_err(|e| Error::io(&opt_path, e))?);
    let io = |e| Error::io(&opt_path, e);
    out.write_all(OPT_MAGIC).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for (k, m) in &t.optimizer.m {
        for x in m.iter().chain(&t.optimizer.v[k]) {
            out.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<Trainer<F>> {
    let weights = load_weights::<F>(&path.with_extension("weights"))?;
    let opt_path = path.with_extension("optim");
    let mut r = BufReader::new(File::open(&opt_path).map_err(|e| Error::io(&opt_path, e))?);
    let io = |e| Error::io(&opt_path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != OPT_MAGIC {
        return Err(Error::format("optimizer state", "bad magic number"));
    }
    let mut n = [0u8; 8];
    r.read_exact(&mut n).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(n) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let h: OptHeader = serde_json::from_slice(&json).map_err(|e| Error::format("optimizer header", e.to_string()))?;
    let mut opt = Adam { t: h.adam_t, ..Default::default() };
    let mut read = |len: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io(&opt_path, e))?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    for (k, len) in h.moments {
        let m = read(len)?;
        let v = read(len)?;
        opt.m.insert(k.clone(), m);
        opt.v.insert(k, v);
    }
    Ok(Trainer { weights, config: h.config, optimizer: opt, step: h.step, schedule_start: h.schedule_start })
}

/// Largest relative difference between autodiff and central finite
/// differences over every parameter element.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// near-zero gradients from turning finite-difference round-off into large
/// ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn gradient_check(w: &ModelWeights<f64>, lang: Option<&Lang>, batch: &TeacherBatch, smoothing: f64, h: f64, floor: f64) -> Result<GradCheck> {
    let mut w = w.clone();
    w.config.dropout = 0.0;
    let route = w.route(lang)?;
    let mut g = Graph::inference();
    let loss = batch_loss(&mut g, &w, &route, batch, smoothing)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);
    let mut report = GradCheck { max_rel_error: 0.0, worst_param: String::new(), checked: 0 };
    let names: Vec<String> = w.params().keys().cloned().collect();
    for name in names {
        let Some(a) = analytic.get(&name) else { continue };
        let n = w.get(&name)?.numel();
        for i in 0..n {
            let orig = w.get(&name)?.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                Arc::make_mut(w.params_mut().get_mut(&name).expect("param exists")).data_mut()[i] = x;
                let route = w.route(lang)?;
                Ok(batch_loss(&mut Eager, &w, &route, batch, smoothing)?.item())
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            eval(orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a.data()[i], numeric, floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
