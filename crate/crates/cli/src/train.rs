//! Training, fine-tuning and weight surgery.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use lightnmt::corpus::{build_multiparallel, BatchItem, CodePosition, MultiCorpus, PairSampler, SamplingConfig, TokenizedPair};
use lightnmt::model::{
    filter_target_vocab, init_deep_shallow, init_hybrid, init_multi_decoder, save_weights, DecoderKind, Duplication, ModelConfig,
    ModelWeights, NormPlacement,
};
use lightnmt::subword::{BpeModel, LangVocab, EOS};
use lightnmt::training::{
    load_checkpoint, sample_examples, save_checkpoint, start_finetune, train, CheckpointPlan, Example, RunLog, TrainConfig, Trainer,
    Workflow,
};
use lightnmt::{Direction, Lang};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve, Flags};
use crate::error::{data, usage, CliResult};
use crate::files::{bpe_paths, ensure_dir, load_bpe, load_corpus, load_lang_vocabs, load_model};
use crate::manifest::Outcome;
use crate::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Toy,
    Base,
    Big,
}

/// Architecture settings, the `[model]` config section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub arch: Arch,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub decoder_kind: DecoderKind,
    pub norm: NormPlacement,
    pub lang_code_position: CodePosition,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            arch: Arch::Toy,
            enc_layers: 2,
            dec_layers: 2,
            d_model: None,
            ffn_dim: None,
            n_heads: None,
            decoder_kind: DecoderKind::Transformer,
            norm: NormPlacement::Post,
            lang_code_position: CodePosition::Encoder,
        }
    }
}

impl ModelSpec {
    fn build(&self, vocab_size: usize, languages: Vec<Lang>) -> ModelConfig {
        let mut c = match self.arch {
            Arch::Toy => {
                let mut c = ModelConfig::toy(self.enc_layers, self.dec_layers, vocab_size);
                c.d_model = 32;
                c.ffn_dim = 64;
                c.n_heads = 4;
                c
            }
            Arch::Base => ModelConfig::base(self.enc_layers, self.dec_layers, vocab_size),
            Arch::Big => ModelConfig::big(self.enc_layers, self.dec_layers, vocab_size),
        };
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.ffn_dim = self.ffn_dim.unwrap_or(c.ffn_dim);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.decoder_kind = self.decoder_kind;
        c.norm = self.norm;
        c.lang_code_position = self.lang_code_position;
        c.languages = languages;
        c
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// transformer or recurrent
    #[arg(long)]
    pub decoder: Option<String>,
    /// pre or post
    #[arg(long)]
    pub norm: Option<String>,
    /// Where the target-language code goes: encoder or decoder.
    #[arg(long)]
    pub code_position: Option<String>,
}

impl ModelFlags {
    fn flags(&self) -> Flags {
        let mut f = Flags::default();
        f.set("arch", self.arch)
            .set("enc_layers", self.enc_layers)
            .set("dec_layers", self.dec_layers)
            .set("d_model", self.d_model)
            .set("ffn_dim", self.ffn_dim)
            .set("n_heads", self.heads)
            .set("decoder_kind", self.decoder.clone())
            .set("norm", self.norm.clone())
            .set("lang_code_position", self.code_position.clone());
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Settings for the synthetic tasks (short warmup, high lr, no dropout).
    Toy,
    /// Full-scale defaults.
    Standard,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// Starting point before the config file and flags are applied.
    #[arg(long, value_enum, default_value = "standard")]
    pub preset: Preset,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub warmup_init_lr: Option<f64>,
    /// `beta1,beta2`
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub adam_betas: Option<Vec<f64>>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Updates to run (for fine-tuning: additional updates).
    #[arg(long)]
    pub max_updates: Option<u64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Restart the learning-rate schedule when fine-tuning (default: per workflow).
    #[arg(long)]
    pub lr_reset: Option<bool>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Log one row every this many updates.
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

impl TrainFlags {
    fn resolve(&self, defaults: Option<TrainConfig>, ctx: &Ctx) -> CliResult<TrainConfig> {
        let base = defaults.unwrap_or_else(|| match self.preset {
            Preset::Toy => TrainConfig::toy(),
            Preset::Standard => TrainConfig::default(),
        });
        let mut f = Flags::default();
        f.set("peak_lr", self.peak_lr)
            .set("warmup_updates", self.warmup)
            .set("warmup_init_lr", self.warmup_init_lr)
            .set("adam_betas", self.adam_betas.as_ref().map(|b| (b[0], b[1])))
            .set("adam_eps", self.adam_eps)
            .set("label_smoothing", self.label_smoothing)
            .set("clip_norm", self.clip_norm)
            .set("max_updates", self.max_updates)
            .set("dropout", self.dropout)
            .on("freeze_encoder", self.freeze_encoder)
            .set("lr_reset", self.lr_reset)
            .set("max_tokens", self.max_tokens)
            .set("checkpoint_every", self.checkpoint_every)
            .set("seed", Some(ctx.seed));
        let c = resolve(base, &ctx.file, "train", &f)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
pub struct SamplingFlags {
    /// Temperature T of the direction-sampling distribution.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Sample over every stored direction instead of English-centric.
    #[arg(long)]
    pub all_directions: bool,
    /// Examples to draw (default: as many as the data holds).
    #[arg(long)]
    pub samples: Option<usize>,
}

impl SamplingFlags {
    fn resolve(&self, default_all: bool, ctx: &Ctx) -> CliResult<SamplingConfig> {
        let mut f = Flags::default();
        f.set("temperature", self.temperature);
        if self.all_directions {
            f.set("english_centric", Some(false));
        }
        let defaults = SamplingConfig { english_centric: !default_all, ..Default::default() };
        let c = resolve(defaults, &ctx.file, "sampling", &f)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataFlags {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "train")]
    pub prefix: String,
    /// BPE prefix (`<bpe>.merges`, `<bpe>.vocab`).
    #[arg(long)]
    pub bpe: PathBuf,
    /// Segment target sides inside these language vocabularies (files or
    /// directories of `*.langvocab`).
    #[arg(long)]
    pub constrain_target: Vec<PathBuf>,
}

/// Tokenized examples keyed by direction: every stored direction in both
/// orientations.
struct Prepared {
    by_direction: BTreeMap<Direction, Vec<Example>>,
    too_long: usize,
}

fn prepare(
    corpus: &MultiCorpus,
    bpe: &BpeModel,
    position: CodePosition,
    max_positions: usize,
    constraints: &BTreeMap<Lang, LangVocab>,
) -> CliResult<Prepared> {
    let vocab = bpe.vocab();
    for l in corpus.languages() {
        if vocab.lang_code(&l).is_none() {
            return Err(data(format!("BPE vocabulary has no code token for language `{l}`")));
        }
    }
    let mut dirs: BTreeSet<Direction> = BTreeSet::new();
    for d in corpus.directions() {
        dirs.insert(d.clone());
        dirs.insert(d.reversed());
    }
    let mut by_direction = BTreeMap::new();
    let mut too_long = 0;
    for d in dirs {
        let mut exs = Vec::new();
        for (s, t) in corpus.lines(&d).unwrap_or_default() {
            let tgt = match constraints.get(&d.tgt) {
                Some(v) => bpe.ids(&bpe.tokenize_constrained(t, v)),
                None => bpe.encode(t),
            };
            let mut src = bpe.encode(s);
            src.push(EOS);
            let pair = TokenizedPair { src_lang: d.src.clone(), tgt_lang: d.tgt.clone(), src, tgt };
            let e = Example::from_pair(&pair, vocab, position)?;
            if e.src_len() > max_positions || e.tgt_len() > max_positions {
                too_long += 1;
                continue;
            }
            exs.push(e);
        }
        by_direction.insert(d, exs);
    }
    Ok(Prepared { by_direction, too_long })
}

fn draw(p: &Prepared, corpus: &MultiCorpus, sampling: &SamplingConfig, n: Option<usize>, rng: &mut ChaCha8Rng) -> CliResult<Vec<Example>> {
    let available: usize = p.by_direction.values().map(Vec::len).sum();
    let sampler = PairSampler::new(corpus, sampling)?;
    Ok(sample_examples(&p.by_direction, &sampler, n.unwrap_or(available), rng)?)
}

fn run_training(
    trainer: &mut Trainer<f32>,
    examples: &[Example],
    batching: &lightnmt::corpus::BatchConfig,
    out: &Path,
    log_every: u64,
    rng: &mut ChaCha8Rng,
) -> CliResult<(u64, Option<f64>)> {
    ensure_dir(out)?;
    let mut log = RunLog::new(Some(&out.join("log.tsv")), log_every)?;
    let plan = (trainer.config.checkpoint_every > 0)
        .then(|| CheckpointPlan { dir: out.join("checkpoints"), every: trainer.config.checkpoint_every });
    let updates = train(trainer, examples, batching, rng, &mut log, plan.as_ref())?;
    save_checkpoint(&out.join("model"), trainer)?;
    Ok((updates, log.history.last().map(|s| s.loss)))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    /// Output directory: `model.weights`, `model.optim`, `log.tsv`.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn train_cmd(a: &TrainArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let spec: ModelSpec = resolve(ModelSpec::default(), &ctx.file, "model", &a.model.flags())?;
    let tc = a.train.resolve(None, ctx)?;
    let sampling = a.sampling.resolve(false, ctx)?;
    let corpus = load_corpus(&a.data.corpus, &a.data.prefix)?;
    let bpe = load_bpe(&a.data.bpe)?;
    let (constraints, constraint_files) = load_lang_vocabs(&a.data.constrain_target)?;
    let langs: Vec<Lang> = corpus.languages().into_iter().collect();
    let mc = spec.build(bpe.vocab().len(), langs);
    let prepared = prepare(&corpus, &bpe, mc.lang_code_position, mc.max_positions, &constraints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let examples = draw(&prepared, &corpus, &sampling, a.sampling.samples, &mut rng)?;
    let weights = ModelWeights::<f32>::build(&mc, ctx.seed)?;
    let mut trainer = Trainer::new(weights, tc.clone())?;
    let (updates, loss) = run_training(&mut trainer, &examples, &lightnmt::corpus::BatchConfig::new(tc.max_tokens, false), &a.output, a.train.log_every, &mut rng)?;
    let (m, v) = bpe_paths(&a.data.bpe);
    Ok(Outcome::new(json!({"model": mc, "train": tc, "sampling": sampling}))
        .input(&a.data.corpus)
        .input(m)
        .input(v)
        .inputs(constraint_files)
        .output_dir(&a.output)
        .summary(json!({"updates": updates, "final_loss": loss, "examples": examples.len(), "skipped_too_long": prepared.too_long})))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WorkflowArg {
    Multiparallel,
    Multidecoder,
    Hybrid,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Parent weights; a sibling `.optim` file carries optimizer state over.
    #[arg(long)]
    pub parent: PathBuf,
    #[arg(long, value_enum)]
    pub workflow: WorkflowArg,
    /// Recurrent decoder depth for the hybrid workflow.
    #[arg(long, default_value_t = 2)]
    pub hybrid_layers: usize,
    /// Per-language vocabularies for the multidecoder workflow.
    #[arg(long)]
    pub lang_vocab: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub sampling: SamplingFlags,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn finetune_cmd(a: &FinetuneArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let optim = a.parent.with_extension("optim");
    let (parent, parent_opt, parent_step, parent_cfg) = if optim.exists() {
        let t = load_checkpoint::<f32>(&a.parent)?;
        (t.weights, Some(t.optimizer), t.step, Some(t.config))
    } else {
        (load_model(&a.parent)?, None, 0, None)
    };
    let workflow = match a.workflow {
        WorkflowArg::Multiparallel => Workflow::Multiparallel,
        WorkflowArg::Multidecoder => Workflow::Multidecoder,
        WorkflowArg::Hybrid => Workflow::Hybrid { dec_layers: a.hybrid_layers },
    };
    let mut base = parent_cfg;
    if let Some(b) = base.as_mut() {
        // the parent's budget is not this run's
        let preset = a.train.resolve(None, ctx)?;
        b.max_updates = preset.max_updates;
        b.lr_reset = None;
    }
    let tc = a.train.resolve(base, ctx)?;
    let multiparallel = workflow == Workflow::Multiparallel;
    let sampling = a.sampling.resolve(multiparallel, ctx)?;
    let mut corpus = load_corpus(&a.data.corpus, &a.data.prefix)?;
    if multiparallel {
        corpus = build_multiparallel(&corpus);
    }
    let bpe = load_bpe(&a.data.bpe)?;
    let (vocabs, vocab_files) = load_lang_vocabs(&a.lang_vocab)?;
    if workflow == Workflow::Multidecoder && vocabs.is_empty() {
        return Err(usage("the multidecoder workflow needs --lang-vocab"));
    }
    let (constraints, constraint_files) = load_lang_vocabs(&a.data.constrain_target)?;
    let prepared = prepare(&corpus, &bpe, parent.config.lang_code_position, parent.config.max_positions, &constraints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let examples = draw(&prepared, &corpus, &sampling, a.sampling.samples, &mut rng)?;
    let mut trainer = start_finetune(&parent, parent_opt.as_ref(), parent_step, &workflow, &vocabs, tc.clone())?;
    let (updates, loss) = run_training(&mut trainer, &examples, &workflow.batching(tc.max_tokens), &a.output, a.train.log_every, &mut rng)?;
    Ok(Outcome::new(json!({"workflow": workflow, "train": tc, "sampling": sampling, "parent_step": parent_step}))
        .input(&a.parent)
        .input(&a.data.corpus)
        .inputs(vocab_files)
        .inputs(constraint_files)
        .output_dir(&a.output)
        .summary(json!({
            "updates": updates,
            "final_loss": loss,
            "examples": examples.len(),
            "optimizer_state_carried": parent_opt.is_some(),
            "schedule_start": trainer.schedule_start,
        })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DupArg {
    Adjacent,
    Block,
}

#[derive(Subcommand, Debug)]
pub enum SurgeryKind {
    /// Double the encoder by layer duplication and keep the bottom decoder layers.
    DeepShallow {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "adjacent")]
        order: DupArg,
        #[arg(long, default_value_t = 1)]
        keep_dec: usize,
    },
    /// Replace the decoder with a freshly initialized recurrent one.
    Hybrid {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2)]
        dec_layers: usize,
    },
    /// One decoder per language over filtered target embeddings.
    MultiDecoder {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, required = true)]
        lang_vocab: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct SurgeryArgs {
    #[command(subcommand)]
    pub kind: SurgeryKind,
}

pub fn surgery(a: &SurgeryArgs, ctx: &mut Ctx) -> CliResult<Outcome> {
    let (input, output, cfg, extra, w) = match &a.kind {
        SurgeryKind::DeepShallow { input, output, order, keep_dec } => {
            let order = match order {
                DupArg::Adjacent => Duplication::Adjacent,
                DupArg::Block => Duplication::Block,
            };
            let w = init_deep_shallow(&load_model(input)?, order, *keep_dec)?;
            (input, output, json!({"kind": "deep-shallow", "order": order, "keep_dec": keep_dec}), vec![], w)
        }
        SurgeryKind::Hybrid { input, output, dec_layers } => {
            let w = init_hybrid(&load_model(input)?, *dec_layers, ctx.seed)?;
            (input, output, json!({"kind": "hybrid", "dec_layers": dec_layers}), vec![], w)
        }
        SurgeryKind::MultiDecoder { input, output, lang_vocab } => {
            let (vocabs, files) = load_lang_vocabs(lang_vocab)?;
            let w = init_multi_decoder(&load_model(input)?, &vocabs)?;
            (input, output, json!({"kind": "multi-decoder"}), files, w)
        }
    };
    crate::files::ensure_parent(output)?;
    save_weights(output, &w)?;
    let counts = lightnmt::model::count_params(&w);
    Ok(Outcome::new(cfg).input(input).inputs(extra).output(output).summary(json!({
        "enc_layers": w.config.enc_layers,
        "dec_layers": w.config.dec_layers,
        "encoder_params": counts.encoder,
        "decoder_params": counts.decoder,
        "embedding_params": counts.embedding,
    })))
}

#[derive(Args, Debug)]
pub struct FilterModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One vocabulary (single-decoder models) or one per language.
    #[arg(long, required = true)]
    pub lang_vocab: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn filter_model(a: &FilterModelArgs, _ctx: &mut Ctx) -> CliResult<Outcome> {
    let mut w = load_model(&a.model)?;
    let (vocabs, files) = load_lang_vocabs(&a.lang_vocab)?;
    if !w.config.multi_decoder && vocabs.len() != 1 {
        return Err(usage("a single-decoder model takes exactly one --lang-vocab"));
    }
    let before = w.route(vocabs.keys().next())?.vocab_size();
    let mut sizes = BTreeMap::new();
    for v in vocabs.values() {
        w = filter_target_vocab(&w, v)?;
        sizes.insert(v.language.to_string(), w.route(Some(&v.language))?.vocab_size());
    }
    crate::files::ensure_parent(&a.output)?;
    save_weights(&a.output, &w)?;
    Ok(Outcome::new(json!({}))
        .input(&a.model)
        .inputs(files)
        .output(&a.output)
        .summary(json!({"rows_before": before, "rows_after": sizes})))
}
