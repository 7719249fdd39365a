//! `lightnmt`: every workflow of the toolkit behind one binary.

mod config;
mod data;
mod error;
mod files;
mod manifest;
mod run;
mod train;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::ConfigFile;
use crate::error::{CliError, CliResult};
use crate::manifest::{unix_now, write_manifest, Outcome, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "lightnmt", version, about = "Multilingual NMT with light decoders: data, training, surgery, decoding, evaluation")]
struct Cli {
    /// Seed for every stochastic step of the run.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (kernels are single-threaded; benchmarks always use 1).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// TOML file with [model], [train], [sampling], [decode], [bleu] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a joint BPE model over all languages.
    LearnBpe(data::LearnBpeArgs),
    /// Segment a text file with a BPE model.
    ApplyBpe(data::ApplyBpeArgs),
    /// Count wordpiece and character frequencies per language.
    CountFreqs(data::CountFreqsArgs),
    /// Build per-language target vocabularies from frequency tables.
    BuildVocab(data::BuildVocabArgs),
    /// Restrict a model's output projection to a language vocabulary.
    FilterModel(train::FilterModelArgs),
    /// Join English-centric data into non-English directions.
    MakeMultiparallel(data::MultiparallelArgs),
    /// Write a synthetic multilingual corpus (train and test splits).
    SynthCorpus(data::SynthArgs),
    /// Train a model from scratch.
    Train(train::TrainArgs),
    /// Continue training a parent model under a fine-tuning workflow.
    Finetune(train::FinetuneArgs),
    /// Initialize one architecture from another.
    Surgery(train::SurgeryArgs),
    /// Translate a file or every direction of a corpus.
    Translate(run::TranslateArgs),
    /// Add synthetic source noise.
    Noise(data::NoiseArgs),
    /// Score hypotheses with BLEU, chrF or consistency.
    Score(run::ScoreArgs),
    /// Measure decoding speed or per-component time.
    Benchmark(run::BenchmarkArgs),
    /// Average per-direction scores into English, out of English and non-English.
    Scoreboard(run::ScoreboardArgs),
}

impl Command {
    fn name(&self) -> String {
        let s = format!("{self:?}");
        let head = s.split(['(', ' ']).next().unwrap_or("");
        let mut out = String::new();
        for (i, c) in head.chars().enumerate() {
            if c.is_uppercase() && i > 0 {
                out.push('-');
            }
            out.push(c.to_ascii_lowercase());
        }
        out
    }
}

/// Settings shared by every command.
pub struct Ctx {
    pub seed: u64,
    pub threads: usize,
    pub file: ConfigFile,
}

fn dispatch(cmd: &Command, ctx: &mut Ctx) -> CliResult<Outcome> {
    match cmd {
        Command::LearnBpe(a) => data::learn_bpe(a, ctx),
        Command::ApplyBpe(a) => data::apply_bpe(a, ctx),
        Command::CountFreqs(a) => data::count_freqs(a, ctx),
        Command::BuildVocab(a) => data::build_vocab(a, ctx),
        Command::FilterModel(a) => train::filter_model(a, ctx),
        Command::MakeMultiparallel(a) => data::make_multiparallel(a, ctx),
        Command::SynthCorpus(a) => data::synth(a, ctx),
        Command::Train(a) => train::train_cmd(a, ctx),
        Command::Finetune(a) => train::finetune_cmd(a, ctx),
        Command::Surgery(a) => train::surgery(a, ctx),
        Command::Translate(a) => run::translate(a, ctx),
        Command::Noise(a) => data::noise(a, ctx),
        Command::Score(a) => run::score(a, ctx),
        Command::Benchmark(a) => run::benchmark(a, ctx),
        Command::Scoreboard(a) => run::scoreboard(a, ctx),
    }
}

fn real_main() -> CliResult<()> {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be >= 1".into()));
    }
    let mut ctx = Ctx { seed: cli.seed, threads: cli.threads, file: ConfigFile::load(cli.config.as_deref())? };
    let started = unix_now();
    let clock = Instant::now();
    let outcome = dispatch(&cli.command, &mut ctx)?;
    let mut inputs = outcome.inputs;
    if let Some(c) = &cli.config {
        inputs.push(c.clone());
    }
    let manifest = RunManifest {
        command: cli.command.name(),
        argv,
        config: outcome.config,
        seed: ctx.seed,
        threads: ctx.threads,
        inputs,
        outputs: outcome.outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        wall_seconds: clock.elapsed().as_secs_f64(),
        summary: outcome.summary,
    };
    let path = cli.manifest.or(outcome.manifest_path).unwrap_or_else(|| PathBuf::from("manifest.json"));
    write_manifest(&path, &manifest)
}

fn main() {
    if let Err(e) = real_main() {
        let msg = e.to_string();
        let msg = msg.trim_end();
        if msg.starts_with("error:") {
            eprintln!("{msg}");
        } else {
            eprintln!("error: {msg}");
        }
        std::process::exit(e.exit_code());
    }
}
