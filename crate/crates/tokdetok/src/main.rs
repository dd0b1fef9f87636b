use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokdetok::config::{self, FinetuneRun, PretrainRun, Resolve, SecondPretrainRun, TokenizerRun};
use tokdetok::core::lm::Objective;
use tokdetok::core::tokenizer::Scheme;
use tokdetok::core::twopt::Agg;
use tokdetok::core::Real;
use tokdetok::{fixtures, pipeline, tasks, Error, Result};

/// Character-level word encoder/decoder retrofit for subword language models.
///
/// Log verbosity follows RUST_LOG (default `info`).
#[derive(Parser)]
#[command(name = "tokdetok", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE vocabulary from a corpus (one document per line).
    TrainTokenizer(TokenizerArgs),
    /// Print surface statistics (types, TTR, multitoks, token mass increase) per corpus.
    Stats(StatsArgs),
    /// First pre-training of the base language model.
    Pretrain(PretrainArgs),
    /// Second pre-training with Tok/Detok, or LM-only continuation with --lm-only.
    SecondPretrain(SecondPretrainArgs),
    /// Fine-tune a task head on a task directory and report dev/test metrics.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned task model.
    Eval(EvalArgs),
    /// Generate words with Detok from sphere-sampled vectors.
    SampleDetok(SampleArgs),
    /// Per-parameter Euclidean distances between two checkpoints.
    ParamDiff(PairArgs),
    /// Discrepancy between two vocabularies.
    VocabDiff(PairArgs),
    /// Regenerate the bundled synthetic corpora and task fixtures.
    MakeFixtures(FixtureArgs),
}

#[derive(Args)]
struct TokenizerArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory (receives vocab.txt).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Target number of non-special tokens.
    #[arg(long)]
    size: Option<usize>,
    /// continuation_mark or space_prefix.
    #[arg(long)]
    scheme: Option<String>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Also write the rows as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(required = true)]
    corpora: Vec<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// masked or autoregressive.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    mask_fraction: Option<Real>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<Real>,
    #[arg(long)]
    warmup_fraction: Option<Real>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    clip_norm: Option<Real>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct SecondPretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Base checkpoint; without it a fresh model is built from --vocab.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue LM training only (the none_plus_2pt baseline).
    #[arg(long)]
    lm_only: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Usage policy, e.g. all_multi, random_fraction:0.15, every_kth:4.
    #[arg(long)]
    usage_policy: Option<String>,
    /// Embedding-loss policy.
    #[arg(long)]
    loss_policy: Option<String>,
    /// Generation policy.
    #[arg(long)]
    generation_policy: Option<String>,
    /// max_pool, mean_pool or first_token.
    #[arg(long)]
    agg: Option<String>,
    #[arg(long)]
    weight_lm: Option<Real>,
    #[arg(long)]
    weight_embedding: Option<Real>,
    #[arg(long)]
    weight_generation: Option<Real>,
    #[arg(long)]
    cycle_interval: Option<usize>,
    #[arg(long)]
    cycle_pool_size: Option<usize>,
    #[arg(long)]
    cycle_batch_size: Option<usize>,
    #[arg(long)]
    tok_char_dim: Option<usize>,
    #[arg(long)]
    tok_channels: Option<usize>,
    #[arg(long)]
    tok_max_word_len: Option<usize>,
    #[arg(long)]
    detok_hidden: Option<usize>,
    #[arg(long)]
    detok_layers: Option<usize>,
    #[arg(long)]
    detok_max_len: Option<usize>,
    /// Number of Detok samples written after training.
    #[arg(long)]
    monitor: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Task directory holding task.toml and train/dev/test.tsv.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// none, none_plus_2pt, scaffolding, stochastic[:P], all_no_suff, all_multi.
    #[arg(long)]
    setup: Option<String>,
    /// Freeze the pre-trained body and train only the head.
    #[arg(long)]
    no_ft: bool,
    /// Add the Tok embedding loss during fine-tuning.
    #[arg(long)]
    embedding_loss: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    body_lr: Option<Real>,
    #[arg(long)]
    head_lr: Option<Real>,
    #[arg(long)]
    warmup_fraction: Option<Real>,
    #[arg(long)]
    patience: Option<usize>,
    /// Score tagging by BIO spans instead of per token.
    #[arg(long)]
    bio_spans: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: PathBuf,
    /// Task model written by `finetune`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test", value_delimiter = ',')]
    partitions: Vec<String>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample characters instead of greedy decoding.
    #[arg(long)]
    sample: bool,
}

#[derive(Args)]
struct PairArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value = "data")]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1 << 20)]
    corpus_bytes: usize,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_with<T>(field: &'static str, s: &str, f: impl FnOnce(&str) -> Option<T>) -> Result<T> {
    f(s).ok_or_else(|| Error::Invalid {
        field,
        reason: format!("cannot parse `{s}`"),
    })
}

fn objective(s: &str) -> Option<Objective> {
    match s {
        "masked" => Some(Objective::Masked),
        "autoregressive" => Some(Objective::Autoregressive),
        _ => None,
    }
}

fn agg(s: &str) -> Option<Agg> {
    match s {
        "max_pool" => Some(Agg::MaxPool),
        "mean_pool" => Some(Agg::MeanPool),
        "first_token" => Some(Agg::FirstToken),
        _ => None,
    }
}

fn apply_model(m: &mut config::ModelSpec, f: ModelFlags) -> Result<()> {
    set(&mut m.d, f.d);
    set(&mut m.layers, f.layers);
    set(&mut m.heads, f.heads);
    set(&mut m.ff_dim, f.ff_dim);
    set(&mut m.max_seq_len, f.max_seq_len);
    set(&mut m.mask_fraction, f.mask_fraction);
    if let Some(o) = f.objective {
        m.objective = parse_with("objective", &o, objective)?;
    }
    Ok(())
}

fn apply_train(t: &mut tokdetok::core::twopt::TrainConfig, f: TrainFlags) {
    set(&mut t.lr, f.lr);
    set(&mut t.warmup_fraction, f.warmup_fraction);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.epochs, f.epochs);
    if f.max_steps.is_some() {
        t.max_steps = f.max_steps;
    }
    if let Some(c) = f.clip_norm {
        t.adam.clip_norm = (c > 0.0).then_some(c);
    }
}

fn resolved<T: Resolve>(mut cfg: T) -> T {
    cfg.resolve();
    cfg
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Invalid {
        field: "output",
        reason: e.to_string(),
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTokenizer(a) => {
            let mut c: TokenizerRun = config::load(a.config.as_deref())?;
            set(&mut c.seed, a.seed);
            set(&mut c.corpus, a.corpus);
            set(&mut c.output, a.output);
            set(&mut c.size, a.size);
            if let Some(s) = a.scheme {
                c.scheme = Scheme::parse(&s)?;
            }
            let v = pipeline::train_tokenizer(&resolved(c))?;
            println!("{} tokens, {} merges", v.len(), v.merges().len());
        }
        Command::Stats(a) => {
            let rows = pipeline::stats(&a.corpora, &a.vocab)?;
            print!("{}", pipeline::render_stats(&rows));
            if let Some(p) = a.json {
                tokdetok::io::write_string(&p, &print_json(&rows)?)?;
            }
        }
        Command::Pretrain(a) => {
            let mut c: PretrainRun = config::load(a.config.as_deref())?;
            set(&mut c.seed, a.seed);
            set(&mut c.corpus, a.corpus);
            set(&mut c.vocab, a.vocab);
            set(&mut c.output, a.output);
            apply_model(&mut c.model, a.model)?;
            apply_train(&mut c.train, a.train);
            pipeline::pretrain(&resolved(c))?;
        }
        Command::SecondPretrain(a) => {
            let mut c: SecondPretrainRun = config::load(a.config.as_deref())?;
            set(&mut c.seed, a.seed);
            set(&mut c.corpus, a.corpus);
            if a.checkpoint.is_some() {
                c.checkpoint = a.checkpoint;
            }
            if a.vocab.is_some() {
                c.vocab = a.vocab;
            }
            set(&mut c.output, a.output);
            c.lm_only |= a.lm_only;
            apply_model(&mut c.model, a.model)?;
            apply_train(&mut c.twopt.train, a.train);
            let p = &mut c.twopt.policies;
            for (slot, flag) in [
                (&mut p.usage, a.usage_policy),
                (&mut p.loss, a.loss_policy),
                (&mut p.generation, a.generation_policy),
            ] {
                if let Some(s) = flag {
                    *slot = config::parse_policy(&s, c.seed)?;
                }
            }
            if let Some(s) = a.agg {
                c.twopt.agg = parse_with("agg", &s, agg)?;
            }
            let w = &mut c.twopt.weights;
            set(&mut w.lm, a.weight_lm);
            set(&mut w.embedding, a.weight_embedding);
            set(&mut w.generation, a.weight_generation);
            let cy = &mut c.twopt.cycle;
            set(&mut cy.interval, a.cycle_interval);
            set(&mut cy.pool_size, a.cycle_pool_size);
            set(&mut cy.batch_size, a.cycle_batch_size);
            set(&mut c.tok.char_dim, a.tok_char_dim);
            set(&mut c.tok.channels, a.tok_channels);
            set(&mut c.tok.max_word_len, a.tok_max_word_len);
            set(&mut c.detok.hidden, a.detok_hidden);
            set(&mut c.detok.layers, a.detok_layers);
            set(&mut c.detok.max_len, a.detok_max_len);
            set(&mut c.monitor, a.monitor);
            pipeline::second_pretrain(&resolved(c))?;
        }
        Command::Finetune(a) => {
            let mut c: FinetuneRun = config::load(a.config.as_deref())?;
            set(&mut c.seed, a.seed);
            set(&mut c.task, a.task);
            set(&mut c.checkpoint, a.checkpoint);
            set(&mut c.output, a.output);
            if let Some(s) = a.setup {
                c.setup.kind = config::parse_setup(&s, c.seed)?;
            }
            if a.no_ft {
                c.setup.fine_tune_body = false;
            }
            c.setup.embedding_loss |= a.embedding_loss;
            let h = &mut c.hyper;
            set(&mut h.epochs, a.epochs);
            set(&mut h.batch_size, a.batch_size);
            set(&mut h.body_lr, a.body_lr);
            set(&mut h.head_lr, a.head_lr);
            set(&mut h.warmup_fraction, a.warmup_fraction);
            set(&mut h.patience, a.patience);
            h.bio_spans |= a.bio_spans;
            let out = pipeline::finetune(&resolved(c))?;
            print!("{}{}", tasks::RESULTS_HEADER, tasks::render_results(&out.rows));
        }
        Command::Eval(a) => {
            let rows = pipeline::eval(&a.task, &a.model, &a.partitions, a.batch_size)?;
            print!("{}{}", tasks::RESULTS_HEADER, tasks::render_results(&rows));
        }
        Command::SampleDetok(a) => {
            for w in pipeline::sample_detok(&a.checkpoint, a.n, a.seed, !a.sample)? {
                println!("{w}");
            }
        }
        Command::ParamDiff(a) => {
            print!("{}", pipeline::render_param_diff(&pipeline::param_diff(&a.a, &a.b)?));
        }
        Command::VocabDiff(a) => {
            println!("{}", print_json(&pipeline::vocab_diff(&a.a, &a.b)?)?);
        }
        Command::MakeFixtures(a) => {
            fixtures::write_all(
                &a.output,
                a.seed,
                fixtures::FixtureSizes {
                    corpus_bytes: a.corpus_bytes,
                },
            )?;
            println!("fixtures written to {}", display(&a.output));
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
