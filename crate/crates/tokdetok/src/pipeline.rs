//! The pipeline stages behind each subcommand. Every stage takes a resolved
//! run config, writes its artifacts plus the config snapshot into the run's
//! output directory, and returns what it produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tokdetok_core::detok::GenMode;
use tokdetok_core::downstream::{self, EvalResult, TaskModel};
use tokdetok_core::model::{Bundle, Stage};
use tokdetok_core::stats::{CorpusStats, StatsAccumulator};
use tokdetok_core::tokenizer::{self, Vocabulary};
use tokdetok_core::twopt::{self, BatchLossReport, ParamDistance, TrainSummary};
use rand::RngCore;
use tokdetok_core::{rng, Real};

use crate::config::{self, FinetuneRun, PretrainRun, SecondPretrainRun, TokenizerRun};
use crate::error::{Error, Result};
use crate::trajectory::TrajectoryWriter;
use crate::{checkpoint, io, tasks, vocab_file};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectory.tsv";
pub const RESULTS_FILE: &str = "results.tsv";
pub const SAMPLES_FILE: &str = "detok_samples.txt";

fn require_file(field: &'static str, path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Invalid {
            field,
            reason: "no path given".into(),
        });
    }
    if !path.exists() {
        return Err(Error::Invalid {
            field,
            reason: format!("{} does not exist", path.display()),
        });
    }
    Ok(())
}

fn require_output(dir: &Path) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Err(Error::Invalid {
            field: "output",
            reason: "no output directory given".into(),
        });
    }
    io::create_dir(dir)
}

pub fn train_tokenizer(run: &TokenizerRun) -> Result<Vocabulary> {
    require_file("corpus", &run.corpus)?;
    require_output(&run.output)?;
    let lines = io::read_lines(&run.corpus)?;
    let vocab = tokenizer::train_bpe(lines.iter().map(String::as_str), run.size, run.scheme)?;
    vocab_file::write(&run.output.join(VOCAB_FILE), &vocab)?;
    config::snapshot(&run.output, run)?;
    log::info!("vocabulary of {} tokens written to {}", vocab.len(), run.output.display());
    Ok(vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub corpus: String,
    #[serde(flatten)]
    pub stats: CorpusStats,
}

pub fn stats(corpora: &[PathBuf], vocab: &Path) -> Result<Vec<StatsRow>> {
    let v = vocab_file::read(vocab)?;
    corpora
        .iter()
        .map(|p| {
            let mut acc = StatsAccumulator::default();
            for l in io::read_string(p)?.lines() {
                acc.add_line(l);
            }
            Ok(StatsRow {
                corpus: p.display().to_string(),
                stats: acc.finish(&v)?,
            })
        })
        .collect()
}

pub fn render_stats(rows: &[StatsRow]) -> String {
    let mut out = String::from("corpus\tinstances\ttokens\ttypes\tttr\tmultitoks\tmass_increase\n");
    for r in rows {
        let s = &r.stats;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.3}\t{:.2}%\t{:.2}%",
            r.corpus,
            s.instances,
            s.word_tokens,
            s.word_types,
            s.ttr,
            100.0 * s.multitok_type_rate,
            100.0 * s.token_mass_increase
        );
    }
    out
}

fn corpus_for(vocab: &Vocabulary, corpus: &Path, max_seq_len: usize) -> Result<Vec<tokenizer::TokenSequence>> {
    require_file("corpus", corpus)?;
    let lines = io::read_lines(corpus)?;
    let seqs = twopt::corpus_sequences(vocab, lines.iter().map(String::as_str), max_seq_len);
    if seqs.is_empty() {
        return Err(Error::Invalid {
            field: "corpus",
            reason: format!("{} holds no text", corpus.display()),
        });
    }
    Ok(seqs)
}

fn fresh_trajectory(dir: &Path) -> Result<TrajectoryWriter> {
    let path = dir.join(TRAJECTORY_FILE);
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    TrajectoryWriter::open(&path)
}

fn train_with_log(
    dir: &Path,
    mut f: impl FnMut(&mut dyn FnMut(&BatchLossReport) -> tokdetok_core::Result<()>) -> tokdetok_core::Result<TrainSummary>,
) -> Result<TrainSummary> {
    let mut traj = fresh_trajectory(dir)?;
    let mut io_err = None;
    let mut sink = |r: &BatchLossReport| {
        if r.step % 50 == 0 || r.step == 1 {
            log::info!("step {} {} loss {:.4}", r.step, r.kind.name(), r.total);
        }
        if let Err(e) = traj.push(r) {
            io_err = Some(e);
            return Err(tokdetok_core::Error::Parse("trajectory write failed".into()));
        }
        Ok(())
    };
    let res = f(&mut sink);
    if let Some(e) = io_err {
        return Err(e);
    }
    let summary = res?;
    traj.finish()?;
    Ok(summary)
}

pub fn pretrain(run: &PretrainRun) -> Result<Bundle> {
    require_file("vocab", &run.vocab)?;
    require_output(&run.output)?;
    let vocab = vocab_file::read(&run.vocab)?;
    let cfg = run.model.with_vocab(vocab.len());
    cfg.validate()?;
    run.train.validate()?;
    let seqs = corpus_for(&vocab, &run.corpus, cfg.max_seq_len)?;
    let mut bundle = Bundle::new_base(vocab, cfg, run.seed)?;
    let s = train_with_log(&run.output, |sink| twopt::run_lm(&mut bundle, &seqs, &run.train, sink))?;
    log::info!("pre-training finished after {} steps", s.lm_steps);
    checkpoint::save_bundle(&run.output.join(MODEL_FILE), &bundle)?;
    config::snapshot(&run.output, run)?;
    Ok(bundle)
}

pub fn second_pretrain(run: &SecondPretrainRun) -> Result<Bundle> {
    require_output(&run.output)?;
    let mut bundle = match (&run.checkpoint, &run.vocab) {
        (Some(c), _) => {
            require_file("checkpoint", c)?;
            checkpoint::load_bundle(c)?
        }
        (None, Some(v)) => {
            require_file("vocab", v)?;
            let vocab = vocab_file::read(v)?;
            let cfg = run.model.with_vocab(vocab.len());
            cfg.validate()?;
            Bundle::new_base(vocab, cfg, run.seed)?
        }
        (None, None) => {
            return Err(Error::Invalid {
                field: "checkpoint",
                reason: "give a base checkpoint or a vocabulary to start from".into(),
            })
        }
    };
    if bundle.stage == Stage::TokDetok && run.lm_only {
        return Err(Error::Invalid {
            field: "lm_only",
            reason: "checkpoint already carries Tok/Detok".into(),
        });
    }
    let seqs = corpus_for(&bundle.vocab, &run.corpus, bundle.lm.config.max_seq_len)?;
    let s = if run.lm_only {
        let s = train_with_log(&run.output, |sink| twopt::run_lm(&mut bundle, &seqs, &run.twopt.train, sink))?;
        bundle.stage = Stage::LmContinued;
        s
    } else {
        bundle.attach_tokdetok(run.tok.clone(), run.detok.clone(), run.seed)?;
        train_with_log(&run.output, |sink| twopt::run_2pt(&mut bundle, &seqs, &run.twopt, sink))?
    };
    log::info!(
        "second pre-training finished: {} LM steps, {} cycle batches",
        s.lm_steps,
        s.cycle_batches
    );
    checkpoint::save_bundle(&run.output.join(MODEL_FILE), &bundle)?;
    if run.monitor > 0 && !run.lm_only {
        let words = twopt::sample_detok_monitor(&bundle, run.monitor, run.seed)?;
        io::write_string(&run.output.join(SAMPLES_FILE), &(words.join("\n") + "\n"))?;
    }
    config::snapshot(&run.output, run)?;
    Ok(bundle)
}

#[derive(Debug, Clone)]
pub struct FinetuneArtifacts {
    pub model: TaskModel,
    pub rows: Vec<EvalResult>,
    pub best_epoch: usize,
}

pub fn finetune(run: &FinetuneRun) -> Result<FinetuneArtifacts> {
    require_file("task", &run.task)?;
    require_file("checkpoint", &run.checkpoint)?;
    require_output(&run.output)?;
    let task = tasks::read_task(&run.task)?;
    let bundle = checkpoint::load_bundle(&run.checkpoint)?;
    let model = TaskModel::new(bundle, run.setup.clone(), &task, run.seed)?;
    let out = downstream::finetune(model, &task, &run.hyper)?;
    let mut rows = out.dev.clone();
    for r in &mut rows {
        r.task = task_name(&run.task);
    }
    if !task.test.is_empty() {
        let value = out.model.evaluate(&task.test, &run.hyper)?;
        rows.push(EvalResult {
            setup: run.setup.kind.name().into(),
            task: task_name(&run.task),
            partition: "test".into(),
            metric: task.kind.metric().into(),
            value,
            epoch: out.best_epoch,
            seed: run.seed,
        });
    }
    checkpoint::save_task(&run.output.join(MODEL_FILE), &out.model)?;
    io::write_string(
        &run.output.join(RESULTS_FILE),
        &format!("{}{}", tasks::RESULTS_HEADER, tasks::render_results(&rows)),
    )?;
    config::snapshot(&run.output, run)?;
    Ok(FinetuneArtifacts {
        model: out.model,
        rows,
        best_epoch: out.best_epoch,
    })
}

fn task_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into())
}

pub fn eval(task_dir: &Path, model_path: &Path, partitions: &[String], batch_size: usize) -> Result<Vec<EvalResult>> {
    let task = tasks::read_task(task_dir)?;
    let model = checkpoint::load_task(model_path)?;
    if model.kind != task.kind {
        return Err(Error::Invalid {
            field: "task",
            reason: format!("model was trained for {}, task is {}", model.kind.name(), task.kind.name()),
        });
    }
    let cfg = downstream::FinetuneConfig {
        batch_size,
        ..Default::default()
    };
    partitions
        .iter()
        .map(|p| {
            let value = model.evaluate(tasks::partition(&task, p)?, &cfg)?;
            Ok(EvalResult {
                setup: model.setup.kind.name().into(),
                task: task_name(task_dir),
                partition: p.clone(),
                metric: task.kind.metric().into(),
                value,
                epoch: 0,
                seed: 0,
            })
        })
        .collect()
}

/// Detok generations from `n` sphere-sampled vectors.
pub fn sample_detok(checkpoint: &Path, n: usize, seed: u64, greedy: bool) -> Result<Vec<String>> {
    let bundle = checkpoint::load_bundle(checkpoint)?;
    let detok = bundle.detok()?;
    let v = twopt::sample_sphere_vectors(n, bundle.lm.config.d, seed);
    let mode = if greedy {
        GenMode::Greedy
    } else {
        GenMode::Sample(rng::substream(seed, "sampling").next_u64())
    };
    Ok(detok.generate(&bundle.store, &bundle.chars, &v, detok.config.max_len, mode)?)
}

pub fn param_diff(a: &Path, b: &Path) -> Result<Vec<ParamDistance>> {
    let ba = checkpoint::load_bundle(a)?;
    let bb = checkpoint::load_bundle(b)?;
    Ok(twopt::param_diff(&ba.store, &bb.store)?)
}

pub fn render_param_diff(rows: &[ParamDistance]) -> String {
    let mut out = String::from("parameter\tlayer\tdistance\n");
    for r in rows {
        let layer = r.layer.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{}\t{layer}\t{}", r.name, r.distance);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocabDiff {
    pub size_a: usize,
    pub size_b: usize,
    pub unshared: usize,
    pub discrepancy: Real,
}

pub fn vocab_diff(a: &Path, b: &Path) -> Result<VocabDiff> {
    let va = vocab_file::read(a)?;
    let vb = vocab_file::read(b)?;
    Ok(VocabDiff {
        size_a: va.len(),
        size_b: vb.len(),
        unshared: tokenizer::unshared_count(&va, &vb),
        discrepancy: tokenizer::vocab_discrepancy(&va, &vb)?,
    })
}
