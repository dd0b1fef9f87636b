//! Task directories: `task.toml` plus `train.tsv`, `dev.tsv`, `test.tsv`.
//!
//! Line formats by task kind:
//! - sequence classification: `label<TAB>text`
//! - sequence tagging: `word<TAB>label`, sentences separated by blank lines
//! - word classification: `label<TAB>target_word_index<TAB>text`
//! - ranking: `query_id<TAB>is_selected<TAB>query<TAB>passage`, `is_selected` 0 or 1

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tokdetok_core::downstream::{EvalResult, Example, TaskKind, TaskSpec};

use crate::error::{Error, Result};
use crate::io;

pub const PARTITIONS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHeader {
    pub kind: TaskKind,
    #[serde(default)]
    pub labels: Vec<String>,
}

fn label_id(labels: &[String], l: &str, path: &Path, line: usize) -> Result<usize> {
    labels
        .iter()
        .position(|x| x == l)
        .ok_or_else(|| Error::format(path, line, format!("label `{l}` not declared in task.toml")))
}

pub fn parse_examples(kind: TaskKind, labels: &[String], text: &str, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    if kind == TaskKind::SequenceTagging {
        let (mut words, mut tags) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().chain(std::iter::once("")).enumerate() {
            if line.trim().is_empty() {
                if !words.is_empty() {
                    out.push(Example::Tagging {
                        words: std::mem::take(&mut words),
                        labels: std::mem::take(&mut tags),
                    });
                }
                continue;
            }
            let (w, l) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, i + 1, "expected `word<TAB>label`"))?;
            words.push(w.to_string());
            tags.push(label_id(labels, l, path, i + 1)?);
        }
        return Ok(out);
    }
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let n = i + 1;
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        let ex = match (kind, f.as_slice()) {
            (TaskKind::SequenceClassification, [l, t]) => Example::Sequence {
                text: t.to_string(),
                label: label_id(labels, l, path, n)?,
            },
            (TaskKind::WordClassification, [l, idx, t]) => Example::Word {
                text: t.to_string(),
                index: idx
                    .parse()
                    .map_err(|_| Error::format(path, n, format!("bad word index `{idx}`")))?,
                label: label_id(labels, l, path, n)?,
            },
            (TaskKind::Ranking, [q, s, query, passage]) => Example::Ranking {
                query_id: q.to_string(),
                selected: match *s {
                    "1" => true,
                    "0" => false,
                    _ => return Err(Error::format(path, n, format!("is_selected must be 0 or 1, got `{s}`"))),
                },
                query: query.to_string(),
                passage: passage.to_string(),
            },
            _ => {
                return Err(Error::format(path, n, format!("wrong field count for {}", kind.name())));
            }
        };
        out.push(ex);
    }
    Ok(out)
}

pub fn render_examples(labels: &[String], examples: &[Example]) -> String {
    let mut out = String::new();
    for ex in examples {
        let _ = match ex {
            Example::Sequence { text, label } => writeln!(out, "{}\t{text}", labels[*label]),
            Example::Word { text, index, label } => writeln!(out, "{}\t{index}\t{text}", labels[*label]),
            Example::Ranking {
                query_id,
                query,
                passage,
                selected,
            } => writeln!(out, "{query_id}\t{}\t{query}\t{passage}", *selected as u8),
            Example::Tagging { words, labels: tags } => {
                for (w, t) in words.iter().zip(tags) {
                    let _ = writeln!(out, "{w}\t{}", labels[*t]);
                }
                writeln!(out)
            }
        };
    }
    out
}

pub fn read_task(dir: &Path) -> Result<TaskSpec> {
    let hp = dir.join("task.toml");
    let header: TaskHeader = toml::from_str(&io::read_string(&hp)?).map_err(|e| Error::Config {
        path: hp.clone(),
        msg: e.to_string(),
    })?;
    let mut parts = Vec::with_capacity(3);
    for p in PARTITIONS {
        let path = dir.join(format!("{p}.tsv"));
        parts.push(if path.exists() {
            parse_examples(header.kind, &header.labels, &io::read_string(&path)?, &path)?
        } else {
            Vec::new()
        });
    }
    let test = parts.pop().unwrap_or_default();
    let dev = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    let spec = TaskSpec {
        kind: header.kind,
        labels: header.labels,
        train,
        dev,
        test,
    };
    spec.validate().map_err(|e| Error::Config {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(spec)
}

pub fn write_task(dir: &Path, task: &TaskSpec) -> Result<()> {
    let header = TaskHeader {
        kind: task.kind,
        labels: task.labels.clone(),
    };
    let toml = toml::to_string(&header).map_err(|e| Error::Invalid {
        field: "task",
        reason: e.to_string(),
    })?;
    io::write_string(&dir.join("task.toml"), &toml)?;
    for (p, exs) in PARTITIONS.iter().zip([&task.train, &task.dev, &task.test]) {
        io::write_string(&dir.join(format!("{p}.tsv")), &render_examples(&task.labels, exs))?;
    }
    Ok(())
}

pub fn partition<'a>(task: &'a TaskSpec, name: &str) -> Result<&'a [Example]> {
    match name {
        "train" => Ok(&task.train),
        "dev" => Ok(&task.dev),
        "test" => Ok(&task.test),
        _ => Err(Error::Invalid {
            field: "partition",
            reason: format!("expected train, dev or test, got `{name}`"),
        }),
    }
}

pub const RESULTS_HEADER: &str = "setup\ttask\tpartition\tmetric\tvalue\tepoch\tseed\n";

pub fn render_results(rows: &[EvalResult]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.setup, r.task, r.partition, r.metric, r.value, r.epoch, r.seed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind, labels: &[&str], train: Vec<Example>) -> TaskSpec {
        TaskSpec {
            kind,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            dev: train.clone(),
            test: Vec::new(),
            train,
        }
    }

    #[test]
    fn every_format_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let specs = [
            task(
                TaskKind::SequenceClassification,
                &["pos", "neg"],
                vec![Example::Sequence { text: "so good".into(), label: 0 }],
            ),
            task(
                TaskKind::SequenceTagging,
                &["O", "B-PER"],
                vec![
                    Example::Tagging { words: vec!["Ann".into(), "ran".into()], labels: vec![1, 0] },
                    Example::Tagging { words: vec!["ok".into()], labels: vec![0] },
                ],
            ),
            task(
                TaskKind::WordClassification,
                &["a", "b"],
                vec![Example::Word { text: "the zorp ran".into(), index: 1, label: 1 }],
            ),
            task(
                TaskKind::Ranking,
                &[],
                vec![
                    Example::Ranking { query_id: "q1".into(), query: "cats".into(), passage: "cats purr".into(), selected: true },
                    Example::Ranking { query_id: "q1".into(), query: "cats".into(), passage: "dogs bark".into(), selected: false },
                ],
            ),
        ];
        for (i, t) in specs.iter().enumerate() {
            let d = dir.path().join(i.to_string());
            write_task(&d, t).unwrap();
            assert_eq!(&read_task(&d).unwrap(), t);
        }
    }

    #[test]
    fn undeclared_labels_name_the_line() {
        let labels = vec!["pos".to_string()];
        let e = parse_examples(TaskKind::SequenceClassification, &labels, "pos\tok\nneg\tbad\n", Path::new("t.tsv"))
            .unwrap_err();
        assert!(e.to_string().contains("t.tsv:2"), "{e}");
    }
}
