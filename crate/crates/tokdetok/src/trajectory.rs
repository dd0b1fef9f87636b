//! Append-only loss trajectories, one tab-separated row per batch.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tokdetok_core::twopt::BatchLossReport;
use tokdetok_core::Real;

use crate::error::{Error, Result};

pub const HEADER: &str = "step\tkind\tlm\tembedding\tgeneration\tcycle\ttotal\tlr\tseed";

pub fn render_row(r: &BatchLossReport) -> String {
    let opt = |x: Option<Real>| x.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.step,
        r.kind.name(),
        opt(r.lm_loss),
        opt(r.embedding_loss),
        opt(r.generation_loss),
        opt(r.cycle_loss),
        r.total,
        r.lr,
        r.seed
    )
}

pub struct TrajectoryWriter {
    path: PathBuf,
    out: BufWriter<File>,
    rows: usize,
}

impl TrajectoryWriter {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            rows: 0,
        };
        if fresh {
            w.line(HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn push(&mut self, r: &BatchLossReport) -> Result<()> {
        self.rows += 1;
        self.line(&render_row(r))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.rows)
    }
}

/// A parsed trajectory row; empty loss columns are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub step: usize,
    pub kind: String,
    pub lm: Option<Real>,
    pub embedding: Option<Real>,
    pub generation: Option<Real>,
    pub cycle: Option<Real>,
    pub total: Real,
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format(path, i + 1, "malformed trajectory row");
        if f.len() != 9 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<Real>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        rows.push(Row {
            step: f[0].parse().map_err(|_| bad())?,
            kind: f[1].to_string(),
            lm: opt(f[2])?,
            embedding: opt(f[3])?,
            generation: opt(f[4])?,
            cycle: opt(f[5])?,
            total: f[6].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}
