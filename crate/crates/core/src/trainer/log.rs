//! Structured training log: one JSON object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::HeadId;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Step0,
    Cdl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    /// One optimizer step. `head` is set during step 0, where the heads train
    /// separately; joint steps leave it empty.
    Step {
        phase: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head: Option<HeadId>,
        cdl_step: usize,
        epoch: usize,
        batch: usize,
        global_step: u64,
        loss: LossBreakdown,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean_s: Option<f64>,
        lr_encoder: f64,
        lr_fc: f64,
    },
    EpochEnd {
        phase: Phase,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head: Option<HeadId>,
        cdl_step: usize,
        epoch: usize,
        batches: usize,
    },
    /// Pseudo-label sets regenerated for both heads.
    PseudoLabels { cdl_step: usize, videos: usize },
    /// Per-video mean surrogate variance on the external corpus.
    Uncertainty {
        cdl_step: usize,
        video_mean_s: BTreeMap<String, f64>,
    },
    Checkpoint { cdl_step: usize, path: String },
}

/// Keeps every record in memory and optionally mirrors it to a JSONL file.
#[derive(Default)]
pub struct TrainLog {
    records: Vec<LogRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), BufWriter::new(file))),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&record).map_err(|e| Error::Json {
                context: "log record".into(),
                source: e,
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Loss breakdowns of every optimizer step, in order.
    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

impl Drop for TrainLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads a JSONL log written by [`TrainLog::to_file`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{} line {}", path.display(), i + 1),
            source: e,
        })?);
    }
    Ok(out)
}
