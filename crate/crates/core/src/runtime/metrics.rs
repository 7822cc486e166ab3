//! JSON-lines metrics. Records carry no wall-clock fields, so equal seeds
//! give byte-identical files in single-threaded mode.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::worldmodel::LossBreakdown;

use super::agent::UpdateMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Update {
        step: u64,
        update: u64,
        #[serde(flatten)]
        metrics: UpdateMetrics,
    },
    Episode {
        step: u64,
        env: usize,
        episode: u64,
        #[serde(rename = "return")]
        ret: f64,
        length: u32,
    },
    Eval {
        step: u64,
        episodes: usize,
        mean_return: f64,
        /// Fraction of answer timesteps with the correct token, when the
        /// environment reports answer events.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        answer_accuracy: Option<f64>,
    },
    Pretrain {
        update: u64,
        loss: LossBreakdown,
        grad_norm: f64,
    },
    PretrainEval {
        update: u64,
        heldout_cross_entropy: f64,
        unigram_cross_entropy: f64,
    },
}

/// Keeps every record in memory and optionally appends it to a file.
#[derive(Debug, Default)]
pub struct Metrics {
    records: Vec<Record>,
    file: Option<BufWriter<File>>,
}

impl Metrics {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            file: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &record).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }

    /// Episode returns recorded so far, in order.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Episode { ret, .. } => Some(*ret),
                _ => None,
            })
            .collect()
    }
}

impl Drop for Metrics {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
