//! JSON-lines episode traces: one [`EnvStep`] per line.

use std::io::{BufRead, Write};

use crate::{Action, EnvStep};

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct TraceLine {
    pub episode: usize,
    pub t: usize,
    /// Action that produced this step; absent on the first step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub action: Option<Action>,
    pub step: EnvStep,
}

pub fn write_line(out: &mut impl Write, line: &TraceLine) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, line)?;
    out.write_all(b"\n")
}

pub fn read_lines(input: impl BufRead) -> std::io::Result<Vec<TraceLine>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l?;
            serde_json::from_str(&l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
