use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub env: String,
    pub model: String,
    /// Mean reward of the last (up to) 1000 completed episodes.
    pub mean_reward_1000: Option<f64>,
    pub mean_reward_100: Option<f64>,
    /// Rewards of the episodes completed since the previous record.
    pub episode_rewards: Vec<f64>,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_inner: f64,
    pub loss_grounding: f64,
    pub entropy_outer: f64,
    pub entropy_inner: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub skipped_updates: u64,
    pub transition_calls: u64,
    /// Seconds since the run started; omitted in sequential mode so that
    /// identical runs produce identical files.
    pub wall_clock_secs: Option<f64>,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Creates the file, or appends to it when `append` (resumed runs).
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("metrics serialise");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = MetricsRecord {
            iteration: 3,
            env_steps: 60,
            episodes: 2,
            env: "gridworld".into(),
            model: "dpn".into(),
            mean_reward_1000: Some(-0.1 / 3.0),
            mean_reward_100: None,
            episode_rewards: vec![0.3, -1.01],
            loss_policy: 0.1,
            loss_value: 0.2,
            loss_inner: -0.3,
            loss_grounding: 1e-7,
            entropy_outer: 1.38,
            entropy_inner: 2.4,
            loss_total: 0.0,
            grad_norm: 3.5,
            skipped_updates: 0,
            transition_calls: 120,
            wall_clock_secs: None,
        };
        let mut w = MetricsWriter::open(&path, false).unwrap();
        w.write(&rec).unwrap();
        w.write(&rec).unwrap();
        drop(w);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
    }
}
