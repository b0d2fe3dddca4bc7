//! Append-only metrics log with a fixed CSV schema.

use std::path::Path;

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: &str = "phase,step,seed,train_loss,val_loss,test_acc,wall_time_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: String,
    pub step: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_acc: f64,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Append a row; steps must be strictly increasing within each
    /// (phase, seed) stream.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if row.phase.contains(',') || row.phase.is_empty() {
            return Err(HarnessError::Metrics(format!("bad phase {:?}", row.phase)));
        }
        if let Some(prev) = self
            .rows
            .iter()
            .rev()
            .find(|r| r.phase == row.phase && r.seed == row.seed)
        {
            if prev.step >= row.step {
                return Err(HarnessError::Metrics(format!(
                    "step {} not increasing after {} in ({}, {})",
                    row.step, prev.step, row.phase, row.seed
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?}\n",
                r.phase, r.step, r.seed, r.train_loss, r.val_loss, r.test_acc, r.wall_time_ms
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != CSV_HEADER {
            return Err(HarnessError::Metrics(format!("bad CSV header {header:?}")));
        }
        let mut log = Self::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 7 {
                return Err(HarnessError::Metrics(format!("row {}: bad field count", i + 2)));
            }
            let bad = |what: &str| HarnessError::Metrics(format!("row {}: bad {what}", i + 2));
            log.push(MetricsRow {
                phase: parts[0].to_string(),
                step: parts[1].parse().map_err(|_| bad("step"))?,
                seed: parts[2].parse().map_err(|_| bad("seed"))?,
                train_loss: parts[3].parse().map_err(|_| bad("train_loss"))?,
                val_loss: parts[4].parse().map_err(|_| bad("val_loss"))?,
                test_acc: parts[5].parse().map_err(|_| bad("test_acc"))?,
                wall_time_ms: parts[6].parse().map_err(|_| bad("wall_time_ms"))?,
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Wall-clock milliseconds when `COMMENTARY_WALL_CLOCK=1`; 0 otherwise,
/// keeping emitted files byte-deterministic by default.
pub struct WallClock {
    start: Option<std::time::Instant>,
}

impl WallClock {
    pub fn start() -> Self {
        let enabled = std::env::var("COMMENTARY_WALL_CLOCK").as_deref() == Ok("1");
        Self {
            start: enabled.then(std::time::Instant::now),
        }
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.start
            .map(|s| s.elapsed().as_secs_f64() * 1e3)
            .unwrap_or(0.0)
    }
}
