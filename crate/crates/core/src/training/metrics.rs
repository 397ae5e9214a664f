use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub wall_ms: u64,
}

/// Append-only metrics stream, kept in memory and optionally mirrored to a
/// JSON-lines file.
#[derive(Debug)]
pub struct MetricsSink {
    records: Vec<MetricRecord>,
    writer: Option<BufWriter<File>>,
    start: Instant,
}

impl Default for MetricsSink {
    fn default() -> Self {
        Self::memory()
    }
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self {
            records: Vec::new(),
            writer: None,
            start: Instant::now(),
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: Some(BufWriter::new(File::create(path)?)),
            ..Self::memory()
        })
    }

    pub fn emit(&mut self, step: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Records without wall-clock time, for reproducibility comparisons.
    pub fn trace(&self) -> Vec<(usize, String, String, u64)> {
        self.records
            .iter()
            .map(|r| (r.step, r.split.clone(), r.metric.clone(), r.value.to_bits()))
            .collect()
    }

    /// `(step, value)` pairs of one metric.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Writes a `step,loss` CSV.
pub fn write_loss_csv(path: &Path, series: &[(usize, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss")?;
    for (step, loss) in series {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()?;
    Ok(())
}
