use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyOverlap {
    pub strategy: String,
    pub mean_overlap: f64,
    pub motion_fraction: f64,
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub per_class_ap: Vec<Option<f64>>,
    /// Classes without test positives, left out of `map`.
    pub excluded_classes: Vec<usize>,
    pub map: f64,
    pub top1: f64,
    pub overlap: Vec<StrategyOverlap>,
    pub final_pretrain_loss: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run {} (seed {}, config {})", self.label, self.seed, self.config_hash);
        let _ = writeln!(s, "mAP   {:.4}", self.map);
        let _ = writeln!(s, "top-1 {:.4}", self.top1);
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "  class {c:>2}  AP {v:.4}");
                }
                None => {
                    let _ = writeln!(s, "  class {c:>2}  AP n/a (no positives, excluded)");
                }
            }
        }
        for o in &self.overlap {
            let _ = writeln!(
                s,
                "overlap[{}] {:.4} vs motion fraction {:.4} over {} clips",
                o.strategy, o.mean_overlap, o.motion_fraction, o.clips
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn values(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.value.as_str()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.value.len()).max().unwrap_or(0).max(self.axis.len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} | {:>7} | {:>7} | {:>7} | {:>9}", self.axis, "mAP", "top-1", "overlap", "pt-loss");
        let _ = writeln!(s, "{}", "-".repeat(width + 44));
        for row in &self.rows {
            let r = &row.report;
            let overlap = r.overlap.first().map_or("-".to_string(), |o| format!("{:.4}", o.mean_overlap));
            let loss = r.final_pretrain_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            let _ = writeln!(
                s,
                "{:<width$} | {:>7.4} | {:>7.4} | {:>7} | {:>9}",
                row.value, r.map, r.top1, overlap, loss
            );
        }
        s
    }
}
