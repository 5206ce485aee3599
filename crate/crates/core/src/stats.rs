//! Heavy-hitters expert statistics: per-(layer, expert) activation counts in
//! hard (selection tally) or soft (softmax mass) mode, optionally keyed by
//! subject, with CSV/PGM heatmap export.

use crate::model::RoutingRecord;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMode {
    Activation,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCounts {
    pub counts: Vec<Vec<f64>>,
    pub tokens_seen: u64,
}

/// Accumulated a_l^j counts over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub mode: CountingMode,
    pub n_layer: usize,
    pub n_experts: usize,
    /// [n_layer][n_experts]; exact integers in activation mode.
    pub counts: Vec<Vec<f64>>,
    pub tokens_seen: u64,
    pub k_used: usize,
    /// Per-subject accumulation, populated when `record` is given a subject.
    #[serde(default)]
    pub per_subject: BTreeMap<String, SubjectCounts>,
}

impl ExpertStats {
    pub fn new(mode: CountingMode, n_layer: usize, n_experts: usize, k_used: usize) -> ExpertStats {
        ExpertStats {
            mode,
            n_layer,
            n_experts,
            counts: vec![vec![0.0; n_experts]; n_layer],
            tokens_seen: 0,
            k_used,
            per_subject: BTreeMap::new(),
        }
    }

    /// Accumulate one batch of routing records (one record per MoE layer).
    pub fn record(&mut self, records: &[RoutingRecord], subject: Option<&str>) -> Result<()> {
        if records.len() != self.n_layer {
            return Err(Error::Shape(format!(
                "{} routing records for {} layers",
                records.len(),
                self.n_layer
            )));
        }
        let n_tok = records[0].n_tokens();
        for rec in records {
            if rec.layer >= self.n_layer {
                return Err(Error::Shape(format!(
                    "record layer {} out of range",
                    rec.layer
                )));
            }
            if rec.n_tokens() != n_tok {
                return Err(Error::Shape("token count differs across layers".into()));
            }
            if rec.gate_probs.iter().any(|p| p.len() != self.n_experts) {
                return Err(Error::Shape(format!(
                    "gate probs width != n_experts {}",
                    self.n_experts
                )));
            }
        }
        if n_tok == 0 {
            return Ok(());
        }
        let mut delta = vec![vec![0.0; self.n_experts]; self.n_layer];
        for rec in records {
            let row = &mut delta[rec.layer];
            match self.mode {
                CountingMode::Activation => {
                    for sel in &rec.selected {
                        for &j in sel {
                            row[j] += 1.0;
                        }
                    }
                }
                CountingMode::Soft => {
                    for probs in &rec.gate_probs {
                        for (j, &p) in probs.iter().enumerate() {
                            row[j] += p;
                        }
                    }
                }
            }
        }
        for (l, row) in delta.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                self.counts[l][j] += d;
            }
        }
        self.tokens_seen += n_tok as u64;
        if let Some(label) = subject {
            let entry = self
                .per_subject
                .entry(label.to_string())
                .or_insert_with(|| SubjectCounts {
                    counts: vec![vec![0.0; self.n_experts]; self.n_layer],
                    tokens_seen: 0,
                });
            for (l, row) in delta.iter().enumerate() {
                for (j, &d) in row.iter().enumerate() {
                    entry.counts[l][j] += d;
                }
            }
            entry.tokens_seen += n_tok as u64;
        }
        Ok(())
    }

    /// Fold another collector into this one (deterministic merge of
    /// per-worker statistics).
    pub fn merge(&mut self, other: &ExpertStats) -> Result<()> {
        if self.mode != other.mode
            || self.n_layer != other.n_layer
            || self.n_experts != other.n_experts
            || self.k_used != other.k_used
        {
            return Err(Error::InvalidArg("merging incompatible ExpertStats".into()));
        }
        for l in 0..self.n_layer {
            for j in 0..self.n_experts {
                self.counts[l][j] += other.counts[l][j];
            }
        }
        self.tokens_seen += other.tokens_seen;
        for (label, sc) in &other.per_subject {
            let entry = self
                .per_subject
                .entry(label.clone())
                .or_insert_with(|| SubjectCounts {
                    counts: vec![vec![0.0; self.n_experts]; self.n_layer],
                    tokens_seen: 0,
                });
            for l in 0..self.n_layer {
                for j in 0..self.n_experts {
                    entry.counts[l][j] += sc.counts[l][j];
                }
            }
            entry.tokens_seen += sc.tokens_seen;
        }
        Ok(())
    }

    /// View one subject's accumulation as a standalone ExpertStats.
    pub fn subject_stats(&self, label: &str) -> Result<ExpertStats> {
        let sc = self
            .per_subject
            .get(label)
            .ok_or_else(|| Error::InvalidArg(format!("no statistics for subject '{label}'")))?;
        Ok(ExpertStats {
            mode: self.mode,
            n_layer: self.n_layer,
            n_experts: self.n_experts,
            counts: sc.counts.clone(),
            tokens_seen: sc.tokens_seen,
            k_used: self.k_used,
            per_subject: BTreeMap::new(),
        })
    }

    /// Monte-Carlo estimate of P(expert activated): counts normalized so each
    /// layer row sums to 1.
    pub fn marginal_estimate(&self) -> Result<Vec<Vec<f64>>> {
        if self.tokens_seen == 0 {
            return Err(Error::InvalidArg(
                "marginal_estimate with tokens_seen == 0".into(),
            ));
        }
        let denom = match self.mode {
            CountingMode::Activation => (self.k_used as f64) * (self.tokens_seen as f64),
            CountingMode::Soft => self.tokens_seen as f64,
        };
        Ok(self
            .counts
            .iter()
            .map(|row| row.iter().map(|&c| c / denom).collect())
            .collect())
    }

    /// Write `<base>.csv` (marginal estimates, layer rows x expert columns)
    /// and `<base>.pgm` (8-bit grayscale, linearly scaled to [min, max]).
    pub fn export_heatmap(&self, base: &Path) -> Result<()> {
        let m = self.marginal_estimate()?;
        let mut csv = String::new();
        for row in &m {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        std::fs::write(base.with_extension("csv"), csv)?;

        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        let min = flat.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let mut pgm = Vec::new();
        write!(pgm, "P5\n{} {}\n255\n", self.n_experts, self.n_layer)?;
        for &v in &flat {
            let g = if span > 0.0 {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            };
            pgm.push(g);
        }
        std::fs::write(base.with_extension("pgm"), pgm)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExpertStats> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Content hash of the canonical JSON encoding, used for provenance in
    /// downstream mask files.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("stats serialize");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
