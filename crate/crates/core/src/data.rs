//! Synthetic subject-structured classification tasks.
//!
//! Each subject draws its content tokens from a disjoint vocabulary block and
//! carries its own label permutation, so a trained MoE develops expert
//! specialization and heavy-hitters statistics become informative. The label
//! is a deterministic function of the final content token, which a small
//! model can learn to high accuracy.

use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Multi-subject analog: disjoint vocab blocks, per-subject label rule.
    SubjectMix,
    /// Single-subject 5-way sequence classification.
    Sentiment5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub n_subjects: usize,
    pub n_labels: usize,
    /// Content tokens per example (the label token is appended for language
    /// modeling, so seq_len + 1 must fit the model context).
    pub seq_len: usize,
    pub n_vocab: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn desk_default(seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind: TaskKind::SubjectMix,
            n_subjects: 6,
            n_labels: 5,
            seq_len: 11,
            n_vocab: 512,
            train_size: 3000,
            val_size: 600,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_labels < 2 || self.seq_len == 0 {
            return Err(Error::InvalidArg("degenerate task spec".into()));
        }
        if self.kind == TaskKind::Sentiment5 && (self.n_subjects != 1 || self.n_labels != 5) {
            return Err(Error::InvalidArg(
                "sentiment5 requires n_subjects=1, n_labels=5".into(),
            ));
        }
        let content_vocab = self
            .n_vocab
            .checked_sub(self.n_labels)
            .ok_or_else(|| Error::Infeasible("vocab smaller than label set".into()))?;
        let block = content_vocab / self.n_subjects;
        if block < self.n_labels {
            return Err(Error::Infeasible(format!(
                "vocab block {block} smaller than label count {}",
                self.n_labels
            )));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::InvalidArg("empty split".into()));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        (self.n_vocab - self.n_labels) / self.n_subjects
    }

    pub fn block_start(&self, subject: usize) -> usize {
        self.n_labels + subject * self.block_size()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// Label token id, < n_labels.
    pub label: u32,
    pub subject: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Deterministic per-subject label permutations, derived from the task seed.
pub struct TaskRules {
    perms: Vec<Vec<u32>>,
}

impl TaskRules {
    pub fn from_spec(spec: &SyntheticTaskSpec) -> TaskRules {
        let perms = (0..spec.n_subjects)
            .map(|s| {
                let sub_seed = spec
                    .seed
                    .wrapping_add((s as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
                let mut perm: Vec<u32> = (0..spec.n_labels as u32).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();
        TaskRules { perms }
    }

    /// The label rule: permute the final content token's offset within its
    /// subject's vocabulary block.
    pub fn label_for(
        &self,
        spec: &SyntheticTaskSpec,
        subject: usize,
        tokens: &[u32],
    ) -> Result<u32> {
        let last = *tokens
            .last()
            .ok_or_else(|| Error::InvalidArg("empty token sequence".into()))?;
        let start = spec.block_start(subject) as u32;
        let offset = (last - start) as usize % spec.n_labels;
        Ok(self.perms[subject][offset])
    }
}

/// Generate the train and validation splits. Byte-deterministic given the
/// spec (including its seed).
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let rules = TaskRules::from_spec(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_size + spec.val_size;
    let block = spec.block_size();
    let mut examples = Vec::with_capacity(total);
    for i in 0..total {
        let subject = i % spec.n_subjects;
        let start = spec.block_start(subject);
        let tokens: Vec<u32> = (0..spec.seq_len)
            .map(|_| (start + rng.gen_range(0..block)) as u32)
            .collect();
        let label = rules.label_for(spec, subject, &tokens)?;
        examples.push(Example {
            tokens,
            label,
            subject,
        });
    }
    let val = examples.split_off(spec.train_size);
    Ok((
        Dataset {
            spec: spec.clone(),
            examples,
        },
        Dataset {
            spec: spec.clone(),
            examples: val,
        },
    ))
}
