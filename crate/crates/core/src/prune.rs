//! Convert heavy-hitters statistics into expert masks: layer-wise or global
//! top-count selection, a seeded random baseline, and the subject-specific
//! variant. All selections are deterministic; ties break toward the lower
//! (layer, expert) index.

use crate::model::{ExpertMask, ModelConfig};
use crate::stats::{CountingMode, ExpertStats};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    Layer,
    Global,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: PruneStrategy,
    pub counting: CountingMode,
    /// Fraction of total experts removed; alternative to the explicit keeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_per_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_total: Option<usize>,
    pub min_keep_per_layer: usize,
    #[serde(default)]
    pub subject_specific: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PruneSpec {
    pub fn heavy_hitters(
        strategy: PruneStrategy,
        counting: CountingMode,
        sparsity: f64,
        min_keep: usize,
    ) -> PruneSpec {
        PruneSpec {
            strategy,
            counting,
            sparsity: Some(sparsity),
            keep_per_layer: None,
            keep_total: None,
            min_keep_per_layer: min_keep,
            subject_specific: false,
            seed: None,
        }
    }
}

/// Round half away from zero; the fixed convention for converting "25%/50%
/// expert sparsity" into counts.
fn round_count(x: f64) -> usize {
    x.round() as usize
}

/// Keep the `keep_per_layer` largest-count experts in every layer.
pub fn prune_layerwise(
    stats: &ExpertStats,
    keep_per_layer: usize,
    min_keep: usize,
) -> Result<ExpertMask> {
    if keep_per_layer < min_keep.max(1) || keep_per_layer > stats.n_experts {
        return Err(Error::InvalidArg(format!(
            "keep_per_layer {keep_per_layer} outside [{}, {}]",
            min_keep.max(1),
            stats.n_experts
        )));
    }
    let mut keep = vec![vec![false; stats.n_experts]; stats.n_layer];
    for (l, row) in stats.counts.iter().enumerate() {
        let mut idx: Vec<usize> = (0..stats.n_experts).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in idx.iter().take(keep_per_layer) {
            keep[l][j] = true;
        }
    }
    Ok(ExpertMask { keep })
}

/// Keep the `keep_total` globally largest counts, then repair layers that
/// fell below `min_keep` by promoting their largest removed experts and
/// demoting the globally smallest kept experts from layers with surplus.
pub fn prune_global(stats: &ExpertStats, keep_total: usize, min_keep: usize) -> Result<ExpertMask> {
    let total = stats.n_layer * stats.n_experts;
    let min_keep = min_keep.max(1);
    if keep_total < stats.n_layer * min_keep || keep_total > total {
        return Err(Error::Infeasible(format!(
            "keep_total {keep_total} outside [{}, {total}]",
            stats.n_layer * min_keep
        )));
    }
    // Global order: count descending, then (layer, expert) ascending.
    let mut order: Vec<(usize, usize)> = (0..stats.n_layer)
        .flat_map(|l| (0..stats.n_experts).map(move |j| (l, j)))
        .collect();
    order.sort_by(|&(la, ja), &(lb, jb)| {
        stats.counts[lb][jb]
            .partial_cmp(&stats.counts[la][ja])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((la, ja).cmp(&(lb, jb)))
    });
    let mut kept = vec![vec![false; stats.n_experts]; stats.n_layer];
    for &(l, j) in order.iter().take(keep_total) {
        kept[l][j] = true;
    }
    let mut per_layer: Vec<usize> = kept
        .iter()
        .map(|row| row.iter().filter(|&&b| b).count())
        .collect();
    loop {
        let deficient = (0..stats.n_layer).find(|&l| per_layer[l] < min_keep);
        let Some(dl) = deficient else { break };
        // Promote the best removed expert in the deficient layer.
        let promote = order
            .iter()
            .find(|&&(l, j)| l == dl && !kept[l][j])
            .copied()
            .expect("deficient layer must have removed experts");
        // Demote the globally worst kept expert from a surplus layer.
        let demote = order
            .iter()
            .rev()
            .find(|&&(l, j)| kept[l][j] && per_layer[l] > min_keep)
            .copied()
            .ok_or_else(|| {
                Error::Infeasible("min_keep repair has no surplus layer to demote".into())
            })?;
        kept[promote.0][promote.1] = true;
        per_layer[promote.0] += 1;
        kept[demote.0][demote.1] = false;
        per_layer[demote.0] -= 1;
    }
    Ok(ExpertMask { keep: kept })
}

/// Remove round(sparsity x total) experts uniformly at random, respecting
/// min_keep per layer. Seeded and reproducible.
pub fn prune_random(
    config: &ModelConfig,
    sparsity: f64,
    min_keep: usize,
    seed: u64,
) -> Result<ExpertMask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::InvalidArg(format!(
            "sparsity {sparsity} outside [0, 1]"
        )));
    }
    let min_keep = min_keep.max(1);
    let total = config.n_layer * config.n_experts;
    let n_remove = round_count(sparsity * total as f64);
    let max_removable = config.n_layer * (config.n_experts - min_keep.min(config.n_experts));
    if n_remove > max_removable {
        return Err(Error::Infeasible(format!(
            "cannot remove {n_remove} experts with min_keep {min_keep}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..config.n_layer)
        .flat_map(|l| (0..config.n_experts).map(move |j| (l, j)))
        .collect();
    cells.shuffle(&mut rng);
    let mut keep = vec![vec![true; config.n_experts]; config.n_layer];
    let mut kept_per_layer = vec![config.n_experts; config.n_layer];
    let mut removed = 0;
    for (l, j) in cells {
        if removed == n_remove {
            break;
        }
        if kept_per_layer[l] > min_keep {
            keep[l][j] = false;
            kept_per_layer[l] -= 1;
            removed += 1;
        }
    }
    if removed < n_remove {
        return Err(Error::Infeasible(
            "random pruning could not reach target sparsity".into(),
        ));
    }
    Ok(ExpertMask { keep })
}

/// Apply the layer/global selection independently per subject.
pub fn prune_subject_specific(
    stats: &ExpertStats,
    spec: &PruneSpec,
    config: &ModelConfig,
) -> Result<BTreeMap<String, ExpertMask>> {
    if stats.per_subject.is_empty() {
        return Err(Error::InvalidArg(
            "no per-subject statistics collected".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for label in stats.per_subject.keys() {
        let sub = stats.subject_stats(label)?;
        if sub.tokens_seen == 0 {
            return Err(Error::InvalidArg(format!(
                "subject '{label}' has no tokens"
            )));
        }
        out.insert(label.clone(), apply_spec(&sub, spec, config)?);
    }
    Ok(out)
}

/// Resolve a PruneSpec (sparsity or explicit keeps) against statistics.
pub fn apply_spec(
    stats: &ExpertStats,
    spec: &PruneSpec,
    config: &ModelConfig,
) -> Result<ExpertMask> {
    let min_keep = spec.min_keep_per_layer;
    match spec.strategy {
        PruneStrategy::Layer => {
            let keep_per_layer = match (spec.keep_per_layer, spec.sparsity) {
                (Some(k), _) => k,
                (None, Some(s)) => {
                    stats.n_experts - round_count(s * stats.n_experts as f64).min(stats.n_experts)
                }
                (None, None) => {
                    return Err(Error::InvalidArg(
                        "layer pruning needs keep_per_layer or sparsity".into(),
                    ))
                }
            };
            prune_layerwise(stats, keep_per_layer, min_keep)
        }
        PruneStrategy::Global => {
            let total = stats.n_layer * stats.n_experts;
            let keep_total = match (spec.keep_total, spec.sparsity) {
                (Some(k), _) => k,
                (None, Some(s)) => total - round_count(s * total as f64).min(total),
                (None, None) => {
                    return Err(Error::InvalidArg(
                        "global pruning needs keep_total or sparsity".into(),
                    ))
                }
            };
            prune_global(stats, keep_total, min_keep)
        }
        PruneStrategy::Random => {
            let sparsity = spec
                .sparsity
                .ok_or_else(|| Error::InvalidArg("random pruning needs sparsity".into()))?;
            let seed = spec.seed.unwrap_or(0);
            prune_random(config, sparsity, min_keep, seed)
        }
    }
}

// --- Mask file -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskFile {
    pub n_experts: usize,
    /// Kept expert indices per layer, ascending.
    pub kept: Vec<Vec<usize>>,
    pub spec: PruneSpec,
    /// Content hash of the generating ExpertStats, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_hash: Option<String>,
}

pub fn save_mask(
    mask: &ExpertMask,
    spec: &PruneSpec,
    stats_hash: Option<String>,
    path: &Path,
) -> Result<()> {
    let n_experts = mask.keep.first().map_or(0, |r| r.len());
    let file = MaskFile {
        n_experts,
        kept: (0..mask.keep.len()).map(|l| mask.kept_indices(l)).collect(),
        spec: spec.clone(),
        stats_hash,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<(ExpertMask, MaskFile)> {
    let file: MaskFile = serde_json::from_slice(&std::fs::read(path)?)?;
    let mut keep = vec![vec![false; file.n_experts]; file.kept.len()];
    for (l, row) in file.kept.iter().enumerate() {
        for &j in row {
            if j >= file.n_experts {
                return Err(Error::Shape(format!("mask file: expert {j} out of range")));
            }
            keep[l][j] = true;
        }
    }
    Ok((ExpertMask { keep }, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats_with(counts: Vec<Vec<f64>>) -> ExpertStats {
        let n_layer = counts.len();
        let n_experts = counts[0].len();
        let mut s = ExpertStats::new(CountingMode::Activation, n_layer, n_experts, 1);
        s.counts = counts;
        s.tokens_seen = 1;
        s
    }

    #[test]
    fn layerwise_basic() {
        let s = stats_with(vec![vec![5.0, 1.0, 3.0, 2.0]]);
        let m = prune_layerwise(&s, 2, 1).unwrap();
        assert_eq!(m.kept_indices(0), vec![0, 2]);
    }

    #[test]
    fn layerwise_keep_all_is_identity() {
        let s = stats_with(vec![vec![5.0, 1.0, 3.0, 2.0], vec![1.0, 2.0, 3.0, 4.0]]);
        let m = prune_layerwise(&s, 4, 1).unwrap();
        assert_eq!(m, ExpertMask::full(2, 4));
    }

    #[test]
    fn layerwise_out_of_range() {
        let s = stats_with(vec![vec![1.0, 2.0]]);
        assert!(prune_layerwise(&s, 3, 1).is_err());
        assert!(prune_layerwise(&s, 0, 1).is_err());
    }

    #[test]
    fn global_hand_example() {
        let s = stats_with(vec![vec![5.0, 1.0], vec![3.0, 2.0]]);
        let m = prune_global(&s, 2, 1).unwrap();
        assert_eq!(m.kept_indices(0), vec![0]);
        assert_eq!(m.kept_indices(1), vec![0]);
    }

    #[test]
    fn global_keep_all() {
        let s = stats_with(vec![vec![5.0, 1.0], vec![3.0, 2.0]]);
        let m = prune_global(&s, 4, 1).unwrap();
        assert_eq!(m, ExpertMask::full(2, 2));
    }

    #[test]
    fn global_min_keep_repair() {
        let s = stats_with(vec![vec![5.0, 4.0], vec![1.0, 2.0]]);
        let m = prune_global(&s, 2, 1).unwrap();
        assert_eq!(m.kept_indices(0), vec![0]);
        assert_eq!(m.kept_indices(1), vec![1]);
    }

    #[test]
    fn global_infeasible() {
        let s = stats_with(vec![vec![5.0, 1.0], vec![3.0, 2.0]]);
        assert!(prune_global(&s, 1, 1).is_err());
        assert!(prune_global(&s, 5, 1).is_err());
    }

    #[test]
    fn random_zero_sparsity_keeps_all() {
        let mut cfg = ModelConfig::desk_default();
        cfg.n_layer = 4;
        let m = prune_random(&cfg, 0.0, 2, 1).unwrap();
        assert_eq!(m, ExpertMask::full(4, 8));
    }

    #[test]
    fn random_deterministic() {
        let mut cfg = ModelConfig::desk_default();
        cfg.n_layer = 4;
        let a = prune_random(&cfg, 0.25, 2, 99).unwrap();
        let b = prune_random(&cfg, 0.25, 2, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_removal_count() {
        let mut cfg = ModelConfig::desk_default();
        cfg.n_layer = 4;
        let m = prune_random(&cfg, 0.25, 2, 5).unwrap();
        assert_eq!(m.total_kept(), 4 * 8 - 8);
    }

    #[test]
    fn subject_specific_variants() {
        let mut s = ExpertStats::new(CountingMode::Activation, 1, 4, 1);
        s.tokens_seen = 2;
        s.counts = vec![vec![2.0, 2.0, 0.0, 0.0]];
        s.per_subject.insert(
            "a".into(),
            crate::stats::SubjectCounts {
                counts: vec![vec![2.0, 0.0, 0.0, 0.0]],
                tokens_seen: 1,
            },
        );
        s.per_subject.insert(
            "b".into(),
            crate::stats::SubjectCounts {
                counts: vec![vec![0.0, 2.0, 0.0, 0.0]],
                tokens_seen: 1,
            },
        );
        let spec = PruneSpec {
            strategy: PruneStrategy::Layer,
            counting: CountingMode::Activation,
            sparsity: None,
            keep_per_layer: Some(1),
            keep_total: None,
            min_keep_per_layer: 1,
            subject_specific: true,
            seed: None,
        };
        let cfg = ModelConfig::desk_default();
        let masks = prune_subject_specific(&s, &spec, &cfg).unwrap();
        assert_eq!(masks["a"].kept_indices(0), vec![0]);
        assert_eq!(masks["b"].kept_indices(0), vec![1]);
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = stats_with(vec![vec![5.0, 1.0, 3.0, 2.0]]);
        let m = prune_layerwise(&s, 2, 1).unwrap();
        let spec = PruneSpec::heavy_hitters(PruneStrategy::Layer, CountingMode::Activation, 0.5, 1);
        let path = dir.path().join("mask.json");
        save_mask(&m, &spec, Some(s.content_hash()), &path).unwrap();
        let (loaded, file) = load_mask(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(file.stats_hash, Some(s.content_hash()));
    }

    proptest! {
        #[test]
        fn scale_invariance(
            counts in proptest::collection::vec(
                proptest::collection::vec(0.0f64..100.0, 4), 3),
            scale in 0.001f64..1000.0,
        ) {
            let s = stats_with(counts.clone());
            let scaled = stats_with(
                counts.iter().map(|r| r.iter().map(|&c| c * scale).collect()).collect(),
            );
            prop_assert_eq!(
                prune_layerwise(&s, 2, 1).unwrap(),
                prune_layerwise(&scaled, 2, 1).unwrap()
            );
            prop_assert_eq!(
                prune_global(&s, 6, 1).unwrap(),
                prune_global(&scaled, 6, 1).unwrap()
            );
        }
    }
}
