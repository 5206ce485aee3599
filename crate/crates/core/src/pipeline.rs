//! End-to-end experiment orchestration: generate a synthetic task, pretrain,
//! collect heavy-hitters statistics, prune, fine-tune, evaluate, and emit a
//! content-addressed report. Stages run sequentially and each writes its
//! artifact before the next begins.

use crate::cost::{reduction_report, PruneAmount, ReductionReport};
use crate::data::{generate_task, Dataset, SyntheticTaskSpec};
use crate::finetune::{save_metrics, train, LossConfig, Objective, TopKSchedule, TrainConfig};
use crate::model::{load_checkpoint, save_checkpoint, ExpertMask, Model, ModelConfig};
use crate::prune::{apply_spec, prune_subject_specific, save_mask, PruneSpec, PruneStrategy};
use crate::stats::{CountingMode, ExpertStats};
use crate::tape::Tape;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_examples: usize,
    pub mean_gate_entropy: f64,
    /// Per-layer tally of expert selections over all evaluated tokens.
    pub selection_histograms: Vec<Vec<u64>>,
}

/// Greedy argmax decoding of the label token at the last content position.
pub fn evaluate(model: &Model, mask: &ExpertMask, data: &Dataset, k: usize) -> Result<EvalResult> {
    if data.examples.is_empty() {
        return Err(Error::InvalidArg("evaluate on empty split".into()));
    }
    let c = &model.config;
    mask.validate(c.n_layer, c.n_experts, k)?;
    let k_per_layer = vec![k; c.n_layer];
    let mut correct = 0usize;
    let mut entropy_sum = 0.0;
    let mut entropy_n = 0usize;
    let mut histograms = vec![vec![0u64; c.n_experts]; c.n_layer];
    for chunk in data.examples.chunks(EVAL_BATCH) {
        let tokens: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let seq = tokens[0].len();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &tokens, mask, &k_per_layer, &|_| false)?;
        let logits = tape.value(out.logits);
        let width = c.n_vocab;
        for (b, ex) in chunk.iter().enumerate() {
            let row = &logits.data[(b * seq + seq - 1) * width..(b * seq + seq) * width];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .unwrap();
            if argmax == ex.label as usize {
                correct += 1;
            }
        }
        for rec in &out.records {
            for gp in &rec.gate_probs {
                entropy_sum += crate::tensor::entropy(gp)?;
                entropy_n += 1;
            }
            for sel in &rec.selected {
                for &j in sel {
                    histograms[rec.layer][j] += 1;
                }
            }
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.examples.len() as f64,
        n_examples: data.examples.len(),
        mean_gate_entropy: entropy_sum / entropy_n as f64,
        selection_histograms: histograms,
    })
}

/// Run the model over a split and accumulate heavy-hitters statistics under
/// the given mask and k.
///
/// `readout_only` restricts counting to the final position of each sequence
/// — the position whose routing the classification readout actually depends
/// on. Whole-sequence counting mixes in positional specialization that can
/// dominate the task-relevant usage signal.
pub fn collect_stats(
    model: &Model,
    mask: &ExpertMask,
    data: &Dataset,
    k: usize,
    mode: CountingMode,
    subject_specific: bool,
    readout_only: bool,
) -> Result<ExpertStats> {
    let c = &model.config;
    mask.validate(c.n_layer, c.n_experts, k)?;
    let mut stats = ExpertStats::new(mode, c.n_layer, c.n_experts, k);
    let k_per_layer = vec![k; c.n_layer];
    // Group per subject so each batch carries a single subject label.
    let mut by_subject: BTreeMap<usize, Vec<&crate::data::Example>> = BTreeMap::new();
    if subject_specific {
        for e in &data.examples {
            by_subject.entry(e.subject).or_default().push(e);
        }
    } else {
        by_subject.insert(0, data.examples.iter().collect());
    }
    for (subject, examples) in &by_subject {
        let label = subject_specific.then(|| format!("s{subject}"));
        for chunk in examples.chunks(EVAL_BATCH) {
            let tokens: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            let seq = tokens[0].len();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &tokens, mask, &k_per_layer, &|_| false)?;
            if readout_only {
                let trimmed: Vec<crate::model::RoutingRecord> = out
                    .records
                    .iter()
                    .map(|r| crate::model::RoutingRecord {
                        layer: r.layer,
                        gate_probs: (0..chunk.len())
                            .map(|b| r.gate_probs[b * seq + seq - 1].clone())
                            .collect(),
                        selected: (0..chunk.len())
                            .map(|b| r.selected[b * seq + seq - 1].clone())
                            .collect(),
                        combine_weights: (0..chunk.len())
                            .map(|b| r.combine_weights[b * seq + seq - 1].clone())
                            .collect(),
                    })
                    .collect();
                stats.record(&trimmed, label.as_deref())?;
            } else {
                stats.record(&out.records, label.as_deref())?;
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountConfig {
    pub mode: CountingMode,
    #[serde(default)]
    pub subject_specific: bool,
    /// Count only at each sequence's final (readout) position.
    #[serde(default)]
    pub readout_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub schedule: TopKSchedule,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub pretrain: TrainConfig,
    /// Auxiliary load-balancing weight during pretraining; off by default and
    /// recorded in the report either way.
    #[serde(default)]
    pub pretrain_load_balance: Option<f64>,
    pub count: CountConfig,
    /// Prune variants; more than one forms an ablation grid. The first entry
    /// is the primary variant that fine-tuning applies to.
    #[serde(default)]
    pub prune: Vec<PruneSpec>,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    pub eval_k: usize,
    pub master_seed: u64,
}

impl PipelineConfig {
    /// Desk-scale default pipeline: soft/global 25% pruning, short fine-tune.
    pub fn desk_default(master_seed: u64) -> PipelineConfig {
        let model = ModelConfig::desk_default();
        PipelineConfig {
            task: SyntheticTaskSpec::desk_default(master_seed),
            pretrain: TrainConfig {
                steps: 400,
                batch_size: 32,
                learning_rate: 3e-3,
                weight_decay: 0.01,
                trainable_scope: crate::finetune::TrainScope::All,
                seed: master_seed,
            },
            pretrain_load_balance: None,
            count: CountConfig {
                mode: CountingMode::Soft,
                subject_specific: false,
                readout_only: true,
            },
            prune: vec![PruneSpec::heavy_hitters(
                PruneStrategy::Global,
                CountingMode::Soft,
                0.25,
                model.n_topk,
            )],
            finetune: Some(FinetuneConfig {
                schedule: TopKSchedule::fixed(2, 150),
                loss: LossConfig { lambda: 0.1 },
                train: TrainConfig {
                    steps: 150,
                    batch_size: 32,
                    learning_rate: 1e-3,
                    weight_decay: 0.01,
                    trainable_scope: crate::finetune::TrainScope::All,
                    seed: master_seed,
                },
            }),
            eval_k: model.n_topk,
            model,
            master_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub spec: PruneSpec,
    /// Mask artifact file names (one per subject for subject-specific runs).
    pub mask_files: Vec<String>,
    pub post_prune: EvalResult,
    pub accuracy_drop_from_dense: f64,
    pub reduction: ReductionReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub variant: String,
    pub post_finetune: EvalResult,
    pub accuracy_drop_from_dense: f64,
    pub final_mean_gate_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub load_balance_used: bool,
    pub dense: EvalResult,
    pub variants: Vec<VariantReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneReport>,
    /// sha256 of every artifact this run produced, keyed by relative name.
    pub artifact_hashes: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn variant_name(spec: &PruneSpec, idx: usize) -> String {
    let strategy = match spec.strategy {
        PruneStrategy::Layer => "layer",
        PruneStrategy::Global => "global",
        PruneStrategy::Random => "random",
    };
    let counting = match spec.counting {
        CountingMode::Activation => "act",
        CountingMode::Soft => "soft",
    };
    match spec.sparsity {
        Some(s) => format!(
            "v{idx}_{strategy}_{counting}_s{:02}",
            (s * 100.0).round() as u32
        ),
        None => format!("v{idx}_{strategy}_{counting}"),
    }
}

/// Weighted per-subject evaluation: each subject's examples run under that
/// subject's own mask.
fn evaluate_subject_specific(
    model: &Model,
    masks: &BTreeMap<String, ExpertMask>,
    data: &Dataset,
    k: usize,
) -> Result<EvalResult> {
    let mut by_subject: BTreeMap<usize, Vec<crate::data::Example>> = BTreeMap::new();
    for e in &data.examples {
        by_subject.entry(e.subject).or_default().push(e.clone());
    }
    let mut correct_weighted = 0.0;
    let mut total = 0usize;
    let mut entropy_weighted = 0.0;
    let mut histograms: Option<Vec<Vec<u64>>> = None;
    for (subject, examples) in by_subject {
        let label = format!("s{subject}");
        let mask = masks
            .get(&label)
            .ok_or_else(|| Error::InvalidArg(format!("missing mask for subject {label}")))?;
        let n = examples.len();
        let subset = Dataset {
            spec: data.spec.clone(),
            examples,
        };
        let r = evaluate(model, mask, &subset, k)?;
        correct_weighted += r.accuracy * n as f64;
        entropy_weighted += r.mean_gate_entropy * n as f64;
        total += n;
        match &mut histograms {
            None => histograms = Some(r.selection_histograms),
            Some(h) => {
                for (hl, rl) in h.iter_mut().zip(&r.selection_histograms) {
                    for (a, b) in hl.iter_mut().zip(rl) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok(EvalResult {
        accuracy: correct_weighted / total as f64,
        n_examples: total,
        mean_gate_entropy: entropy_weighted / total as f64,
        selection_histograms: histograms.unwrap_or_default(),
    })
}

pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();
    fn push(p: PathBuf, artifacts: &mut Vec<PathBuf>) {
        artifacts.push(p);
    }

    // Resolved config is itself an artifact.
    let config_path = out_dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(cfg)?)?;
    push(config_path, &mut artifacts);

    // Stage: generate.
    let mut task = cfg.task.clone();
    task.seed = cfg.master_seed.wrapping_add(1);
    let (train_split, val_split) = generate_task(&task).map_err(|e| e.in_stage("generate"))?;
    std::fs::create_dir_all(out_dir.join("data"))?;
    let train_path = out_dir.join("data/train.json");
    let val_path = out_dir.join("data/val.json");
    train_split
        .save(&train_path)
        .map_err(|e| e.in_stage("generate"))?;
    val_split
        .save(&val_path)
        .map_err(|e| e.in_stage("generate"))?;
    push(train_path, &mut artifacts);
    push(val_path, &mut artifacts);

    // Stage: pretrain.
    let run_pretrain = || -> Result<(Model, Vec<crate::finetune::StepMetrics>)> {
        let mut model = Model::init(cfg.model.clone(), cfg.master_seed.wrapping_add(2))?;
        let mask = ExpertMask::full(cfg.model.n_layer, cfg.model.n_experts);
        let mut pretrain_cfg = cfg.pretrain.clone();
        pretrain_cfg.seed = cfg.master_seed.wrapping_add(3);
        let schedule = TopKSchedule::fixed(cfg.model.n_topk, pretrain_cfg.steps);
        let metrics = train(
            &mut model,
            &mask,
            &train_split,
            &schedule,
            &Objective::NextToken {
                load_balance: cfg.pretrain_load_balance,
            },
            &pretrain_cfg,
        )?;
        Ok((model, metrics))
    };
    let (model, pretrain_metrics) = run_pretrain().map_err(|e| e.in_stage("pretrain"))?;
    let pretrained_base = out_dir.join("pretrained");
    save_checkpoint(&model, cfg.master_seed, None, &pretrained_base)
        .map_err(|e| e.in_stage("pretrain"))?;
    let pm_path = out_dir.join("pretrain_metrics.jsonl");
    save_metrics(&pretrain_metrics, &pm_path).map_err(|e| e.in_stage("pretrain"))?;
    push(pretrained_base.with_extension("json"), &mut artifacts);
    push(pretrained_base.with_extension("bin"), &mut artifacts);
    push(pm_path, &mut artifacts);

    // Stage: dense evaluation.
    let full_mask = ExpertMask::full(cfg.model.n_layer, cfg.model.n_experts);
    let dense = evaluate(&model, &full_mask, &val_split, cfg.model.n_topk)
        .map_err(|e| e.in_stage("evaluate-dense"))?;

    // Stage: count (training split, current mask and k).
    let stats = collect_stats(
        &model,
        &full_mask,
        &train_split,
        cfg.model.n_topk,
        cfg.count.mode,
        cfg.count.subject_specific,
        cfg.count.readout_only,
    )
    .map_err(|e| e.in_stage("count"))?;
    let stats_path = out_dir.join("stats.json");
    stats.save(&stats_path).map_err(|e| e.in_stage("count"))?;
    let heat_base = out_dir.join("heatmap");
    stats
        .export_heatmap(&heat_base)
        .map_err(|e| e.in_stage("count"))?;
    push(stats_path, &mut artifacts);
    push(heat_base.with_extension("csv"), &mut artifacts);
    push(heat_base.with_extension("pgm"), &mut artifacts);

    // Stage: prune + zero-shot evaluation per variant.
    let mut variants = Vec::new();
    let mut primary_mask: Option<ExpertMask> = None;
    for (idx, spec_in) in cfg.prune.iter().enumerate() {
        let mut spec = spec_in.clone();
        if spec.strategy == PruneStrategy::Random && spec.seed.is_none() {
            spec.seed = Some(cfg.master_seed.wrapping_add(5));
        }
        // Counting-mode mismatches would silently reuse the wrong statistics.
        if spec.counting != stats.mode {
            return Err(Error::InvalidArg(format!(
                "prune variant {idx} wants {:?} counts but the count stage collected {:?}",
                spec.counting, stats.mode
            ))
            .in_stage("prune"));
        }
        let name = variant_name(&spec, idx);
        let mut mask_files = Vec::new();
        let (post_prune, reduction, representative_mask) = if spec.subject_specific {
            let masks = prune_subject_specific(&stats, &spec, &cfg.model)
                .map_err(|e| e.in_stage("prune"))?;
            for (label, m) in &masks {
                let file = format!("mask_{name}_{label}.json");
                save_mask(m, &spec, Some(stats.content_hash()), &out_dir.join(&file))
                    .map_err(|e| e.in_stage("prune"))?;
                push(out_dir.join(&file), &mut artifacts);
                mask_files.push(file);
            }
            let eval = evaluate_subject_specific(&model, &masks, &val_split, cfg.eval_k)
                .map_err(|e| e.in_stage("evaluate-pruned"))?;
            // Reductions are identical across subjects only when kept totals
            // agree; report the mean multiplier.
            let mut mem = 0.0;
            let mut flops = 0.0;
            let mut share = 0.0;
            for m in masks.values() {
                let r = reduction_report(
                    &cfg.model,
                    PruneAmount::Mask(m),
                    cfg.model.n_topk,
                    cfg.eval_k,
                )
                .map_err(|e| e.in_stage("prune"))?;
                mem += r.memory_multiplier;
                flops += r.flops_multiplier;
                share += r.expert_share;
            }
            let n = masks.len() as f64;
            let first = masks.values().next().unwrap().clone();
            let mut r = reduction_report(
                &cfg.model,
                PruneAmount::Mask(&first),
                cfg.model.n_topk,
                cfg.eval_k,
            )
            .map_err(|e| e.in_stage("prune"))?;
            r.memory_multiplier = mem / n;
            r.flops_multiplier = flops / n;
            r.expert_share = share / n;
            (eval, r, first)
        } else {
            let mask = apply_spec(&stats, &spec, &cfg.model).map_err(|e| e.in_stage("prune"))?;
            let file = format!("mask_{name}.json");
            save_mask(
                &mask,
                &spec,
                Some(stats.content_hash()),
                &out_dir.join(&file),
            )
            .map_err(|e| e.in_stage("prune"))?;
            push(out_dir.join(&file), &mut artifacts);
            mask_files.push(file);
            let eval = evaluate(&model, &mask, &val_split, cfg.eval_k)
                .map_err(|e| e.in_stage("evaluate-pruned"))?;
            let r = reduction_report(
                &cfg.model,
                PruneAmount::Mask(&mask),
                cfg.model.n_topk,
                cfg.eval_k,
            )
            .map_err(|e| e.in_stage("prune"))?;
            (eval, r, mask)
        };
        if idx == 0 {
            primary_mask = Some(representative_mask);
        }
        variants.push(VariantReport {
            name,
            spec,
            mask_files,
            accuracy_drop_from_dense: dense.accuracy - post_prune.accuracy,
            post_prune,
            reduction,
        });
    }

    // Stage: finetune (primary variant's mask, or dense when nothing pruned).
    let mut finetune_report = None;
    if let Some(ft) = &cfg.finetune {
        let run_ft = || -> Result<FinetuneReport> {
            let mask = primary_mask.clone().unwrap_or_else(|| full_mask.clone());
            let mut model_ft = model_clone(&model);
            let mut train_cfg = ft.train.clone();
            train_cfg.seed = cfg.master_seed.wrapping_add(4);
            let metrics = train(
                &mut model_ft,
                &mask,
                &train_split,
                &ft.schedule,
                &Objective::Task(ft.loss),
                &train_cfg,
            )?;
            let ft_base = out_dir.join("finetuned");
            save_checkpoint(
                &model_ft,
                cfg.master_seed,
                Some(serde_json::to_value(&ft.schedule)?),
                &ft_base,
            )?;
            save_metrics(&metrics, &out_dir.join("finetune_metrics.jsonl"))?;
            let eval = evaluate(&model_ft, &mask, &val_split, cfg.eval_k)?;
            Ok(FinetuneReport {
                variant: variants
                    .first()
                    .map(|v| v.name.clone())
                    .unwrap_or_else(|| "dense".into()),
                accuracy_drop_from_dense: dense.accuracy - eval.accuracy,
                final_mean_gate_entropy: eval.mean_gate_entropy,
                post_finetune: eval,
            })
        };
        let report = run_ft().map_err(|e| e.in_stage("finetune"))?;
        push(out_dir.join("finetuned.json"), &mut artifacts);
        push(out_dir.join("finetuned.bin"), &mut artifacts);
        push(out_dir.join("finetune_metrics.jsonl"), &mut artifacts);
        finetune_report = Some(report);
    }

    // Stage: report.
    let mut artifact_hashes = BTreeMap::new();
    for path in &artifacts {
        let name = path
            .strip_prefix(out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        artifact_hashes.insert(name, sha256_file(path).map_err(|e| e.in_stage("report"))?);
    }
    let report = PipelineReport {
        config: cfg.clone(),
        load_balance_used: cfg.pretrain_load_balance.is_some(),
        dense,
        variants,
        finetune: finetune_report,
        artifact_hashes,
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("report.txt"), format_report(&report))?;
    Ok(report)
}

fn model_clone(model: &Model) -> Model {
    Model {
        config: model.config.clone(),
        params: crate::model::Params {
            entries: model.params.entries.clone(),
        },
    }
}

pub fn format_report(r: &PipelineReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "dense accuracy: {:.4} (n={})  mean gate entropy {:.4}\n",
        r.dense.accuracy, r.dense.n_examples, r.dense.mean_gate_entropy
    ));
    out.push_str(&format!(
        "load-balancing aux during pretrain: {}\n",
        r.load_balance_used
    ));
    for v in &r.variants {
        out.push_str(&format!(
            "{:<24} acc {:.4}  drop {:+.4}  mem x{:.3}  flops x{:.3}  expert share {:.3}\n",
            v.name,
            v.post_prune.accuracy,
            v.accuracy_drop_from_dense,
            v.reduction.memory_multiplier,
            v.reduction.flops_multiplier,
            v.reduction.expert_share,
        ));
    }
    if let Some(ft) = &r.finetune {
        out.push_str(&format!(
            "finetuned[{}]          acc {:.4}  drop {:+.4}  gate entropy {:.4}\n",
            ft.variant,
            ft.post_finetune.accuracy,
            ft.accuracy_drop_from_dense,
            ft.final_mean_gate_entropy
        ));
    }
    out
}

/// Convenience for tests and the CLI: load a checkpointed model.
pub fn load_model(base: &Path) -> Result<Model> {
    Ok(load_checkpoint(base)?.0)
}
