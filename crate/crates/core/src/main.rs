//! Command-line front end for the MoE sparsification laboratory.
//!
//! Staged subcommands (`pretrain`, `count`, `prune`, `finetune`, `eval`) share
//! an output directory: each reads the artifacts its predecessors wrote there.
//! `pipeline` runs all stages in one process; `cost` is standalone.

use clap::{Args, Parser, Subcommand};
use moe_lab::cost::{cost_report, format_cost_table, preset, reduction_report, PruneAmount};
use moe_lab::data::{generate_task, Dataset};
use moe_lab::finetune::{save_metrics, train, Objective, TopKSchedule};
use moe_lab::model::{load_checkpoint, save_checkpoint, ExpertMask, Model, ModelConfig};
use moe_lab::pipeline::{collect_stats, evaluate, run_pipeline, PipelineConfig};
use moe_lab::prune::{apply_spec, load_mask, prune_subject_specific, save_mask, PruneStrategy};
use moe_lab::stats::ExpertStats;
use moe_lab::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "moe-lab",
    about = "Mixture-of-experts sparsification laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (JSON). Omit for the built-in default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory shared across staged subcommands.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data and train the dense model; writes the checkpoint.
    Pretrain(StageArgs),
    /// Accumulate expert-usage statistics from the training split.
    Count(StageArgs),
    /// Derive expert-keep masks from the counted statistics.
    Prune(StageArgs),
    /// Fine-tune under the primary mask with the configured schedule.
    Finetune(StageArgs),
    /// Evaluate the latest checkpoint (fine-tuned if present) on validation.
    Eval(StageArgs),
    /// Analytical parameter/FLOP tables and pruning reduction estimates.
    Cost {
        /// Model configuration (JSON); alternative to --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named preset: "table5-example", "mixtral-like", or "idealized".
        #[arg(long)]
        preset: Option<String>,
        /// Also report reductions at this expert sparsity (e.g. 0.25).
        #[arg(long)]
        sparsity: Option<f64>,
        /// Active experts per token after pruning (defaults to the config's).
        #[arg(long)]
        new_topk: Option<usize>,
        /// Directory for the JSON report alongside the printed table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage end to end and emit report.json / report.txt.
    Pipeline(StageArgs),
}

fn load_config(args: &StageArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => PipelineConfig::desk_default(0),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    cfg.model.validate()?;
    cfg.task.validate()?;
    Ok(cfg)
}

fn load_splits(out: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        Dataset::load(&out.join("data/train.json"))?,
        Dataset::load(&out.join("data/val.json"))?,
    ))
}

fn cmd_pretrain(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    std::fs::create_dir_all(args.out.join("data"))?;
    let mut task = cfg.task.clone();
    task.seed = cfg.master_seed.wrapping_add(1);
    let (train_split, val_split) = generate_task(&task).map_err(|e| e.in_stage("generate"))?;
    train_split
        .save(&args.out.join("data/train.json"))
        .map_err(|e| e.in_stage("generate"))?;
    val_split
        .save(&args.out.join("data/val.json"))
        .map_err(|e| e.in_stage("generate"))?;
    let run = || -> Result<()> {
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
        save_checkpoint(&model, cfg.master_seed, None, &args.out.join("pretrained"))?;
        save_metrics(&metrics, &args.out.join("pretrain_metrics.jsonl"))?;
        println!(
            "pretrain: {} steps, final loss {:.4}",
            metrics.len(),
            metrics.last().map(|m| m.loss).unwrap_or(f64::NAN)
        );
        Ok(())
    };
    run().map_err(|e| e.in_stage("pretrain"))
}

fn cmd_count(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let run = || -> Result<()> {
        let (model, _) = load_checkpoint(&args.out.join("pretrained"))?;
        let (train_split, _) = load_splits(&args.out)?;
        let mask = ExpertMask::full(cfg.model.n_layer, cfg.model.n_experts);
        let stats = collect_stats(
            &model,
            &mask,
            &train_split,
            cfg.model.n_topk,
            cfg.count.mode,
            cfg.count.subject_specific,
            cfg.count.readout_only,
        )?;
        stats.save(&args.out.join("stats.json"))?;
        stats.export_heatmap(&args.out.join("heatmap"))?;
        println!(
            "count: {:?} mode, {} tokens, hash {}",
            stats.mode,
            stats.tokens_seen,
            &stats.content_hash()[..12]
        );
        Ok(())
    };
    run().map_err(|e| e.in_stage("count"))
}

fn cmd_prune(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let run = || -> Result<()> {
        let stats = ExpertStats::load(&args.out.join("stats.json"))?;
        if cfg.prune.is_empty() {
            return Err(Error::InvalidArg("no prune variants configured".into()));
        }
        for (idx, spec_in) in cfg.prune.iter().enumerate() {
            let mut spec = spec_in.clone();
            if spec.strategy == PruneStrategy::Random && spec.seed.is_none() {
                spec.seed = Some(cfg.master_seed.wrapping_add(5));
            }
            if spec.subject_specific {
                let masks = prune_subject_specific(&stats, &spec, &cfg.model)?;
                for (label, m) in &masks {
                    let path = args.out.join(format!("mask_v{idx}_{label}.json"));
                    save_mask(m, &spec, Some(stats.content_hash()), &path)?;
                    println!("prune v{idx} [{label}]: kept {} experts", m.total_kept());
                }
            } else {
                let mask = apply_spec(&stats, &spec, &cfg.model)?;
                let path = args.out.join(format!("mask_v{idx}.json"));
                save_mask(&mask, &spec, Some(stats.content_hash()), &path)?;
                println!("prune v{idx}: kept {} experts", mask.total_kept());
            }
        }
        Ok(())
    };
    run().map_err(|e| e.in_stage("prune"))
}

fn cmd_finetune(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let run = || -> Result<()> {
        let ft = cfg
            .finetune
            .as_ref()
            .ok_or_else(|| Error::InvalidArg("no finetune stage configured".into()))?;
        let (mut model, _) = load_checkpoint(&args.out.join("pretrained"))?;
        let mask_path = args.out.join("mask_v0.json");
        let mask = if mask_path.exists() {
            load_mask(&mask_path)?.0
        } else {
            ExpertMask::full(cfg.model.n_layer, cfg.model.n_experts)
        };
        let (train_split, _) = load_splits(&args.out)?;
        let mut train_cfg = ft.train.clone();
        train_cfg.seed = cfg.master_seed.wrapping_add(4);
        let metrics = train(
            &mut model,
            &mask,
            &train_split,
            &ft.schedule,
            &Objective::Task(ft.loss),
            &train_cfg,
        )?;
        save_checkpoint(
            &model,
            cfg.master_seed,
            Some(serde_json::to_value(&ft.schedule)?),
            &args.out.join("finetuned"),
        )?;
        save_metrics(&metrics, &args.out.join("finetune_metrics.jsonl"))?;
        println!(
            "finetune: {} steps, final loss {:.4}",
            metrics.len(),
            metrics.last().map(|m| m.loss).unwrap_or(f64::NAN)
        );
        Ok(())
    };
    run().map_err(|e| e.in_stage("finetune"))
}

fn cmd_eval(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let run = || -> Result<()> {
        let base = if args.out.join("finetuned.json").exists() {
            args.out.join("finetuned")
        } else {
            args.out.join("pretrained")
        };
        let (model, _) = load_checkpoint(&base)?;
        let mask_path = args.out.join("mask_v0.json");
        let mask = if mask_path.exists() {
            load_mask(&mask_path)?.0
        } else {
            ExpertMask::full(cfg.model.n_layer, cfg.model.n_experts)
        };
        let (_, val_split) = load_splits(&args.out)?;
        let result = evaluate(&model, &mask, &val_split, cfg.eval_k)?;
        std::fs::write(
            args.out.join("eval.json"),
            serde_json::to_vec_pretty(&result)?,
        )?;
        println!(
            "eval[{}]: accuracy {:.4} (n={}), mean gate entropy {:.4}",
            base.file_name().unwrap().to_string_lossy(),
            result.accuracy,
            result.n_examples,
            result.mean_gate_entropy
        );
        Ok(())
    };
    run().map_err(|e| e.in_stage("eval"))
}

fn cmd_cost(
    config: Option<&Path>,
    preset_name: Option<&str>,
    sparsity: Option<f64>,
    new_topk: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let model: ModelConfig = match (config, preset_name) {
        (Some(path), None) => serde_json::from_slice(&std::fs::read(path)?)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => ModelConfig::desk_default(),
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArg(
                "pass --config or --preset, not both".into(),
            ))
        }
    };
    model.validate()?;
    let report = cost_report(&model);
    print!("{}", format_cost_table(&report));
    let reduction = match sparsity {
        Some(s) => Some(reduction_report(
            &model,
            PruneAmount::Sparsity(s),
            model.n_topk,
            new_topk.unwrap_or(model.n_topk),
        )?),
        None => None,
    };
    if let Some(r) = &reduction {
        println!(
            "reduction at sparsity {:.2}: memory x{:.4}, flops x{:.4} (k {} -> {}), expert share {:.4}",
            sparsity.unwrap(),
            r.memory_multiplier,
            r.flops_multiplier,
            r.k_base,
            r.k_new,
            r.expert_share
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cost.json"), serde_json::to_vec_pretty(&report)?)?;
        if let Some(r) = &reduction {
            std::fs::write(dir.join("reduction.json"), serde_json::to_vec_pretty(r)?)?;
        }
    }
    Ok(())
}

fn cmd_pipeline(args: &StageArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let report = run_pipeline(&cfg, &args.out)?;
    print!("{}", moe_lab::pipeline::format_report(&report));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Count(a) => cmd_count(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cost {
            config,
            preset,
            sparsity,
            new_topk,
            out,
        } => cmd_cost(
            config.as_deref(),
            preset.as_deref(),
            *sparsity,
            *new_topk,
            out.as_deref(),
        ),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
