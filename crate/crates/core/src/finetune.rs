//! Stage-2 optimization: training under a top-K schedule with the
//! entropy-regularized loss, Adam with decoupled weight decay, and
//! router-only or full-parameter scopes. The same loop also serves as the
//! next-token pretrainer.

use crate::data::Dataset;
use crate::model::{is_router_param, ExpertMask, ForwardOutput, Model};
use crate::tape::{NodeId, Tape};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Static,
    Anneal,
}

/// Per-step active-expert count k_t: static, or annealed from k_start down
/// to k_end over a fraction of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKSchedule {
    pub mode: ScheduleMode,
    pub k_start: usize,
    pub k_end: usize,
    pub anneal_fraction: f64,
    pub total_steps: usize,
}

impl TopKSchedule {
    pub fn fixed(k: usize, total_steps: usize) -> TopKSchedule {
        TopKSchedule {
            mode: ScheduleMode::Static,
            k_start: k,
            k_end: k,
            anneal_fraction: 0.0,
            total_steps,
        }
    }

    pub fn anneal(
        k_start: usize,
        k_end: usize,
        anneal_fraction: f64,
        total_steps: usize,
    ) -> TopKSchedule {
        TopKSchedule {
            mode: ScheduleMode::Anneal,
            k_start,
            k_end,
            anneal_fraction,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_end == 0 || self.k_end > self.k_start {
            return Err(Error::InvalidArg(format!(
                "schedule requires 1 <= k_end ({}) <= k_start ({})",
                self.k_end, self.k_start
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArg("schedule needs total_steps >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(Error::InvalidArg("anneal_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// k at a given step: linear interpolation with half-up rounding during
    /// the anneal window, then held at k_end.
    pub fn k_at(&self, step: usize) -> usize {
        match self.mode {
            ScheduleMode::Static => self.k_start,
            ScheduleMode::Anneal => {
                let span = self.anneal_fraction * self.total_steps as f64;
                if span <= 0.0 || step as f64 >= span {
                    return self.k_end;
                }
                let v = self.k_start as f64
                    + (self.k_end as f64 - self.k_start as f64) * (step as f64 / span);
                (v + 0.5).floor() as usize
            }
        }
    }

    /// Largest k the schedule will ever request.
    pub fn k_max(&self) -> usize {
        self.k_at(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Entropy regularizer weight λ >= 0; the entropy term is the mean over
    /// (token, MoE layer) pairs.
    pub lambda: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArg(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    All,
    RouterOnly,
}

fn default_weight_decay() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub trainable_scope: TrainScope,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArg(
                "steps and batch_size must be >= 1".into(),
            ));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || !self.learning_rate.is_finite()
        {
            return Err(Error::InvalidArg(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// What the loop optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Next-token prediction over the full sequence (content + label token),
    /// with an optional load-balancing auxiliary weight.
    NextToken { load_balance: Option<f64> },
    /// Label prediction at the last content position with the
    /// entropy-regularized loss.
    Task(LossConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub k: usize,
    pub loss: f64,
    pub ce: f64,
    /// λ-weighted entropy contribution to the loss.
    pub entropy_term: f64,
    /// Mean gating entropy over (token, MoE layer) pairs.
    pub mean_gate_entropy: f64,
}

pub fn save_metrics(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for m in metrics {
        serde_json::to_writer(&mut f, m)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

struct Adam {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n_params: usize) -> Adam {
        Adam {
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    /// One AdamW update for a single parameter tensor.
    fn update(
        &mut self,
        index: usize,
        param: &mut [f64],
        grad: &[f64],
        lr: f64,
        weight_decay: f64,
    ) {
        let m = self.m[index].get_or_insert_with(|| vec![0.0; param.len()]);
        let v = self.v[index].get_or_insert_with(|| vec![0.0; param.len()]);
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..param.len() {
            m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * grad[i];
            v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * (mhat / (vhat.sqrt() + Self::EPS) + weight_decay * param[i]);
        }
    }
}

/// Assemble the regularized task loss on the tape: mean cross-entropy at the given
/// logit rows plus λ times the mean gating entropy over all MoE layers.
/// Returns (loss, ce, mean_gate_entropy) nodes.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    target_rows: &[usize],
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    cfg.validate()?;
    if target_rows.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} target rows vs {} targets",
            target_rows.len(),
            targets.len()
        )));
    }
    let rows = tape.gather_rows(out.logits, target_rows)?;
    let ce = tape.cross_entropy_mean(rows, targets)?;
    let ent = mean_gate_entropy_node(tape, out)?;
    let loss = if cfg.lambda == 0.0 {
        ce
    } else {
        tape.add_scaled(ce, ent, cfg.lambda)?
    };
    Ok((loss, ce, ent))
}

/// Mean over MoE layers of the per-token mean gating entropy.
pub fn mean_gate_entropy_node(tape: &mut Tape, out: &ForwardOutput) -> Result<NodeId> {
    let n_layer = out.gate_prob_nodes.len();
    let mut acc: Option<NodeId> = None;
    for &probs in &out.gate_prob_nodes {
        let h = tape.entropy_mean_rows(probs)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::InvalidArg("model has no MoE layers".into()))?;
    Ok(tape.scale(sum, 1.0 / n_layer as f64))
}

/// Switch-style load-balancing auxiliary: E * Σ_e f_e · mean_i p_{i,e},
/// averaged over layers. f_e is the fraction of routed (token, slot)
/// assignments landing on expert e.
fn load_balance_node(tape: &mut Tape, out: &ForwardOutput) -> Result<NodeId> {
    let n_layer = out.records.len();
    let mut acc: Option<NodeId> = None;
    for (rec, &probs) in out.records.iter().zip(&out.gate_prob_nodes) {
        let n_experts = tape.value(probs).shape[1];
        let mut counts = vec![0.0f64; n_experts];
        let mut total = 0.0;
        for sel in &rec.selected {
            for &j in sel {
                counts[j] += 1.0;
                total += 1.0;
            }
        }
        if total == 0.0 {
            continue;
        }
        let coeff: Vec<f64> = counts
            .iter()
            .map(|c| n_experts as f64 * c / total)
            .collect();
        let aux = tape.col_mean_dot(probs, &coeff)?;
        acc = Some(match acc {
            None => aux,
            Some(a) => tape.add(a, aux)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::InvalidArg("model has no MoE layers".into()))?;
    Ok(tape.scale(sum, 1.0 / n_layer as f64))
}

/// Train in place. Deterministic given the seed; returns one metrics record
/// per step. Aborts with a diagnostic if the loss goes non-finite.
pub fn train(
    model: &mut Model,
    mask: &ExpertMask,
    data: &Dataset,
    schedule: &TopKSchedule,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    schedule.validate()?;
    if schedule.total_steps != cfg.steps {
        return Err(Error::InvalidArg(format!(
            "schedule covers {} steps, train config has {}",
            schedule.total_steps, cfg.steps
        )));
    }
    if data.examples.is_empty() {
        return Err(Error::InvalidArg("empty training set".into()));
    }
    let n_layer = model.config.n_layer;
    mask.validate(n_layer, model.config.n_experts, schedule.k_max())?;
    let trainable: Box<dyn Fn(&str) -> bool> = match cfg.trainable_scope {
        TrainScope::All => Box::new(|_: &str| true),
        TrainScope::RouterOnly => Box::new(is_router_param),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params.entries.len());
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let k = schedule.k_at(step);
        let k_per_layer = vec![k; n_layer];
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..data.examples.len()))
            .collect();

        let (tokens, target_rows, targets): (Vec<Vec<u32>>, Vec<usize>, Vec<usize>) =
            match objective {
                Objective::NextToken { .. } => {
                    let seqs: Vec<Vec<u32>> = batch
                        .iter()
                        .map(|&i| {
                            let e = &data.examples[i];
                            let mut s = e.tokens.clone();
                            s.push(e.label);
                            s
                        })
                        .collect();
                    let seq = seqs[0].len();
                    let mut rows = Vec::new();
                    let mut tgts = Vec::new();
                    for (b, s) in seqs.iter().enumerate() {
                        for t in 0..seq - 1 {
                            rows.push(b * seq + t);
                            tgts.push(s[t + 1] as usize);
                        }
                    }
                    (seqs, rows, tgts)
                }
                Objective::Task(_) => {
                    let seqs: Vec<Vec<u32>> = batch
                        .iter()
                        .map(|&i| data.examples[i].tokens.clone())
                        .collect();
                    let seq = seqs[0].len();
                    let rows = (0..seqs.len()).map(|b| b * seq + (seq - 1)).collect();
                    let tgts = batch
                        .iter()
                        .map(|&i| data.examples[i].label as usize)
                        .collect();
                    (seqs, rows, tgts)
                }
            };

        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &tokens, mask, &k_per_layer, trainable.as_ref())?;

        let (loss, ce, ent, lambda) = match objective {
            Objective::Task(loss_cfg) => {
                let (loss, ce, ent) =
                    total_loss(&mut tape, &out, &target_rows, &targets, loss_cfg)?;
                (loss, ce, ent, loss_cfg.lambda)
            }
            Objective::NextToken { load_balance } => {
                let rows = tape.gather_rows(out.logits, &target_rows)?;
                let ce = tape.cross_entropy_mean(rows, &targets)?;
                let ent = mean_gate_entropy_node(&mut tape, &out)?;
                let loss = match load_balance {
                    Some(w) => {
                        let aux = load_balance_node(&mut tape, &out)?;
                        tape.add_scaled(ce, aux, *w)?
                    }
                    None => ce,
                };
                (loss, ce, ent, 0.0)
            }
        };

        let loss_v = tape.value(loss).data[0];
        let ce_v = tape.value(ce).data[0];
        let ent_v = tape.value(ent).data[0];
        if !loss_v.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss {loss_v} at step {step} (k={k})"
            )));
        }
        tape.backward(loss)?;

        adam.begin_step();
        for &(pi, leaf) in &out.trainable_leaves {
            if let Some(grad) = tape.grad(leaf) {
                let grad = grad.to_vec();
                adam.update(
                    pi,
                    &mut model.params.entries[pi].1.data,
                    &grad,
                    cfg.learning_rate,
                    cfg.weight_decay,
                );
            }
        }

        metrics.push(StepMetrics {
            step,
            k,
            loss: loss_v,
            ce: ce_v,
            entropy_term: lambda * ent_v,
            mean_gate_entropy: ent_v,
        });
    }
    Ok(metrics)
}
