//! Small decoder-style transformer whose feed-forward blocks are MoE layers:
//! learned gating, top-k routing per token, expert masks, per-layer k
//! overrides, and a manifest+blob checkpoint format.

use crate::tape::{NodeId, Tape};
use crate::tensor::{arg_topk, masked_softmax, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// All transformer/MoE hyperparameters, shared by the trainable model and the
/// analytical cost formulas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_attn: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub n_topk: usize,
    pub n_vocab: usize,
    pub n_ctx: usize,
    /// Weight matrices per expert: 2 for the plain two-matrix feed-forward,
    /// 3 for gated-FF variants (cost model only).
    pub ff_matrices: usize,
}

impl ModelConfig {
    /// Minute-scale CPU default used by the experiment harness.
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_layer: 2,
            n_head: 4,
            d_attn: 64,
            d_ff: 256,
            n_experts: 8,
            n_topk: 2,
            n_vocab: 512,
            n_ctx: 64,
            ff_matrices: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_layer,
            self.n_head,
            self.d_attn,
            self.d_ff,
            self.n_experts,
            self.n_topk,
            self.n_vocab,
            self.n_ctx,
            self.ff_matrices,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArg("all config extents must be >= 1".into()));
        }
        if self.n_topk > self.n_experts {
            return Err(Error::InvalidArg(format!(
                "n_topk {} > n_experts {}",
                self.n_topk, self.n_experts
            )));
        }
        if !self.d_attn.is_multiple_of(self.n_head) {
            return Err(Error::InvalidArg(format!(
                "d_attn {} not divisible by n_head {}",
                self.d_attn, self.n_head
            )));
        }
        Ok(())
    }
}

/// Per-layer boolean keep/remove decisions over experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMask {
    pub keep: Vec<Vec<bool>>,
}

impl ExpertMask {
    pub fn full(n_layer: usize, n_experts: usize) -> ExpertMask {
        ExpertMask {
            keep: vec![vec![true; n_experts]; n_layer],
        }
    }

    pub fn kept_count(&self, layer: usize) -> usize {
        self.keep[layer].iter().filter(|&&b| b).count()
    }

    pub fn min_kept(&self) -> usize {
        (0..self.keep.len())
            .map(|l| self.kept_count(l))
            .min()
            .unwrap_or(0)
    }

    pub fn total_kept(&self) -> usize {
        (0..self.keep.len()).map(|l| self.kept_count(l)).sum()
    }

    pub fn kept_indices(&self, layer: usize) -> Vec<usize> {
        self.keep[layer]
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn validate(&self, n_layer: usize, n_experts: usize, min_keep: usize) -> Result<()> {
        if self.keep.len() != n_layer {
            return Err(Error::Shape(format!(
                "mask has {} layers, model has {n_layer}",
                self.keep.len()
            )));
        }
        for (l, row) in self.keep.iter().enumerate() {
            if row.len() != n_experts {
                return Err(Error::Shape(format!(
                    "mask layer {l} has {} experts, model has {n_experts}",
                    row.len()
                )));
            }
            let kept = row.iter().filter(|&&b| b).count();
            if kept < min_keep.max(1) {
                return Err(Error::Infeasible(format!(
                    "mask layer {l} keeps {kept} experts, need at least {}",
                    min_keep.max(1)
                )));
            }
        }
        Ok(())
    }
}

/// Routing outcome for one MoE layer over one batch of tokens.
#[derive(Debug, Clone)]
pub struct RoutingRecord {
    pub layer: usize,
    /// Per-token probability vector over ALL experts; masked experts carry 0.
    pub gate_probs: Vec<Vec<f64>>,
    /// Per-token selected expert indices, length k, descending probability.
    pub selected: Vec<Vec<usize>>,
    /// Per-token combine weights over the selected experts, summing to 1.
    pub combine_weights: Vec<Vec<f64>>,
}

impl RoutingRecord {
    pub fn n_tokens(&self) -> usize {
        self.gate_probs.len()
    }
}

/// Route one token: mask logits to -inf, softmax over survivors, pick the
/// top-k, and renormalize the selected probabilities into combine weights.
pub fn route(logits: &[f64], k: usize, keep: &[bool]) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let kept = keep.iter().filter(|&&b| b).count();
    if k > kept {
        return Err(Error::Infeasible(format!(
            "k={k} exceeds {kept} kept experts"
        )));
    }
    let probs = masked_softmax(logits, keep)?;
    let selected = arg_topk(&probs, k)?;
    let denom: f64 = selected.iter().map(|&j| probs[j]).sum();
    let weights: Vec<f64> = selected.iter().map(|&j| probs[j] / denom).collect();
    Ok((probs, selected, weights))
}

/// Named parameter store. Names are stable and define checkpoint layout.
#[derive(Debug, Clone)]
pub struct Params {
    pub entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index_of(name).expect("unknown parameter")].1
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Names of the gating (router) parameters; the router-only fine-tuning scope
/// trains exactly these.
pub fn is_router_param(name: &str) -> bool {
    name.ends_with(".router")
}

pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// One forward pass recorded on a tape.
pub struct ForwardOutput {
    /// Next-token logits, [batch*seq, n_vocab].
    pub logits: NodeId,
    /// Per-MoE-layer routing outcomes.
    pub records: Vec<RoutingRecord>,
    /// Per-MoE-layer gate probability nodes, [batch*seq, n_experts]; feeds
    /// the entropy regularizer and the load-balancing term.
    pub gate_prob_nodes: Vec<NodeId>,
    /// (param index, leaf node) for every parameter marked trainable.
    pub trainable_leaves: Vec<(usize, NodeId)>,
    pub batch: usize,
    pub seq: usize,
}

struct LayerNodes {
    wqkv: NodeId,
    wproj: NodeId,
    router: NodeId,
    experts: Vec<(NodeId, NodeId)>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        if config.ff_matrices != 2 {
            return Err(Error::InvalidArg(
                "trainable model supports ff_matrices=2 only (3 is a cost-model variant)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        entries.push((
            "tok_embed".into(),
            Tensor::rand_uniform(&[c.n_vocab, c.d_model], c.d_model, &mut rng),
        ));
        entries.push((
            "pos_embed".into(),
            Tensor::rand_uniform(&[c.n_ctx, c.d_model], c.d_model, &mut rng),
        ));
        for l in 0..c.n_layer {
            entries.push((
                format!("layer{l}.wqkv"),
                Tensor::rand_uniform(&[c.d_model, 3 * c.d_attn], c.d_model, &mut rng),
            ));
            entries.push((
                format!("layer{l}.wproj"),
                Tensor::rand_uniform(&[c.d_attn, c.d_model], c.d_attn, &mut rng),
            ));
            entries.push((
                format!("layer{l}.router"),
                Tensor::rand_uniform(&[c.d_model, c.n_experts], c.d_model, &mut rng),
            ));
            for e in 0..c.n_experts {
                entries.push((
                    format!("layer{l}.expert{e}.w1"),
                    Tensor::rand_uniform(&[c.d_model, c.d_ff], c.d_model, &mut rng),
                ));
                entries.push((
                    format!("layer{l}.expert{e}.w2"),
                    Tensor::rand_uniform(&[c.d_ff, c.d_model], c.d_ff, &mut rng),
                ));
            }
        }
        entries.push((
            "unembed".into(),
            Tensor::rand_uniform(&[c.d_model, c.n_vocab], c.d_model, &mut rng),
        ));
        Ok(Model {
            config,
            params: Params { entries },
        })
    }

    /// Forward pass over a batch of equal-length token sequences.
    ///
    /// `trainable` decides per parameter name whether its leaf requires
    /// gradients; pass `|_| false` for inference.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<u32>],
        mask: &ExpertMask,
        k_per_layer: &[usize],
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let batch = tokens.len();
        if batch == 0 {
            return Err(Error::InvalidArg("empty batch".into()));
        }
        let seq = tokens[0].len();
        if seq == 0 || seq > c.n_ctx {
            return Err(Error::InvalidArg(format!(
                "sequence length {seq} outside [1, {}]",
                c.n_ctx
            )));
        }
        if tokens.iter().any(|t| t.len() != seq) {
            return Err(Error::Shape("ragged batch".into()));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t as usize >= c.n_vocab) {
            return Err(Error::InvalidArg(format!(
                "token id {bad} >= n_vocab {}",
                c.n_vocab
            )));
        }
        mask.validate(c.n_layer, c.n_experts, 1)?;
        if k_per_layer.len() != c.n_layer {
            return Err(Error::Shape(format!(
                "k_per_layer has {} entries for {} layers",
                k_per_layer.len(),
                c.n_layer
            )));
        }

        // Parameter leaves.
        let mut trainable_leaves = Vec::new();
        let mut leaves = Vec::with_capacity(self.params.entries.len());
        for (pi, (name, tensor)) in self.params.entries.iter().enumerate() {
            let req = trainable(name);
            let id = tape.leaf(tensor.clone(), req);
            if req {
                trainable_leaves.push((pi, id));
            }
            leaves.push(id);
        }
        let by_name = |name: &str| leaves[self.params.index_of(name).unwrap()];

        let tok_ids: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let te = tape.gather_rows(by_name("tok_embed"), &tok_ids)?;
        let pe = tape.gather_rows(by_name("pos_embed"), &pos_ids)?;
        let mut x = tape.add(te, pe)?;

        let mut records = Vec::new();
        let mut gate_prob_nodes = Vec::new();
        #[allow(clippy::needless_range_loop)]
        for l in 0..c.n_layer {
            let nodes = LayerNodes {
                wqkv: by_name(&format!("layer{l}.wqkv")),
                wproj: by_name(&format!("layer{l}.wproj")),
                router: by_name(&format!("layer{l}.router")),
                experts: (0..c.n_experts)
                    .map(|e| {
                        (
                            by_name(&format!("layer{l}.expert{e}.w1")),
                            by_name(&format!("layer{l}.expert{e}.w2")),
                        )
                    })
                    .collect(),
            };
            // Attention block.
            let h = tape.layer_norm(x)?;
            let qkv = tape.matmul(h, nodes.wqkv)?;
            let q = tape.slice_cols(qkv, 0, c.d_attn)?;
            let k = tape.slice_cols(qkv, c.d_attn, 2 * c.d_attn)?;
            let v = tape.slice_cols(qkv, 2 * c.d_attn, 3 * c.d_attn)?;
            let att = tape.causal_attention(q, k, v, batch, seq, c.n_head)?;
            let proj = tape.matmul(att, nodes.wproj)?;
            x = tape.add(x, proj)?;
            // MoE block.
            let h2 = tape.layer_norm(x)?;
            let (moe_out, probs_node, record) =
                self.moe_forward(tape, h2, l, k_per_layer[l], &mask.keep[l], &nodes)?;
            x = tape.add(x, moe_out)?;
            gate_prob_nodes.push(probs_node);
            records.push(record);
        }
        let xf = tape.layer_norm(x)?;
        let logits = tape.matmul(xf, by_name("unembed"))?;
        Ok(ForwardOutput {
            logits,
            records,
            gate_prob_nodes,
            trainable_leaves,
            batch,
            seq,
        })
    }

    /// One MoE layer: route every token, evaluate only the selected experts,
    /// and combine with renormalized gate probabilities.
    fn moe_forward(
        &self,
        tape: &mut Tape,
        features: NodeId,
        layer: usize,
        k: usize,
        keep: &[bool],
        nodes: &LayerNodes,
    ) -> Result<(NodeId, NodeId, RoutingRecord)> {
        let c = &self.config;
        let kept = keep.iter().filter(|&&b| b).count();
        if k == 0 || k > kept {
            return Err(Error::Infeasible(format!(
                "layer {layer}: k={k} infeasible with {kept} kept experts"
            )));
        }
        let n_tok = tape.value(features).shape[0];
        let logits = tape.matmul(features, nodes.router)?;
        let probs_node = tape.softmax_rows(logits, Some(keep))?;

        // Hard selection happens on values; only the combine weights stay on
        // the differentiable path.
        let probs = tape.value(probs_node).data.clone();
        let mut selected: Vec<Vec<usize>> = Vec::with_capacity(n_tok);
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n_tok * k);
        for t in 0..n_tok {
            let row = &probs[t * c.n_experts..(t + 1) * c.n_experts];
            let sel = arg_topk(row, k)?;
            for &j in &sel {
                pairs.push((t, j));
            }
            selected.push(sel);
        }
        let sel_probs = tape.gather_elems(probs_node, &pairs, n_tok, k)?;
        let weights_node = tape.normalize_rows(sel_probs)?;
        let weights = tape.value(weights_node).data.clone();

        // Per-expert token lists: (token row, slot in the top-k list).
        let mut routed: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); c.n_experts];
        for (t, sel) in selected.iter().enumerate() {
            for (slot, &j) in sel.iter().enumerate() {
                routed[j].0.push(t);
                routed[j].1.push(slot);
            }
        }
        let mut out = tape.constant(Tensor::zeros(&[n_tok, c.d_model]));
        for (e, (rows, slots)) in routed.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let (w1, w2) = nodes.experts[e];
            let xe = tape.gather_rows(features, rows)?;
            let h1 = tape.matmul(xe, w1)?;
            let a = tape.relu(h1);
            let ye = tape.matmul(a, w2)?;
            let wpairs: Vec<(usize, usize)> =
                rows.iter().zip(slots).map(|(&r, &s)| (r, s)).collect();
            let we = tape.gather_elems(weights_node, &wpairs, rows.len(), 1)?;
            let ze = tape.mul_rows(ye, we)?;
            let contrib = tape.scatter_add_rows(ze, rows, n_tok)?;
            out = tape.add(out, contrib)?;
        }

        let record = RoutingRecord {
            layer,
            gate_probs: (0..n_tok)
                .map(|t| probs[t * c.n_experts..(t + 1) * c.n_experts].to_vec())
                .collect(),
            selected,
            combine_weights: (0..n_tok)
                .map(|t| weights[t * k..(t + 1) * k].to_vec())
                .collect(),
        };
        Ok((out, probs_node, record))
    }
}

// --- Checkpoint format: JSON manifest + little-endian f32 blob -------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_bytes: u64,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_state: Option<serde_json::Value>,
    pub params: Vec<ParamRecord>,
}

/// Write `<base>.json` (manifest) and `<base>.bin` (raw f32 LE blob).
pub fn save_checkpoint(
    model: &Model,
    seed: u64,
    schedule_state: Option<serde_json::Value>,
    base: &Path,
) -> Result<()> {
    let mut records = Vec::new();
    let mut blob: Vec<u8> = Vec::with_capacity(model.params.total_elements() * 4);
    for (name, tensor) in &model.params.entries {
        records.push(ParamRecord {
            name: name.clone(),
            shape: tensor.shape.clone(),
            offset_bytes: blob.len() as u64,
            len: tensor.numel(),
        });
        for &v in &tensor.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        seed,
        schedule_state,
        params: records,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::File::create(base.with_extension("json"))?.write_all(&json)?;
    std::fs::File::create(base.with_extension("bin"))?.write_all(&blob)?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(base.with_extension("json"))?)?;
    manifest.config.validate()?;
    let mut blob = Vec::new();
    std::fs::File::open(base.with_extension("bin"))?.read_to_end(&mut blob)?;
    let mut entries = Vec::with_capacity(manifest.params.len());
    for rec in &manifest.params {
        let start = rec.offset_bytes as usize;
        let end = start + rec.len * 4;
        if end > blob.len() {
            return Err(Error::Shape(format!(
                "checkpoint blob too short for parameter {}",
                rec.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        entries.push((rec.name.clone(), Tensor::from_vec(&rec.shape, data)?));
    }
    Ok((
        Model {
            config: manifest.config.clone(),
            params: Params { entries },
        },
        manifest,
    ))
}
