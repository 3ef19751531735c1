//! Miniature autoregressive transformer: learned absolute positions,
//! pre-RMSNorm blocks, multi-head causal attention, SwiGLU feed-forward,
//! untied output head. All math is f64.
//!
//! There is one forward implementation, expressed on the autodiff tape;
//! inference runs it with constant leaves (no gradient work), so the
//! training and evaluation paths cannot drift apart. Incremental decoding
//! (KV cache) lives in `generate` and is pinned to this path by tests.
//!
//! Low-rank adapter deltas attach to the query and value projections:
//! `x·(W + s·A·B)` computed unmerged as `x·W + s·((x·A)·B)` so adapter
//! factors can be tape variables during training.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{NodeId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Proj {
    Q,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl BackboneConfig {
    /// Desk-scale reference configuration (well under the parameter budget).
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            ff_dim: 128,
            max_positions: 320,
        }
    }

    /// Gradient-check scale.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            ff_dim: 32,
            max_positions: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.ff_dim == 0 || self.max_positions == 0
        {
            return Err(Error::Config("all backbone dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub embed: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix,
    pub lm_head: Matrix,
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    // Box-Muller over the seeded stream
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl ModelParams {
    pub fn init(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ff_dim;
        let std = 0.02;
        // residual-branch outputs scaled down with depth
        let res_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Matrix::from_vec(1, d, vec![1.0; d]),
                wq: normal(&mut rng, d, d, std),
                wk: normal(&mut rng, d, d, std),
                wv: normal(&mut rng, d, d, std),
                wo: normal(&mut rng, d, d, res_std),
                mlp_norm: Matrix::from_vec(1, d, vec![1.0; d]),
                w_gate: normal(&mut rng, d, f, std),
                w_up: normal(&mut rng, d, f, std),
                w_down: normal(&mut rng, f, d, res_std),
            })
            .collect();
        Self {
            embed: normal(&mut rng, config.vocab_size, d, std),
            pos: normal(&mut rng, config.max_positions, d, std),
            layers,
            final_norm: Matrix::from_vec(1, d, vec![1.0; d]),
            lm_head: normal(&mut rng, d, config.vocab_size, std),
        }
    }

    /// Stable (name, matrix) enumeration; variable slots during full-model
    /// training and checkpoint array order both follow this order.
    pub fn entries(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.wq"), &layer.wq));
            out.push((format!("layers.{l}.wk"), &layer.wk));
            out.push((format!("layers.{l}.wv"), &layer.wv));
            out.push((format!("layers.{l}.wo"), &layer.wo));
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layers.{l}.w_gate"), &layer.w_gate));
            out.push((format!("layers.{l}.w_up"), &layer.w_up));
            out.push((format!("layers.{l}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layers.{l}.wq"), &mut layer.wq));
            out.push((format!("layers.{l}.wk"), &mut layer.wk));
            out.push((format!("layers.{l}.wv"), &mut layer.wv));
            out.push((format!("layers.{l}.wo"), &mut layer.wo));
            out.push((format!("layers.{l}.mlp_norm"), &mut layer.mlp_norm));
            out.push((format!("layers.{l}.w_gate"), &mut layer.w_gate));
            out.push((format!("layers.{l}.w_up"), &mut layer.w_up));
            out.push((format!("layers.{l}.w_down"), &mut layer.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn n_params(&self) -> usize {
        self.entries().iter().map(|(_, m)| m.len()).sum()
    }
}

/// One low-rank delta attached to a projection site: adds `scale·A·B` to the
/// site's weight. `a` is `D×r`, `b` is `r×D`.
#[derive(Clone, Debug)]
pub struct AdapterDelta {
    pub layer: usize,
    pub proj: Proj,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

/// Tape-variable binding for one delta during adapter training.
#[derive(Clone, Debug, Default)]
pub struct DeltaBinding {
    pub a_slot: Option<usize>,
    pub b_slot: Option<usize>,
    /// Inverted-dropout mask over the site input (training only).
    pub dropout_mask: Option<Matrix>,
}

pub struct TapedForward {
    /// `hidden[0]` = embeddings; `hidden[l]` = block `l` output, `l ≤ n_layers`.
    pub hidden: Vec<NodeId>,
    pub logits: NodeId,
    /// Row `t` = log-distribution of the token at position `t+1`.
    pub log_probs: NodeId,
}

/// Untaped forward result for one sequence.
#[derive(Clone, Debug)]
pub struct SeqHidden {
    pub layers: Vec<Matrix>,
    pub log_probs: Matrix,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ModelParams,
}

fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for r in 0..len {
        for c in r + 1..len {
            m.set(r, c, -1e30);
        }
    }
    m
}

/// 0/1 column selector pair for head `h`: `take` is `D×dh` (columns out),
/// `put` is `dh×D` (columns back).
fn head_selectors(d: usize, dh: usize, h: usize) -> (Matrix, Matrix) {
    let mut take = Matrix::zeros(d, dh);
    let mut put = Matrix::zeros(dh, d);
    for j in 0..dh {
        take.set(h * dh + j, j, 1.0);
        put.set(j, h * dh + j, 1.0);
    }
    (take, put)
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Validation("empty token sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds capacity {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Builds the forward computation on `tape`. With `train_base`, every
    /// base parameter becomes a variable whose slot is its `entries()` index;
    /// otherwise base parameters are constants. Adapter factors become
    /// variables per their binding. `bindings` is empty or parallel to
    /// `deltas`.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        deltas: &[AdapterDelta],
        bindings: &[DeltaBinding],
        train_base: bool,
    ) -> Result<TapedForward> {
        self.check_ids(ids)?;
        if !bindings.is_empty() && bindings.len() != deltas.len() {
            return Err(Error::Validation(
                "adapter bindings must be absent or one per delta".into(),
            ));
        }
        for d in deltas {
            if d.layer >= self.config.n_layers {
                return Err(Error::Adapter(format!(
                    "delta targets layer {} of a {}-layer backbone",
                    d.layer, self.config.n_layers
                )));
            }
            if d.a.shape() != (self.config.hidden_dim, d.a.cols()) || d.b.shape() != (d.a.cols(), self.config.hidden_dim) {
                return Err(Error::Adapter(format!(
                    "delta shapes {:?}·{:?} do not factor a {}×{} site",
                    d.a.shape(),
                    d.b.shape(),
                    self.config.hidden_dim,
                    self.config.hidden_dim
                )));
            }
        }

        let mut next_slot = 0usize;
        let mut reg = |tape: &mut Tape, m: &Matrix| -> NodeId {
            if train_base {
                let s = next_slot;
                next_slot += 1;
                tape.var(s, m.clone())
            } else {
                tape.constant(m.clone())
            }
        };

        // register in entries() order so slots match that enumeration
        let embed = reg(tape, &self.params.embed);
        let pos = reg(tape, &self.params.pos);
        let layer_nodes: Vec<[NodeId; 9]> = self
            .params
            .layers
            .iter()
            .map(|l| {
                [
                    reg(tape, &l.attn_norm),
                    reg(tape, &l.wq),
                    reg(tape, &l.wk),
                    reg(tape, &l.wv),
                    reg(tape, &l.wo),
                    reg(tape, &l.mlp_norm),
                    reg(tape, &l.w_gate),
                    reg(tape, &l.w_up),
                    reg(tape, &l.w_down),
                ]
            })
            .collect();
        let final_norm = reg(tape, &self.params.final_norm);
        let lm_head = reg(tape, &self.params.lm_head);

        // adapter factor nodes grouped by site
        struct SiteDelta {
            a: NodeId,
            b: NodeId,
            scale: f64,
            dropout: Option<NodeId>,
        }
        let mut site_deltas: Vec<Vec<(Proj, SiteDelta)>> =
            (0..self.config.n_layers).map(|_| Vec::new()).collect();
        for (i, d) in deltas.iter().enumerate() {
            let binding = bindings.get(i);
            let bind_node = |tape: &mut Tape, m: &Matrix, slot: Option<usize>| match slot {
                Some(s) => tape.var(s, m.clone()),
                None => tape.constant(m.clone()),
            };
            let a = bind_node(tape, &d.a, binding.and_then(|b| b.a_slot));
            let b = bind_node(tape, &d.b, binding.and_then(|b| b.b_slot));
            let dropout = binding
                .and_then(|bd| bd.dropout_mask.as_ref())
                .map(|m| tape.constant(m.clone()));
            site_deltas[d.layer].push((
                d.proj,
                SiteDelta {
                    a,
                    b,
                    scale: d.scale,
                    dropout,
                },
            ));
        }

        let len = ids.len();
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let mask = tape.constant(causal_mask(len));
        let selectors: Vec<(NodeId, NodeId)> = (0..self.config.n_heads)
            .map(|h| {
                let (take, put) = head_selectors(d, dh, h);
                (tape.constant(take), tape.constant(put))
            })
            .collect();

        let e = tape.gather_rows(embed, ids.to_vec());
        let p = tape.gather_rows(pos, (0..len).collect());
        let mut x = tape.add(e, p);
        let mut hidden = vec![x];

        for (l, nodes) in layer_nodes.iter().enumerate() {
            let [attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down] = *nodes;
            let xn = tape.rms_norm(x, attn_norm);
            let project = |tape: &mut Tape, w: NodeId, proj: Proj| -> NodeId {
                let mut out = tape.matmul(xn, w);
                for (p, sd) in &site_deltas[l] {
                    if *p != proj {
                        continue;
                    }
                    let input = match sd.dropout {
                        Some(m) => tape.hadamard(xn, m),
                        None => xn,
                    };
                    let xa = tape.matmul(input, sd.a);
                    let xab = tape.matmul(xa, sd.b);
                    let scaled = tape.scale(xab, sd.scale);
                    out = tape.add(out, scaled);
                }
                out
            };
            let q = project(tape, wq, Proj::Q);
            let k = tape.matmul(xn, wk);
            let v = project(tape, wv, Proj::V);
            let mut ctx: Option<NodeId> = None;
            for (take, put) in &selectors {
                let qh = tape.matmul(q, *take);
                let kh = tape.matmul(k, *take);
                let vh = tape.matmul(v, *take);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let masked = tape.add(scaled, mask);
                let attn = tape.row_softmax(masked);
                let ctx_h = tape.matmul(attn, vh);
                let contrib = tape.matmul(ctx_h, *put);
                ctx = Some(match ctx {
                    Some(c) => tape.add(c, contrib),
                    None => contrib,
                });
            }
            let attn_out = tape.matmul(ctx.expect("n_heads ≥ 1"), wo);
            x = tape.add(x, attn_out);

            let xn2 = tape.rms_norm(x, mlp_norm);
            let gate_lin = tape.matmul(xn2, w_gate);
            let gate = tape.silu(gate_lin);
            let up = tape.matmul(xn2, w_up);
            let gated = tape.hadamard(gate, up);
            let down = tape.matmul(gated, w_down);
            x = tape.add(x, down);
            hidden.push(x);
        }

        let normed = tape.rms_norm(x, final_norm);
        let logits = tape.matmul(normed, lm_head);
        let log_probs = tape.row_log_softmax(logits);
        if !tape.value(log_probs).all_finite() {
            return Err(Error::Numeric("forward pass".into()));
        }
        Ok(TapedForward {
            hidden,
            logits,
            log_probs,
        })
    }

    /// Inference forward for one sequence: every layer's activations plus
    /// per-position next-token log-probabilities.
    pub fn forward_hidden(&self, ids: &[usize], deltas: &[AdapterDelta]) -> Result<SeqHidden> {
        let mut tape = Tape::new();
        let f = self.forward_taped(&mut tape, ids, deltas, &[], false)?;
        Ok(SeqHidden {
            layers: f.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            log_probs: tape.value(f.log_probs).clone(),
        })
    }

    /// Batch convenience over [`forward_hidden`]; sequences stay ragged, no
    /// padding is introduced.
    pub fn forward_hidden_batch(
        &self,
        batch: &[Vec<usize>],
        deltas: &[AdapterDelta],
    ) -> Result<Vec<SeqHidden>> {
        batch.iter().map(|ids| self.forward_hidden(ids, deltas)).collect()
    }

    /// Σ over target positions of log P(yₜ | prompt, y₍<t₎). Empty target
    /// is defined as 0.
    pub fn sequence_logprob(
        &self,
        prompt_ids: &[usize],
        target_ids: &[usize],
        deltas: &[AdapterDelta],
    ) -> Result<f64> {
        if prompt_ids.is_empty() {
            return Err(Error::Validation("prompt must be non-empty".into()));
        }
        if target_ids.is_empty() {
            return Ok(0.0);
        }
        let mut full = prompt_ids.to_vec();
        full.extend_from_slice(target_ids);
        let fwd = self.forward_hidden(&full, deltas)?;
        let mut sum = 0.0;
        for (t, &tok) in target_ids.iter().enumerate() {
            sum += fwd.log_probs.get(prompt_ids.len() - 1 + t, tok);
        }
        Ok(sum)
    }
}

/// Selects hidden vectors by position: `out[b].row(j) = layer[b].row(idx)`,
/// with masked (`None`) entries zeroed and flagged false. An unmasked
/// out-of-range index is an error.
pub fn gather_indices(
    layer: &[&Matrix],
    indices: &[Vec<Option<usize>>],
) -> Result<(Vec<Matrix>, Vec<Vec<bool>>)> {
    if layer.len() != indices.len() {
        return Err(Error::Validation("gather batch size mismatch".into()));
    }
    let mut out = Vec::with_capacity(layer.len());
    let mut masks = Vec::with_capacity(layer.len());
    for (h, idx) in layer.iter().zip(indices) {
        let mut m = Matrix::zeros(idx.len(), h.cols());
        let mut mask = vec![false; idx.len()];
        for (j, entry) in idx.iter().enumerate() {
            if let Some(r) = entry {
                if *r >= h.rows() {
                    return Err(Error::Validation(format!(
                        "gather index {r} out of range for {} rows",
                        h.rows()
                    )));
                }
                m.row_mut(j).copy_from_slice(h.row(*r));
                mask[j] = true;
            }
        }
        out.push(m);
        masks.push(mask);
    }
    Ok((out, masks))
}

/// Contrastive-feature layer: the requested index, or the source fraction
/// 25/32 rescaled to this backbone's depth.
pub fn select_layer(n_layers: usize, requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(r) if r <= n_layers => Ok(r),
        Some(r) => Err(Error::Config(format!(
            "layer {r} out of range for a {n_layers}-layer backbone"
        ))),
        None => Ok(((25.0 / 32.0) * n_layers as f64).round() as usize),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamW, AdamWConfig};

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig::tiny(12), 7).unwrap()
    }

    fn demo_delta(bb: &Backbone, layer: usize, proj: Proj, seed: u64, zero_b: bool) -> AdapterDelta {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = bb.config.hidden_dim;
        let r = 2;
        AdapterDelta {
            layer,
            proj,
            a: normal(&mut rng, d, r, 0.1),
            b: if zero_b {
                Matrix::zeros(r, d)
            } else {
                normal(&mut rng, r, d, 0.1)
            },
            scale: 0.5,
        }
    }

    #[test]
    fn log_prob_rows_normalize() {
        let bb = tiny();
        let fwd = bb.forward_hidden(&[1, 2, 3, 4, 5], &[]).unwrap();
        for r in 0..fwd.log_probs.rows() {
            let sum: f64 = fwd.log_probs.row(r).iter().map(|lp| lp.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn hidden_shapes_cover_all_layers() {
        let bb = tiny();
        let batch = vec![vec![1, 2, 3], vec![4, 5, 6, 7]];
        let fwds = bb.forward_hidden_batch(&batch, &[]).unwrap();
        assert_eq!(fwds.len(), 2);
        for (ids, fwd) in batch.iter().zip(&fwds) {
            assert_eq!(fwd.layers.len(), bb.config.n_layers + 1);
            for layer in &fwd.layers {
                assert_eq!(layer.shape(), (ids.len(), bb.config.hidden_dim));
            }
        }
    }

    #[test]
    fn zero_initialized_adapter_is_identity() {
        let bb = tiny();
        let ids = vec![3, 1, 4, 1, 5];
        let plain = bb.forward_hidden(&ids, &[]).unwrap();
        let deltas = vec![
            demo_delta(&bb, 0, Proj::Q, 1, true),
            demo_delta(&bb, 1, Proj::V, 2, true),
        ];
        let adapted = bb.forward_hidden(&ids, &deltas).unwrap();
        for (a, b) in plain.layers.iter().zip(&adapted.layers) {
            assert!(a.sub(b).max_abs() < 1e-12);
        }
        assert!(plain.log_probs.sub(&adapted.log_probs).max_abs() < 1e-12);
    }

    #[test]
    fn nonzero_adapter_changes_outputs() {
        let bb = tiny();
        let ids = vec![3, 1, 4];
        let plain = bb.forward_hidden(&ids, &[]).unwrap();
        let adapted = bb
            .forward_hidden(&ids, &[demo_delta(&bb, 0, Proj::Q, 3, false)])
            .unwrap();
        assert!(plain.log_probs.sub(&adapted.log_probs).max_abs() > 1e-9);
    }

    #[test]
    fn causal_positions_ignore_future_tokens() {
        let bb = tiny();
        let a = bb.forward_hidden(&[1, 2, 3, 4, 5, 6], &[]).unwrap();
        let b = bb.forward_hidden(&[1, 2, 3, 9, 10, 11], &[]).unwrap();
        for t in 0..3 {
            for c in 0..bb.config.vocab_size {
                assert_eq!(
                    a.log_probs.get(t, c),
                    b.log_probs.get(t, c),
                    "position {t} leaked future information"
                );
            }
        }
    }

    #[test]
    fn sequence_logprob_contracts() {
        let bb = tiny();
        assert_eq!(bb.sequence_logprob(&[1, 2], &[], &[]).unwrap(), 0.0);
        // single-token target equals the matching forward entry
        let lp = bb.sequence_logprob(&[1, 2, 3], &[7], &[]).unwrap();
        let fwd = bb.forward_hidden(&[1, 2, 3, 7], &[]).unwrap();
        assert_eq!(lp, fwd.log_probs.get(2, 7));
        assert!(lp <= 0.0);
        // multi-token targets stay non-positive
        let lp2 = bb.sequence_logprob(&[1, 2, 3], &[7, 8, 9], &[]).unwrap();
        assert!(lp2 <= 0.0);
    }

    #[test]
    fn select_layer_rescales_source_fraction() {
        assert_eq!(select_layer(32, None).unwrap(), 25);
        assert_eq!(select_layer(8, None).unwrap(), 6);
        assert_eq!(select_layer(4, None).unwrap(), 3);
        assert_eq!(select_layer(8, Some(3)).unwrap(), 3);
        assert!(select_layer(8, Some(9)).is_err());
    }

    #[test]
    fn gather_indices_matches_loop_oracle() {
        let bb = tiny();
        let fwd = bb.forward_hidden(&[1, 2, 3, 4, 5, 6, 7], &[]).unwrap();
        let layer = &fwd.layers[1];
        let idx = vec![Some(3), None, Some(0), Some(6)];
        let (out, mask) = gather_indices(&[layer], &[idx.clone()]).unwrap();
        assert_eq!(mask[0], vec![true, false, true, true]);
        for (j, entry) in idx.iter().enumerate() {
            for c in 0..layer.cols() {
                let expect = entry.map_or(0.0, |r| layer.get(r, c));
                assert_eq!(out[0].get(j, c), expect);
            }
        }
        // fully masked row set
        let (zeros, m2) = gather_indices(&[layer], &[vec![None, None]]).unwrap();
        assert!(m2[0].iter().all(|&f| !f));
        assert_eq!(zeros[0].max_abs(), 0.0);
        // unmasked out-of-range is an error
        assert!(gather_indices(&[layer], &[vec![Some(99)]]).is_err());
    }

    #[test]
    fn first_index_gather_equals_first_row() {
        let bb = tiny();
        let fwd = bb.forward_hidden(&[2, 4, 6], &[]).unwrap();
        let layer = &fwd.layers[2];
        let (out, _) = gather_indices(&[layer], &[vec![Some(0)]]).unwrap();
        assert_eq!(out[0].row(0), layer.row(0));
    }

    #[test]
    fn capacity_and_vocab_violations_error() {
        let bb = tiny();
        let too_long = vec![1; bb.config.max_positions + 1];
        assert!(bb.forward_hidden(&too_long, &[]).is_err());
        assert!(bb.forward_hidden(&[bb.config.vocab_size], &[]).is_err());
        assert!(bb.forward_hidden(&[], &[]).is_err());
    }

    /// Teacher-forced NLL on the tape, loss over all positions after the first.
    fn lm_loss(bb: &Backbone, ids: &[usize], train_base: bool, deltas: &[AdapterDelta], bindings: &[DeltaBinding]) -> (Tape, NodeId) {
        let mut tape = Tape::new();
        let fwd = bb.forward_taped(&mut tape, ids, deltas, bindings, train_base).unwrap();
        let coords: Vec<(usize, usize)> = ids
            .iter()
            .enumerate()
            .skip(1)
            .map(|(t, &tok)| (t - 1, tok))
            .collect();
        let picked = tape.gather_entries(fwd.log_probs, coords);
        let total = tape.sum_all(picked);
        let loss = tape.scale(total, -1.0);
        (tape, loss)
    }

    #[test]
    fn base_parameter_gradients_match_finite_differences() {
        let bb = tiny();
        let ids = vec![2, 7, 1, 9, 4, 11];
        let (tape, loss) = lm_loss(&bb, &ids, true, &[], &[]);
        let grads = tape.backward(loss);

        let entries = bb.params.entries();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut checked = 0usize;
        for (slot, (name, m)) in entries.iter().enumerate() {
            let g = grads.get(slot).unwrap_or_else(|| panic!("no grad for {name}"));
            // sample a handful of coordinates per tensor
            for _ in 0..4 {
                let i = rng.gen_range(0..m.len());
                let eps = 1e-5;
                let probe = |delta: f64| -> f64 {
                    let mut pert = bb.clone();
                    pert.params.entries_mut()[slot].1.as_mut_slice()[i] += delta;
                    let (t2, l2) = lm_loss(&pert, &ids, false, &[], &[]);
                    t2.value(l2).item()
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let analytic = g.as_slice()[i];
                if analytic.abs() < 1e-10 && numeric.abs() < 1e-10 {
                    continue;
                }
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
                checked += 1;
            }
        }
        assert!(checked > 30, "too few informative coordinates checked");
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let bb = tiny();
        let ids = vec![5, 3, 8, 2, 10];
        let base = vec![
            demo_delta(&bb, 0, Proj::Q, 21, false),
            demo_delta(&bb, 1, Proj::V, 22, false),
        ];
        let bindings: Vec<DeltaBinding> = (0..base.len())
            .map(|i| DeltaBinding {
                a_slot: Some(2 * i),
                b_slot: Some(2 * i + 1),
                dropout_mask: None,
            })
            .collect();
        let (tape, loss) = lm_loss(&bb, &ids, false, &base, &bindings);
        let grads = tape.backward(loss);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (di, d) in base.iter().enumerate() {
            for (which, slot) in [(0usize, 2 * di), (1, 2 * di + 1)] {
                let m = if which == 0 { &d.a } else { &d.b };
                let g = grads.get(slot).expect("adapter grad");
                for _ in 0..6 {
                    let i = rng.gen_range(0..m.len());
                    let eps = 1e-5;
                    let probe = |delta: f64| -> f64 {
                        let mut pert = base.clone();
                        let target = if which == 0 { &mut pert[di].a } else { &mut pert[di].b };
                        target.as_mut_slice()[i] += delta;
                        let (t2, l2) = lm_loss(&bb, &ids, false, &pert, &[]);
                        t2.value(l2).item()
                    };
                    let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                    let analytic = g.as_slice()[i];
                    if analytic.abs() < 1e-10 && numeric.abs() < 1e-10 {
                        continue;
                    }
                    let rel =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel <= 1e-3, "delta {di}.{which}[{i}]: {analytic} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn adapter_training_reduces_teacher_forced_loss() {
        let bb = tiny();
        let ids = vec![2, 7, 1, 9, 4, 11, 3];
        let mut deltas = vec![demo_delta(&bb, 0, Proj::Q, 31, true), demo_delta(&bb, 1, Proj::V, 32, true)];
        let bindings: Vec<DeltaBinding> = (0..deltas.len())
            .map(|i| DeltaBinding {
                a_slot: Some(2 * i),
                b_slot: Some(2 * i + 1),
                dropout_mask: None,
            })
            .collect();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.01, ..AdamWConfig::default() }, 4);
        let loss_at = |deltas: &[AdapterDelta]| -> f64 {
            let (t, l) = lm_loss(&bb, &ids, false, deltas, &[]);
            t.value(l).item()
        };
        let before = loss_at(&deltas);
        for _ in 0..30 {
            let (tape, loss) = lm_loss(&bb, &ids, false, &deltas, &bindings);
            let grads = tape.backward(loss);
            let grad_vec: Vec<Option<Matrix>> = (0..4).map(|s| grads.get(s).cloned()).collect();
            let mut params: Vec<(usize, &mut Matrix)> = Vec::new();
            let (d0, d1) = deltas.split_at_mut(1);
            params.push((0, &mut d0[0].a));
            params.push((1, &mut d0[0].b));
            params.push((2, &mut d1[0].a));
            params.push((3, &mut d1[0].b));
            opt.step(&mut params, &grad_vec);
        }
        let after = loss_at(&deltas);
        assert!(after < before, "adapter training failed: {before} -> {after}");
    }
}
