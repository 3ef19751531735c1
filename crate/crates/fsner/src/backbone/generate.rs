//! Incremental decoding (KV cache) and beam-search generation.
//!
//! The incremental path recomputes exactly the sums of the full forward in
//! the same accumulation order, so its next-token distributions are pinned
//! to `forward_hidden` by equality tests. Beam scores always accumulate the
//! raw log-probability — temperature/top-k/top-p shape only the candidate
//! set — so a returned score is directly comparable to `sequence_logprob`.

use super::model::{AdapterDelta, Backbone, Proj};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{log_softmax_row_in_place, sigmoid, softmax_row_in_place};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub num_beams: usize,
    pub max_new_tokens: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        // stock inference settings; with temperature 0 only num_beams and
        // max_new_tokens have any effect (top_k/top_p kept verbatim)
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 65536,
            num_beams: 4,
            max_new_tokens: 128,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be ≥ 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        if self.num_beams == 0 || self.top_k == 0 {
            return Err(Error::Config("num_beams and top_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// New tokens only (prompt excluded); includes the end marker when one
    /// was produced.
    pub ids: Vec<usize>,
    /// Summed raw log-probability of `ids` given the prompt.
    pub logprob: f64,
    /// True when decoding hit max_new_tokens (or capacity) before the end
    /// marker.
    pub truncated: bool,
}

fn rms_norm_row(x: &[f64], gain: &Matrix, out: &mut [f64]) {
    let n = x.len();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let inv = 1.0 / (ms + 1e-8).sqrt();
    for c in 0..n {
        out[c] = x[c] * inv * gain.get(0, c);
    }
}

/// Incremental decoder over cached keys/values; clonable so beam search can
/// branch states.
#[derive(Clone)]
pub struct Decoder<'a> {
    backbone: &'a Backbone,
    deltas: &'a [AdapterDelta],
    /// Per layer, grown t×D caches (heads concatenated).
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(backbone: &'a Backbone, deltas: &'a [AdapterDelta]) -> Self {
        let d = backbone.config.hidden_dim;
        Self {
            backbone,
            deltas,
            k: (0..backbone.config.n_layers).map(|_| Matrix::zeros(0, d)).collect(),
            v: (0..backbone.config.n_layers).map(|_| Matrix::zeros(0, d)).collect(),
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn remaining_capacity(&self) -> usize {
        self.backbone.config.max_positions - self.t
    }

    /// Appends one token; returns the log-distribution (1×V) of the next.
    pub fn step(&mut self, id: usize) -> Result<Matrix> {
        let cfg = &self.backbone.config;
        let params = &self.backbone.params;
        if id >= cfg.vocab_size {
            return Err(Error::Validation(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.t >= cfg.max_positions {
            return Err(Error::Validation(format!(
                "decode length {} exceeds capacity {}",
                self.t + 1,
                cfg.max_positions
            )));
        }
        let d = cfg.hidden_dim;
        let dh = cfg.head_dim();

        let mut x = Matrix::zeros(1, d);
        for c in 0..d {
            x.set(0, c, params.embed.get(id, c) + params.pos.get(self.t, c));
        }

        let mut xn = Matrix::zeros(1, d);
        for (l, layer) in params.layers.iter().enumerate() {
            rms_norm_row(x.row(0), &layer.attn_norm, xn.row_mut(0));
            let project = |w: &Matrix, proj: Proj| -> Matrix {
                let mut out = xn.matmul(w);
                for delta in self.deltas.iter().filter(|dl| dl.layer == l && dl.proj == proj) {
                    let xa = xn.matmul(&delta.a);
                    let xab = xa.matmul(&delta.b);
                    out.add_assign(&xab.scale(delta.scale));
                }
                out
            };
            let q = project(&layer.wq, Proj::Q);
            let k_new = xn.matmul(&layer.wk);
            let v_new = project(&layer.wv, Proj::V);

            // grow caches by one row
            let rows = self.t + 1;
            let grow = |cache: &mut Matrix, new_row: &Matrix| {
                let mut data = Vec::with_capacity(rows * d);
                data.extend_from_slice(cache.as_slice());
                data.extend_from_slice(new_row.as_slice());
                *cache = Matrix::from_vec(rows, d, data);
            };
            grow(&mut self.k[l], &k_new);
            grow(&mut self.v[l], &v_new);

            let mut ctx = Matrix::zeros(1, d);
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..cfg.n_heads {
                let off = h * dh;
                // scores over cached keys, same dot order as the full path
                let mut scores = Matrix::zeros(1, rows);
                for r in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..dh {
                        acc += q.get(0, off + j) * self.k[l].get(r, off + j);
                    }
                    scores.set(0, r, acc * scale);
                }
                softmax_row_in_place(scores.row_mut(0));
                for r in 0..rows {
                    let w = scores.get(0, r);
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        let c = off + j;
                        ctx.set(0, c, ctx.get(0, c) + w * self.v[l].get(r, c));
                    }
                }
            }
            x.add_assign(&ctx.matmul(&layer.wo));

            rms_norm_row(x.row(0), &layer.mlp_norm, xn.row_mut(0));
            let mut gate = xn.matmul(&layer.w_gate);
            for g in gate.as_mut_slice() {
                *g *= sigmoid(*g);
            }
            let up = xn.matmul(&layer.w_up);
            let gated = gate.hadamard(&up);
            x.add_assign(&gated.matmul(&layer.w_down));
        }

        rms_norm_row(x.row(0), &params.final_norm, xn.row_mut(0));
        let mut logits = xn.matmul(&params.lm_head);
        log_softmax_row_in_place(logits.row_mut(0));
        if !logits.all_finite() {
            return Err(Error::Numeric("incremental decode".into()));
        }
        self.t += 1;
        Ok(logits)
    }

    /// Feeds a token run; returns the final next-token log-distribution.
    pub fn feed(&mut self, ids: &[usize]) -> Result<Matrix> {
        if ids.is_empty() {
            return Err(Error::Validation("cannot feed an empty sequence".into()));
        }
        let mut last = None;
        for &id in ids {
            last = Some(self.step(id)?);
        }
        Ok(last.expect("non-empty"))
    }
}

/// Candidate continuations of one beam, ranked. Raw log-probs are kept for
/// scoring; temperature/top-k/top-p only restrict the candidate set.
fn candidate_tokens(log_probs: &Matrix, params: &GenerationParams, want: usize) -> Vec<(usize, f64)> {
    let v = log_probs.cols();
    let mut order: Vec<usize> = (0..v).collect();
    // rank by raw log-prob, token id breaking ties for determinism
    order.sort_by(|&a, &b| {
        log_probs
            .get(0, b)
            .partial_cmp(&log_probs.get(0, a))
            .unwrap()
            .then(a.cmp(&b))
    });
    let keep_k = params.top_k.min(v);
    let mut kept: Vec<usize> = Vec::with_capacity(keep_k);
    if params.top_p < 1.0 && params.temperature > 0.0 {
        // nucleus under the temperature-shaped distribution
        let mut shaped: Vec<f64> = order
            .iter()
            .map(|&t| log_probs.get(0, t) / params.temperature)
            .collect();
        softmax_row_in_place(&mut shaped);
        let mut cum = 0.0;
        for (rank, &tok) in order.iter().enumerate().take(keep_k) {
            kept.push(tok);
            cum += shaped[rank];
            if cum >= params.top_p {
                break;
            }
        }
    } else {
        kept.extend(order.iter().take(keep_k));
    }
    kept.into_iter()
        .take(want)
        .map(|t| (t, log_probs.get(0, t)))
        .collect()
}

struct Beam<'a> {
    decoder: Decoder<'a>,
    ids: Vec<usize>,
    logprob: f64,
    next_log_probs: Matrix,
}

impl Backbone {
    /// Beam-search generation. Never errors on running out of room: hitting
    /// max_new_tokens or positional capacity returns `truncated = true`.
    pub fn generate(
        &self,
        prompt_ids: &[usize],
        params: &GenerationParams,
        deltas: &[AdapterDelta],
        eos_id: usize,
    ) -> Result<Generated> {
        params.validate()?;
        let mut root = Decoder::new(self, deltas);
        let first = root.feed(prompt_ids)?;
        let mut live: Vec<Beam> = vec![Beam {
            decoder: root,
            ids: Vec::new(),
            logprob: 0.0,
            next_log_probs: first,
        }];
        let mut finished: Vec<Generated> = Vec::new();

        for _ in 0..params.max_new_tokens {
            if live.is_empty() || finished.len() >= params.num_beams {
                break;
            }
            // expand every live beam, keep the best num_beams continuations;
            // a beam with no positional room left finishes as-is so returned
            // sequences always fit back through a full forward pass
            let mut pool: Vec<(f64, usize, usize)> = Vec::new(); // (score, beam, token)
            for (bi, beam) in live.iter().enumerate() {
                if beam.decoder.remaining_capacity() == 0 {
                    finished.push(Generated {
                        ids: beam.ids.clone(),
                        logprob: beam.logprob,
                        truncated: true,
                    });
                    continue;
                }
                for (tok, lp) in candidate_tokens(&beam.next_log_probs, params, params.num_beams) {
                    pool.push((beam.logprob + lp, bi, tok));
                }
            }
            pool.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next_live: Vec<Beam> = Vec::new();
            for (score, bi, tok) in pool {
                if next_live.len() + finished.len() >= params.num_beams {
                    break;
                }
                let parent = &live[bi];
                let mut ids = parent.ids.clone();
                ids.push(tok);
                if tok == eos_id {
                    finished.push(Generated {
                        ids,
                        logprob: score,
                        truncated: false,
                    });
                    continue;
                }
                let mut decoder = parent.decoder.clone();
                let next_log_probs = decoder.step(tok)?;
                next_live.push(Beam {
                    decoder,
                    ids,
                    logprob: score,
                    next_log_probs,
                });
            }
            live = next_live;
        }
        for beam in live {
            finished.push(Generated {
                ids: beam.ids,
                logprob: beam.logprob,
                truncated: true,
            });
        }
        finished
            .into_iter()
            .max_by(|a, b| a.logprob.partial_cmp(&b.logprob).unwrap())
            .ok_or_else(|| Error::Validation("generation produced no sequences".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::BackboneConfig;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig::tiny(12), 7).unwrap()
    }

    #[test]
    fn incremental_matches_full_forward() {
        let bb = tiny();
        let ids = vec![1, 5, 3, 8, 2, 10, 4];
        let full = bb.forward_hidden(&ids, &[]).unwrap();
        let mut dec = Decoder::new(&bb, &[]);
        for (t, &id) in ids.iter().enumerate() {
            let row = dec.step(id).unwrap();
            for c in 0..bb.config.vocab_size {
                let diff = (row.get(0, c) - full.log_probs.get(t, c)).abs();
                assert!(diff < 1e-12, "position {t}, token {c}: diff {diff}");
            }
        }
    }

    #[test]
    fn incremental_matches_full_forward_with_adapters() {
        let bb = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = bb.config.hidden_dim;
        let mk = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.2..0.2)).collect())
        };
        let deltas = vec![
            AdapterDelta { layer: 0, proj: Proj::Q, a: mk(&mut rng, d, 2), b: mk(&mut rng, 2, d), scale: 0.5 },
            AdapterDelta { layer: 1, proj: Proj::V, a: mk(&mut rng, d, 2), b: mk(&mut rng, 2, d), scale: 0.5 },
        ];
        let ids = vec![2, 9, 4, 7];
        let full = bb.forward_hidden(&ids, &deltas).unwrap();
        let mut dec = Decoder::new(&bb, &deltas);
        let last = dec.feed(&ids).unwrap();
        for c in 0..bb.config.vocab_size {
            assert!((last.get(0, c) - full.log_probs.get(ids.len() - 1, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_equals_step_by_step_argmax_oracle() {
        let bb = tiny();
        let prompt = vec![1, 5, 3];
        let params = GenerationParams {
            num_beams: 1,
            max_new_tokens: 8,
            ..GenerationParams::default()
        };
        let eos = 11usize;
        let got = bb.generate(&prompt, &params, &[], eos).unwrap();

        // oracle: argmax at every step, smallest id on ties
        let mut dec = Decoder::new(&bb, &[]);
        let mut row = dec.feed(&prompt).unwrap();
        let mut ids = Vec::new();
        let mut lp = 0.0;
        for _ in 0..8 {
            let mut best = 0usize;
            for c in 1..bb.config.vocab_size {
                if row.get(0, c) > row.get(0, best) {
                    best = c;
                }
            }
            ids.push(best);
            lp += row.get(0, best);
            if best == eos {
                break;
            }
            row = dec.step(best).unwrap();
        }
        assert_eq!(got.ids, ids);
        assert!((got.logprob - lp).abs() < 1e-12);
    }

    #[test]
    fn returned_score_equals_sequence_logprob() {
        let bb = tiny();
        let prompt = vec![2, 6, 1];
        for beams in [1usize, 4] {
            let params = GenerationParams {
                num_beams: beams,
                max_new_tokens: 6,
                ..GenerationParams::default()
            };
            let got = bb.generate(&prompt, &params, &[], 11).unwrap();
            let lp = bb.sequence_logprob(&prompt, &got.ids, &[]).unwrap();
            assert!(
                (got.logprob - lp).abs() < 1e-6,
                "beams {beams}: {} vs {lp}",
                got.logprob
            );
        }
    }

    #[test]
    fn beam_four_never_scores_below_greedy() {
        let bb = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let len = rng.gen_range(1..6);
            let prompt: Vec<usize> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            let mk = |beams| GenerationParams {
                num_beams: beams,
                max_new_tokens: 5,
                ..GenerationParams::default()
            };
            let one = bb.generate(&prompt, &mk(1), &[], 11).unwrap();
            let four = bb.generate(&prompt, &mk(4), &[], 11).unwrap();
            assert!(
                four.logprob >= one.logprob - 1e-12,
                "beam search lost to greedy on {prompt:?}: {} < {}",
                four.logprob,
                one.logprob
            );
        }
    }

    #[test]
    fn truncation_is_flagged_not_thrown() {
        let bb = tiny();
        let params = GenerationParams {
            num_beams: 2,
            max_new_tokens: 3,
            ..GenerationParams::default()
        };
        // eos outside the vocab can never be generated
        let got = bb.generate(&[1, 2], &params, &[], usize::MAX).unwrap();
        assert!(got.truncated);
        assert_eq!(got.ids.len(), 3);
    }

    #[test]
    fn eos_terminates_and_is_included() {
        let bb = tiny();
        // every token is eos → first step finishes every beam
        let all = GenerationParams {
            num_beams: 4,
            max_new_tokens: 10,
            ..GenerationParams::default()
        };
        // pick eos = greedy argmax of the first step so it fires immediately
        let mut dec = Decoder::new(&bb, &[]);
        let row = dec.feed(&[1, 5, 3]).unwrap();
        let mut eos = 0;
        for c in 1..bb.config.vocab_size {
            if row.get(0, c) > row.get(0, eos) {
                eos = c;
            }
        }
        let got = bb.generate(&[1, 5, 3], &all, &[], eos).unwrap();
        assert_eq!(got.ids.last(), Some(&eos));
        assert!(!got.truncated);
    }

    #[test]
    fn zero_max_new_tokens_yields_empty_truncated() {
        let bb = tiny();
        let params = GenerationParams {
            num_beams: 1,
            max_new_tokens: 0,
            ..GenerationParams::default()
        };
        let got = bb.generate(&[1], &params, &[], 11).unwrap();
        assert!(got.ids.is_empty());
        assert_eq!(got.logprob, 0.0);
        assert!(got.truncated);
    }

    #[test]
    fn capacity_exhaustion_truncates() {
        let bb = tiny();
        let prompt: Vec<usize> = vec![1; bb.config.max_positions - 2];
        let params = GenerationParams {
            num_beams: 1,
            max_new_tokens: 50,
            ..GenerationParams::default()
        };
        let got = bb.generate(&prompt, &params, &[], usize::MAX).unwrap();
        assert!(got.truncated);
        assert!(got.ids.len() <= 2);
        // a prompt that already fills capacity yields an empty truncated
        // result rather than an error
        let full: Vec<usize> = vec![1; bb.config.max_positions];
        let got = bb.generate(&full, &params, &[], usize::MAX).unwrap();
        assert!(got.truncated);
        assert!(got.ids.is_empty());
    }

    #[test]
    fn invalid_params_rejected() {
        let bb = tiny();
        let bad = GenerationParams {
            temperature: -1.0,
            ..GenerationParams::default()
        };
        assert!(bb.generate(&[1], &bad, &[], 11).is_err());
        let bad_p = GenerationParams {
            top_p: 0.0,
            ..GenerationParams::default()
        };
        assert!(bb.generate(&[1], &bad_p, &[], 11).is_err());
    }

    #[test]
    fn stock_params_match_documented_values() {
        let p = GenerationParams::default();
        assert_eq!(p.temperature, 0.0);
        assert_eq!(p.top_p, 1.0);
        assert_eq!(p.top_k, 65536);
        assert_eq!(p.num_beams, 4);
        assert_eq!(p.max_new_tokens, 128);
    }
}
