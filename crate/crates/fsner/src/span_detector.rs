//! Stage one: train the backbone-plus-adapter to emit entity spans with a
//! masked generation loss regularized by a boundary contrastive loss, and
//! produce candidate spans at inference by generating and back-mapping
//! surface strings onto sentence tokens.

use crate::backbone::model::{select_layer, AdapterDelta, Backbone};
use crate::backbone::tokenizer::{Tokenizer, IM_END};
use crate::corpus::{LabeledSentence, TypeCatalog};
use crate::error::{Error, Result};
use crate::lora::{adapter_step, training_bindings, LoraAdapter, StageTag};
use crate::matrix::Matrix;
use crate::optim::{AdamW, AdamWConfig};
use crate::prompting::format::parse_generation;
use crate::prompting::{
    build_contrastive_indices, render_span_prompt, ContrastiveIndices, RenderedPrompt, Template,
};
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpanTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cutoff: usize,
    /// Weight of the contrastive term in `L_g + lambda·L_cl`.
    pub lambda: f64,
    /// Hidden layer whose states feed the contrastive loss; `None` picks the
    /// stock depth fraction via `select_layer`.
    pub contrastive_layer: Option<usize>,
    /// false = sum similarities over slots (the stated formula);
    /// true = mean over valid slots, kept for experimentation.
    pub mean_reduction: bool,
    pub seed: u64,
}

impl Default for SpanTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 5,
            batch_size: 1,
            cutoff: 256,
            lambda: 0.001,
            contrastive_layer: None,
            mean_reduction: false,
            seed: 0,
        }
    }
}

impl SpanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.cutoff == 0 {
            return Err(Error::Config("batch size and cutoff must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One training example: the rendered prompt plus, when the sentence has
/// entities, the boundary/anchor index tuples for the contrastive term.
#[derive(Clone, Debug)]
pub struct SpanExample {
    pub rendered: RenderedPrompt,
    pub contrastive: Option<ContrastiveIndices>,
}

pub fn build_span_examples(
    sentences: &[LabeledSentence],
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<Vec<SpanExample>> {
    sentences
        .iter()
        .map(|s| {
            let rendered = render_span_prompt(s, catalog, template, tokenizer, cutoff)?;
            let contrastive = if rendered.span_index_map.is_empty() {
                None
            } else {
                Some(build_contrastive_indices(&rendered)?)
            };
            Ok(SpanExample {
                rendered,
                contrastive,
            })
        })
        .collect()
}

/// Slot vectors for one span: anchor rows over the type-name mention, the
/// two interior boundary rows, and the four exterior rows. Masked negative
/// slots are ignored regardless of content (training supplies zeros there).
#[derive(Clone, Debug)]
pub struct SpanSlots {
    /// w×D, w ≥ 1; pooled by mean before normalization.
    pub anchor: Matrix,
    /// 2×D.
    pub pos: Matrix,
    /// 4×D.
    pub neg: Matrix,
    pub neg_mask: [bool; 4],
}

/// Per-example span slot groups; similarities sum over an example's spans
/// and the log-sigmoid terms average over examples.
#[derive(Clone, Debug, Default)]
pub struct ContrastiveBatch {
    pub examples: Vec<Vec<SpanSlots>>,
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Validation("contrastive batch is empty".into()));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.is_empty() {
                return Err(Error::Validation(format!(
                    "contrastive example {i} has no spans"
                )));
            }
            for (j, s) in ex.iter().enumerate() {
                let d = s.anchor.cols();
                if s.anchor.rows() == 0 {
                    return Err(Error::Validation(format!(
                        "example {i} span {j}: empty anchor"
                    )));
                }
                if s.pos.shape() != (2, d) || s.neg.shape() != (4, d) {
                    return Err(Error::Validation(format!(
                        "example {i} span {j}: pos must be 2×D and neg 4×D"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Similarity pair for one span: cosine of the pooled anchor against each
/// slot row, summed (masked negative slots contribute exactly zero and
/// receive zero gradient).
fn taped_span_sims(
    tape: &mut Tape,
    anchor: NodeId,
    pos: NodeId,
    neg: NodeId,
    neg_mask: &[bool; 4],
    mean_reduction: bool,
) -> (NodeId, NodeId) {
    let pooled = tape.mean_rows(anchor);
    let a_n = tape.l2_normalize_rows(pooled);
    let p_n = tape.l2_normalize_rows(pos);
    let n_n = tape.l2_normalize_rows(neg);
    let p_dots = tape.matmul_nt(a_n, p_n);
    let n_dots = tape.matmul_nt(a_n, n_n);
    let mask_row = Matrix::from_rows(&[neg_mask
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect::<Vec<_>>()]);
    let mask = tape.constant(mask_row);
    let n_masked = tape.hadamard(n_dots, mask);
    let mut sim_pos = tape.sum_all(p_dots);
    let mut sim_neg = tape.sum_all(n_masked);
    if mean_reduction {
        sim_pos = tape.scale(sim_pos, 0.5);
        let valid = neg_mask.iter().filter(|b| **b).count().max(1);
        sim_neg = tape.scale(sim_neg, 1.0 / valid as f64);
    }
    (sim_pos, sim_neg)
}

/// `log σ(sim_pos − sim_neg)` for one example, sims summed over its spans.
fn taped_example_term(
    tape: &mut Tape,
    spans: &[(NodeId, NodeId, NodeId, [bool; 4])],
    mean_reduction: bool,
) -> NodeId {
    let mut pos_total: Option<NodeId> = None;
    let mut neg_total: Option<NodeId> = None;
    for (anchor, pos, neg, mask) in spans {
        let (sp, sn) = taped_span_sims(tape, *anchor, *pos, *neg, mask, mean_reduction);
        pos_total = Some(match pos_total {
            Some(t) => tape.add(t, sp),
            None => sp,
        });
        neg_total = Some(match neg_total {
            Some(t) => tape.add(t, sn),
            None => sn,
        });
    }
    let diff = tape.sub(pos_total.unwrap(), neg_total.unwrap());
    tape.log_sigmoid(diff)
}

/// Contrastive term for one rendered prompt, built on the training tape from
/// the hidden states `h` of the chosen layer.
fn taped_contrastive_term(
    tape: &mut Tape,
    h: NodeId,
    idx: &ContrastiveIndices,
    mean_reduction: bool,
) -> NodeId {
    let spans: Vec<(NodeId, NodeId, NodeId, [bool; 4])> = (0..idx.pos.len())
        .map(|i| {
            let (ab, ae) = idx.type_anchor[i];
            let anchor = tape.gather_rows(h, (ab..ae).collect());
            let pos = tape.gather_rows(h, vec![idx.pos[i].0, idx.pos[i].1]);
            let neg = tape.gather_rows_masked(h, idx.neg[i].to_vec());
            let mask = idx.neg[i].map(|o| o.is_some());
            (anchor, pos, neg, mask)
        })
        .collect();
    taped_example_term(tape, &spans, mean_reduction)
}

/// `−(1/B) Σ_b log σ(sim(o,pos)_b − sim(o,neg)_b)` over provided slot
/// vectors. Loss hits ln 2 exactly when the sims tie, falls toward 0 as
/// positives dominate, and is invariant to positive rescaling of any slot.
pub fn contrastive_loss(batch: &ContrastiveBatch, mean_reduction: bool) -> Result<f64> {
    batch.validate()?;
    let mut tape = Tape::new();
    let mut total: Option<NodeId> = None;
    for ex in &batch.examples {
        let spans: Vec<(NodeId, NodeId, NodeId, [bool; 4])> = ex
            .iter()
            .map(|s| {
                (
                    tape.constant(s.anchor.clone()),
                    tape.constant(s.pos.clone()),
                    tape.constant(s.neg.clone()),
                    s.neg_mask,
                )
            })
            .collect();
        let term = taped_example_term(&mut tape, &spans, mean_reduction);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    let loss = tape.scale(total.unwrap(), -1.0 / batch.examples.len() as f64);
    Ok(tape.value(loss).item())
}

/// Negative log-likelihood summed over target (non-prompt) positions.
fn target_coords(rendered: &RenderedPrompt) -> Result<Vec<(usize, usize)>> {
    let coords: Vec<(usize, usize)> = rendered
        .token_ids
        .iter()
        .enumerate()
        .filter(|(t, _)| *t > 0 && !rendered.prompt_mask[*t])
        .map(|(t, &id)| (t - 1, id))
        .collect();
    if coords.is_empty() {
        return Err(Error::Validation(
            "prompt has no target positions to score".into(),
        ));
    }
    Ok(coords)
}

fn taped_generation_loss(
    tape: &mut Tape,
    log_probs: NodeId,
    rendered: &RenderedPrompt,
) -> Result<NodeId> {
    let coords = target_coords(rendered)?;
    let picked = tape.gather_entries(log_probs, coords);
    let summed = tape.sum_all(picked);
    Ok(tape.scale(summed, -1.0))
}

/// Batch generation loss on frozen weights: per-example NLL summed over
/// target positions, averaged over the batch. Equal to the mean of
/// `−sequence_logprob` over the batch by construction.
pub fn generation_loss(
    backbone: &Backbone,
    examples: &[RenderedPrompt],
    deltas: &[AdapterDelta],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Validation("generation loss needs examples".into()));
    }
    let mut total = 0.0;
    for rendered in examples {
        let coords = target_coords(rendered)?;
        let hidden = backbone.forward_hidden(&rendered.token_ids, deltas)?;
        let mut nll = 0.0;
        for (r, c) in coords {
            nll -= hidden.log_probs.get(r, c);
        }
        total += nll;
    }
    Ok(total / examples.len() as f64)
}

/// One optimizer step of the span stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpanTrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_g: f64,
    pub l_cl: f64,
    pub combined: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Trains the span-stage adapter against a frozen base. When `lambda` is 0
/// the contrastive graph is never built, so the run is bit-identical to
/// generation-only training at the same seed.
pub fn train_span_stage(
    backbone: &Backbone,
    examples: &[SpanExample],
    mut adapter: LoraAdapter,
    cfg: &SpanTrainConfig,
) -> Result<(LoraAdapter, Vec<SpanTrainRecord>)> {
    cfg.validate()?;
    adapter.require_stage(StageTag::Span)?;
    if examples.is_empty() {
        return Err(Error::Corpus("span stage has no training examples".into()));
    }
    let layer = select_layer(backbone.config.n_layers, cfg.contrastive_layer)?;
    let n_slots = 2 * adapter.sites.len();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            ..AdamWConfig::default()
        },
        n_slots,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad_acc: Vec<Option<Matrix>> = vec![None; n_slots];
            let mut lg_sum = 0.0;
            let mut lcl_sum = 0.0;
            for &ei in chunk {
                let ex = &examples[ei];
                let mut tape = Tape::new();
                let deltas = adapter.to_deltas();
                let bindings = training_bindings(
                    &adapter,
                    ex.rendered.token_ids.len(),
                    backbone.config.hidden_dim,
                    &mut rng,
                );
                let fwd = backbone.forward_taped(
                    &mut tape,
                    &ex.rendered.token_ids,
                    &deltas,
                    &bindings,
                    false,
                )?;
                let l_g = taped_generation_loss(&mut tape, fwd.log_probs, &ex.rendered)?;
                let mut combined = l_g;
                let mut lcl_val = 0.0;
                if cfg.lambda > 0.0 {
                    if let Some(idx) = &ex.contrastive {
                        let term =
                            taped_contrastive_term(&mut tape, fwd.hidden[layer], idx, cfg.mean_reduction);
                        let l_cl = tape.scale(term, -1.0);
                        lcl_val = tape.value(l_cl).item();
                        let weighted = tape.scale(l_cl, cfg.lambda);
                        combined = tape.add(l_g, weighted);
                    }
                }
                let lg_val = tape.value(l_g).item();
                let combined_val = tape.value(combined).item();
                if !combined_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite span loss at epoch {epoch} step {step} (example {ei}: l_g {lg_val}, l_cl {lcl_val})"
                    )));
                }
                lg_sum += lg_val;
                lcl_sum += lcl_val;
                let mut grads = tape.backward(combined);
                for s in 0..n_slots {
                    if let Some(g) = grads.take(s) {
                        match &mut grad_acc[s] {
                            Some(acc) => acc.add_assign(&g),
                            None => grad_acc[s] = Some(g),
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grad_acc.iter_mut().flatten() {
                *g = g.scale(inv);
            }
            adapter_step(&mut adapter, &mut opt, &grad_acc);
            step += 1;
            records.push(SpanTrainRecord {
                step,
                epoch,
                l_g: lg_sum * inv,
                l_cl: lcl_sum * inv,
                combined: (lg_sum + cfg.lambda * lcl_sum) * inv,
                learning_rate: cfg.learning_rate,
                seed: cfg.seed,
            });
        }
    }
    Ok((adapter, records))
}

/// Support-set pass of the span stage; `enabled = false` (the ablation
/// toggle) returns the adapter bit-identical with an empty log.
pub fn fine_tune_support(
    backbone: &Backbone,
    support: &[LabeledSentence],
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    adapter: LoraAdapter,
    cfg: &SpanTrainConfig,
    enabled: bool,
) -> Result<(LoraAdapter, Vec<SpanTrainRecord>)> {
    if !enabled {
        return Ok((adapter, Vec::new()));
    }
    let examples = build_span_examples(support, catalog, template, tokenizer, cfg.cutoff)?;
    train_span_stage(backbone, &examples, adapter, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedSpan {
    pub begin: usize,
    pub end: usize,
    pub surface: String,
    /// Sequence log-probability of the beam that produced this span.
    pub log_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpanDetection {
    pub spans: Vec<DetectedSpan>,
    pub sequence_logprob: f64,
    pub malformed: bool,
    /// Parsed items that could not be mapped back onto sentence tokens.
    pub dropped: usize,
    pub truncated: bool,
    pub raw: String,
}

/// Maps parsed surface strings onto token spans: leftmost window of unused
/// tokens that matches the item's words, claimed left to right.
pub fn map_items_to_spans(
    tokens: &[String],
    items: &[String],
    log_prob: f64,
) -> (Vec<DetectedSpan>, usize) {
    let mut used = vec![false; tokens.len()];
    let mut spans = Vec::new();
    let mut dropped = 0usize;
    for item in items {
        let words: Vec<&str> = item.split_whitespace().collect();
        if words.is_empty() || words.len() > tokens.len() {
            dropped += 1;
            continue;
        }
        let found = (0..=tokens.len() - words.len()).find(|&b| {
            (0..words.len()).all(|k| tokens[b + k] == words[k] && !used[b + k])
        });
        match found {
            Some(b) => {
                used[b..b + words.len()].iter_mut().for_each(|u| *u = true);
                spans.push(DetectedSpan {
                    begin: b,
                    end: b + words.len(),
                    surface: item.clone(),
                    log_prob,
                });
            }
            None => dropped += 1,
        }
    }
    (spans, dropped)
}

/// Renders the sentence's span prompt prefix without consulting its tags.
pub fn render_detection_prompt(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<RenderedPrompt> {
    let neutral = LabeledSentence::new(
        sentence.tokens.clone(),
        vec![catalog.non_entity_label().to_string(); sentence.len()],
        sentence.source_id.clone(),
    )?;
    render_span_prompt(&neutral, catalog, template, tokenizer, cutoff)
}

/// Generates candidate spans for one sentence. Malformed output yields an
/// empty candidate set with the flag raised, never an error.
#[allow(clippy::too_many_arguments)]
pub fn detect_spans(
    backbone: &Backbone,
    tokenizer: &Tokenizer,
    template: &Template,
    catalog: &TypeCatalog,
    sentence: &LabeledSentence,
    adapter: Option<&LoraAdapter>,
    params: &crate::backbone::GenerationParams,
    cutoff: usize,
) -> Result<SpanDetection> {
    if let Some(ad) = adapter {
        ad.require_stage(StageTag::Span)?;
    }
    let rendered = render_detection_prompt(sentence, catalog, template, tokenizer, cutoff)?;
    let deltas = adapter.map(|a| a.to_deltas()).unwrap_or_default();
    let generated = backbone.generate(rendered.prompt_ids(), params, &deltas, IM_END)?;
    let raw = tokenizer.decode(&generated.ids);
    let parsed = parse_generation(&raw);
    let (spans, dropped) = if parsed.malformed {
        (Vec::new(), parsed.dropped)
    } else {
        let (spans, unmapped) =
            map_items_to_spans(&sentence.tokens, &parsed.items, generated.logprob);
        (spans, parsed.dropped + unmapped)
    };
    Ok(SpanDetection {
        spans,
        sequence_logprob: generated.logprob,
        malformed: parsed.malformed,
        dropped,
        truncated: generated.truncated,
    raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::model::BackboneConfig;
    use rand::Rng;
    use crate::backbone::pretrain::{pretrain, PretrainConfig};
    use crate::backbone::tokenizer::build_vocab;
    use crate::backbone::GenerationParams;
    use crate::corpus::spans_from_tags;
    use crate::corpus::TagScheme;

    fn sent(tokens: &[&str], tags: &[&str]) -> LabeledSentence {
        LabeledSentence::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            tags.iter().map(|s| s.to_string()).collect(),
            "test",
        )
        .unwrap()
    }

    fn fixture() -> (TypeCatalog, Tokenizer, Template, Vec<LabeledSentence>) {
        let catalog = TypeCatalog::new(
            vec![
                ("ANIMAL".into(), "animal".into()),
                ("METAL".into(), "metal".into()),
            ],
            "O",
        )
        .unwrap();
        let sentences = vec![
            sent(
                &["the", "otter", "saw", "copper", "near"],
                &["O", "B-ANIMAL", "O", "B-METAL", "O"],
            ),
            sent(
                &["iron", "and", "the", "heron", "slept"],
                &["B-METAL", "O", "O", "B-ANIMAL", "O"],
            ),
            sent(&["it", "was", "quiet", "here"], &["O", "O", "O", "O"]),
            sent(
                &["lead", "fell", "by", "the", "crane"],
                &["B-METAL", "O", "O", "O", "B-ANIMAL"],
            ),
        ];
        let mut words: Vec<String> = Vec::new();
        for s in &sentences {
            words.extend(s.tokens.iter().cloned());
        }
        for extra in [
            "Below", "is", "a", "sentence", "paired", "with", "an", "entity", "schema.", "List",
            "every", "span", "exactly", "as", "appears", "in", "sentence.", "Types:", "Sentence:",
            "Answer:", "animal", "metal",
        ] {
            words.push(extra.into());
        }
        let tokenizer = Tokenizer::from_tokens(build_vocab(&words)).unwrap();
        (catalog, tokenizer, Template::span_default(), sentences)
    }

    fn unit(d: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        v
    }

    fn planted_batch(diffs: &[(f64, f64)]) -> ContrastiveBatch {
        // anchor along e1; pos slots at angle giving the requested cosine;
        // one valid neg slot at the requested cosine, rest masked
        let d = 6;
        let examples = diffs
            .iter()
            .map(|&(cp, cn)| {
                let mk_row = |c: f64| {
                    let s = (1.0 - c * c).max(0.0).sqrt();
                    let mut v = vec![0.0; d];
                    v[0] = c;
                    v[1] = s;
                    v
                };
                vec![SpanSlots {
                    anchor: Matrix::from_rows(&[unit(d, 0)]),
                    pos: Matrix::from_rows(&[mk_row(cp), mk_row(cp)]),
                    neg: Matrix::from_rows(&[
                        mk_row(cn),
                        vec![0.0; d],
                        vec![0.0; d],
                        vec![0.0; d],
                    ]),
                    neg_mask: [true, false, false, false],
                }]
            })
            .collect();
        ContrastiveBatch { examples }
    }

    #[test]
    fn tied_similarities_give_ln2() {
        // negatives replicate the positives in their two valid slots
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples: Vec<Vec<SpanSlots>> = (0..3)
            .map(|n| {
                (0..=n)
                    .map(|_| {
                        let row = |rng: &mut ChaCha8Rng| {
                            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
                        };
                        let p1 = row(&mut rng);
                        let p2 = row(&mut rng);
                        SpanSlots {
                            anchor: Matrix::from_rows(&[row(&mut rng), row(&mut rng)]),
                            pos: Matrix::from_rows(&[p1.clone(), p2.clone()]),
                            neg: Matrix::from_rows(&[p1, p2, vec![0.0; d], vec![0.0; d]]),
                            neg_mask: [true, true, false, false],
                        }
                    })
                    .collect()
            })
            .collect();
        let loss = contrastive_loss(&ContrastiveBatch { examples }, false).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_monotone_in_both_similarities() {
        // increasing positive cosine lowers the loss
        let grid = [-0.8, -0.3, 0.2, 0.6, 0.95];
        let mut prev = f64::INFINITY;
        for &cp in &grid {
            let loss = contrastive_loss(&planted_batch(&[(cp, 0.1)]), false).unwrap();
            assert!(loss < prev, "not decreasing at cp={cp}");
            prev = loss;
        }
        // increasing negative cosine raises the loss
        let mut prev = f64::NEG_INFINITY;
        for &cn in &grid {
            let loss = contrastive_loss(&planted_batch(&[(0.4, cn)]), false).unwrap();
            assert!(loss > prev, "not increasing at cn={cn}");
            prev = loss;
        }
    }

    #[test]
    fn loss_approaches_zero_as_gap_grows() {
        let near = contrastive_loss(&planted_batch(&[(1.0, -1.0)]), false).unwrap();
        let mid = contrastive_loss(&planted_batch(&[(0.9, -0.5)]), false).unwrap();
        assert!(near < mid && near < 0.2, "near {near}, mid {mid}");
    }

    #[test]
    fn empty_batch_and_empty_example_rejected() {
        assert!(contrastive_loss(&ContrastiveBatch::default(), false).is_err());
        let batch = ContrastiveBatch {
            examples: vec![vec![]],
        };
        assert!(contrastive_loss(&batch, false).is_err());
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let d = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mk = |rows: usize| {
            let data: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix::from_vec(rows, d, data)
        };
        // two examples, the first with two spans; one span has masked slots
        let batch = ContrastiveBatch {
            examples: vec![
                vec![
                    SpanSlots {
                        anchor: mk(2),
                        pos: mk(2),
                        neg: mk(4),
                        neg_mask: [true, true, true, true],
                    },
                    SpanSlots {
                        anchor: mk(1),
                        pos: mk(2),
                        neg: mk(4),
                        neg_mask: [true, false, true, false],
                    },
                ],
                vec![SpanSlots {
                    anchor: mk(1),
                    pos: mk(2),
                    neg: mk(4),
                    neg_mask: [false, true, true, true],
                }],
            ],
        };

        // analytic gradients: slot matrices as variables
        let mut tape = Tape::new();
        let mut slot = 0usize;
        let mut terms: Option<NodeId> = None;
        let mut var_map: Vec<(usize, usize, usize)> = Vec::new(); // (example, span, which)
        for (e, ex) in batch.examples.iter().enumerate() {
            let spans: Vec<(NodeId, NodeId, NodeId, [bool; 4])> = ex
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let a = tape.var(slot, s.anchor.clone());
                    var_map.push((e, si, 0));
                    slot += 1;
                    let p = tape.var(slot, s.pos.clone());
                    var_map.push((e, si, 1));
                    slot += 1;
                    let n = tape.var(slot, s.neg.clone());
                    var_map.push((e, si, 2));
                    slot += 1;
                    (a, p, n, s.neg_mask)
                })
                .collect();
            let term = taped_example_term(&mut tape, &spans, false);
            terms = Some(match terms {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        let loss = tape.scale(terms.unwrap(), -1.0 / batch.examples.len() as f64);
        assert!(
            (tape.value(loss).item() - contrastive_loss(&batch, false).unwrap()).abs() < 1e-12
        );
        let grads = tape.backward(loss);

        let eval = |b: &ContrastiveBatch| contrastive_loss(b, false).unwrap();
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (s, &(e, si, which)) in var_map.iter().enumerate() {
            let g = grads.get(s).expect("gradient for slot");
            let pick = |b: &ContrastiveBatch| match which {
                0 => b.examples[e][si].anchor.clone(),
                1 => b.examples[e][si].pos.clone(),
                _ => b.examples[e][si].neg.clone(),
            };
            let m = pick(&batch);
            for _ in 0..4 {
                let idx = rng.gen_range(0..m.len());
                let mut plus = batch.clone();
                let mut minus = batch.clone();
                let bump = |b: &mut ContrastiveBatch, delta: f64| {
                    let target = match which {
                        0 => &mut b.examples[e][si].anchor,
                        1 => &mut b.examples[e][si].pos,
                        _ => &mut b.examples[e][si].neg,
                    };
                    target.as_mut_slice()[idx] += delta;
                };
                bump(&mut plus, eps);
                bump(&mut minus, -eps);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let an = g.as_slice()[idx];
                if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel <= 1e-3, "slot {s} idx {idx}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn generation_loss_is_nonnegative_and_definitional() {
        let (catalog, tokenizer, template, sentences) = fixture();
        let bb = Backbone::new(BackboneConfig::tiny(tokenizer.vocab_size()), 5).unwrap();
        let examples = build_span_examples(&sentences, &catalog, &template, &tokenizer, 64).unwrap();
        let rendered: Vec<RenderedPrompt> = examples.iter().map(|e| e.rendered.clone()).collect();
        let loss = generation_loss(&bb, &rendered, &[]).unwrap();
        assert!(loss >= 0.0);
        let mut via_seq = 0.0;
        for r in &rendered {
            via_seq -= bb
                .sequence_logprob(r.prompt_ids(), &r.target_ids, &[])
                .unwrap();
        }
        via_seq /= rendered.len() as f64;
        assert!((loss - via_seq).abs() < 1e-6, "{loss} vs {via_seq}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = SpanTrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda = -0.1;
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.001;
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    /// Backbone pretrained on prompts whose answers copy random sentence
    /// words: the base learns the format and the copying mechanic but not
    /// which words are entities, leaving that headroom to the adapter.
    fn train_fixture() -> (
        Backbone,
        TypeCatalog,
        Tokenizer,
        Template,
        Vec<LabeledSentence>,
    ) {
        let (catalog, tokenizer, template, sentences) = fixture();
        let mut bb = Backbone::new(BackboneConfig::tiny(tokenizer.vocab_size()), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pool: Vec<String> = (8..tokenizer.vocab_size())
            .map(|id| tokenizer.decode(&[id]))
            .collect();
        let mut pre_sents = Vec::new();
        for _ in 0..30 {
            let n = rng.gen_range(4..7);
            let toks: Vec<String> = (0..n)
                .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                .collect();
            let mut tags = vec!["O".to_string(); n];
            for _ in 0..rng.gen_range(1..3usize) {
                let i = rng.gen_range(0..n);
                tags[i] = if rng.gen::<bool>() { "B-ANIMAL" } else { "B-METAL" }.into();
            }
            pre_sents.push(LabeledSentence::new(toks, tags, "pre").unwrap());
        }
        let seqs: Vec<Vec<usize>> = pre_sents
            .iter()
            .map(|s| {
                render_span_prompt(s, &catalog, &template, &tokenizer, 64)
                    .unwrap()
                    .token_ids
            })
            .collect();
        pretrain(
            &mut bb,
            &seqs,
            &PretrainConfig {
                epochs: 40,
                lr: 5e-3,
                seed: 2,
            },
        )
        .unwrap();
        (bb, catalog, tokenizer, template, sentences)
    }

    #[test]
    fn lambda_zero_reduces_to_generation_only_and_base_stays_frozen() {
        let (bb, catalog, tokenizer, template, sentences) = train_fixture();
        let examples =
            build_span_examples(&sentences, &catalog, &template, &tokenizer, 64).unwrap();
        let base_before: Vec<Vec<f64>> = bb
            .params
            .entries()
            .into_iter()
            .map(|(_, m)| m.as_slice().to_vec())
            .collect();
        let adapter =
            LoraAdapter::init(&bb.config, 4, 16.0, 0.05, StageTag::Span, "fix", 9).unwrap();
        let cfg = SpanTrainConfig {
            lambda: 0.0,
            epochs: 2,
            learning_rate: 1e-3,
            seed: 4,
            cutoff: 64,
            ..SpanTrainConfig::default()
        };
        let (_, recs_a) = train_span_stage(&bb, &examples, adapter.clone(), &cfg).unwrap();
        let (_, recs_b) = train_span_stage(&bb, &examples, adapter, &cfg).unwrap();
        for (a, b) in recs_a.iter().zip(&recs_b) {
            assert_eq!(a.combined, b.combined);
            assert_eq!(a.l_cl, 0.0);
            assert_eq!(a.combined, a.l_g);
        }
        let base_after: Vec<Vec<f64>> = bb
            .params
            .entries()
            .into_iter()
            .map(|(_, m)| m.as_slice().to_vec())
            .collect();
        assert_eq!(base_before, base_after);
    }

    #[test]
    fn training_halves_loss_on_separable_fixture() {
        let (bb, catalog, tokenizer, template, sentences) = train_fixture();
        let examples =
            build_span_examples(&sentences, &catalog, &template, &tokenizer, 64).unwrap();
        let adapter =
            LoraAdapter::init(&bb.config, 4, 16.0, 0.0, StageTag::Span, "sep", 11).unwrap();
        let cfg = SpanTrainConfig {
            epochs: 5,
            learning_rate: 2e-2,
            cutoff: 64,
            seed: 6,
            ..SpanTrainConfig::default()
        };
        let (_, recs) = train_span_stage(&bb, &examples, adapter, &cfg).unwrap();
        let n = examples.len();
        let first: f64 = recs[..n].iter().map(|r| r.combined).sum::<f64>() / n as f64;
        let last: f64 = recs[recs.len() - n..]
            .iter()
            .map(|r| r.combined)
            .sum::<f64>()
            / n as f64;
        assert!(
            last <= 0.5 * first,
            "first-epoch mean {first}, last-epoch mean {last}"
        );
    }

    #[test]
    fn contrastive_term_changes_training_when_lambda_positive() {
        let (bb, catalog, tokenizer, template, sentences) = train_fixture();
        let examples =
            build_span_examples(&sentences, &catalog, &template, &tokenizer, 64).unwrap();
        let adapter =
            LoraAdapter::init(&bb.config, 4, 16.0, 0.0, StageTag::Span, "cl", 13).unwrap();
        let base_cfg = SpanTrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            cutoff: 64,
            seed: 5,
            ..SpanTrainConfig::default()
        };
        let with = SpanTrainConfig {
            lambda: 0.5,
            ..base_cfg.clone()
        };
        let without = SpanTrainConfig {
            lambda: 0.0,
            ..base_cfg
        };
        let (ad_with, recs) = train_span_stage(&bb, &examples, adapter.clone(), &with).unwrap();
        let (ad_without, _) = train_span_stage(&bb, &examples, adapter, &without).unwrap();
        assert!(recs.iter().any(|r| r.l_cl != 0.0));
        let same = ad_with
            .sites
            .iter()
            .zip(&ad_without.sites)
            .all(|(x, y)| x.b.as_slice() == y.b.as_slice());
        assert!(!same, "contrastive gradient had no effect on the adapter");
    }

    #[test]
    fn support_fine_tune_toggle_returns_adapter_unchanged() {
        let (bb, catalog, tokenizer, template, sentences) = train_fixture();
        let adapter =
            LoraAdapter::init(&bb.config, 4, 16.0, 0.05, StageTag::Span, "sup", 15).unwrap();
        let snapshot: Vec<Vec<f64>> = adapter.sites.iter().map(|s| s.b.as_slice().to_vec()).collect();
        let cfg = SpanTrainConfig {
            cutoff: 64,
            ..SpanTrainConfig::default()
        };
        let (unchanged, log) = fine_tune_support(
            &bb, &sentences, &catalog, &template, &tokenizer, adapter, &cfg, false,
        )
        .unwrap();
        assert!(log.is_empty());
        for (site, before) in unchanged.sites.iter().zip(&snapshot) {
            assert_eq!(site.b.as_slice(), before.as_slice());
        }
        // one-sentence support trains under the same contract
        let one = &sentences[..1];
        let (tuned, log) = fine_tune_support(
            &bb,
            one,
            &catalog,
            &template,
            &tokenizer,
            unchanged,
            &SpanTrainConfig {
                epochs: 2,
                cutoff: 64,
                ..SpanTrainConfig::default()
            },
            true,
        )
        .unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|r| r.combined.is_finite()));
        assert!(!tuned.sites.is_empty());
    }

    #[test]
    fn type_stage_adapter_is_rejected() {
        let (bb, catalog, tokenizer, template, sentences) = fixture_with_backbone();
        let examples =
            build_span_examples(&sentences, &catalog, &template, &tokenizer, 64).unwrap();
        let adapter =
            LoraAdapter::init(&bb.config, 4, 16.0, 0.0, StageTag::Type, "w", 1).unwrap();
        assert!(
            train_span_stage(&bb, &examples, adapter, &SpanTrainConfig::default()).is_err()
        );
    }

    fn fixture_with_backbone() -> (
        Backbone,
        TypeCatalog,
        Tokenizer,
        Template,
        Vec<LabeledSentence>,
    ) {
        let (catalog, tokenizer, template, sentences) = fixture();
        let bb = Backbone::new(BackboneConfig::tiny(tokenizer.vocab_size()), 5).unwrap();
        (bb, catalog, tokenizer, template, sentences)
    }

    #[test]
    fn item_mapping_rules() {
        let tokens: Vec<String> = ["the", "otter", "saw", "the", "otter"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        // repeated mention resolves left to right
        let (spans, dropped) = map_items_to_spans(
            &tokens,
            &["otter".to_string(), "otter".to_string()],
            -1.0,
        );
        assert_eq!(dropped, 0);
        assert_eq!(
            spans.iter().map(|s| (s.begin, s.end)).collect::<Vec<_>>(),
            vec![(1, 2), (4, 5)]
        );
        // absent surface is dropped and counted
        let (spans, dropped) = map_items_to_spans(&tokens, &["Obamaa".to_string()], -1.0);
        assert!(spans.is_empty());
        assert_eq!(dropped, 1);
        // multi-word window must be contiguous and unused
        let (spans, dropped) =
            map_items_to_spans(&tokens, &["the otter".to_string(), "the otter".to_string()], -0.5);
        assert_eq!(dropped, 0);
        assert_eq!(
            spans.iter().map(|s| (s.begin, s.end)).collect::<Vec<_>>(),
            vec![(0, 2), (3, 5)]
        );
    }

    #[test]
    fn memorized_model_reproduces_gold_spans() {
        let (catalog, tokenizer, template, sentences) = fixture();
        let mut bb = Backbone::new(BackboneConfig::tiny(tokenizer.vocab_size()), 5).unwrap();
        let with_entities = &sentences[0];
        let without_entities = &sentences[2];
        let seqs: Vec<Vec<usize>> = [with_entities, without_entities]
            .iter()
            .map(|s| {
                render_span_prompt(s, &catalog, &template, &tokenizer, 64)
                    .unwrap()
                    .token_ids
            })
            .collect();
        pretrain(
            &mut bb,
            &seqs,
            &PretrainConfig {
                epochs: 60,
                lr: 5e-3,
                seed: 3,
            },
        )
        .unwrap();
        let params = GenerationParams {
            max_new_tokens: 16,
            ..GenerationParams::default()
        };
        let det = detect_spans(
            &bb, &tokenizer, &template, &catalog, with_entities, None, &params, 64,
        )
        .unwrap();
        assert!(!det.malformed, "raw: {}", det.raw);
        let gold = spans_from_tags(with_entities, &catalog, TagScheme::Bio, true).unwrap();
        assert_eq!(
            det.spans
                .iter()
                .map(|s| (s.begin, s.end))
                .collect::<Vec<_>>(),
            gold.iter().map(|s| (s.begin, s.end)).collect::<Vec<_>>(),
            "raw: {}",
            det.raw
        );
        assert!(det.spans.iter().all(|s| s.log_prob == det.sequence_logprob));
        assert!(det.sequence_logprob <= 0.0);

        let det = detect_spans(
            &bb,
            &tokenizer,
            &template,
            &catalog,
            without_entities,
            None,
            &params,
            64,
        )
        .unwrap();
        assert!(det.spans.is_empty() && !det.malformed, "raw: {}", det.raw);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn slot_batch() -> impl Strategy<Value = ContrastiveBatch> {
            let d = 8usize;
            let row = proptest::collection::vec(-1.0f64..1.0, d);
            let span = (
                proptest::collection::vec(row.clone(), 1..3),
                proptest::collection::vec(row.clone(), 2),
                proptest::collection::vec(row, 4),
                proptest::collection::vec(any::<bool>(), 4),
            )
                .prop_map(|(a, p, n, m)| SpanSlots {
                    anchor: Matrix::from_rows(&a),
                    pos: Matrix::from_rows(&p),
                    neg: Matrix::from_rows(&n),
                    neg_mask: [m[0], m[1], m[2], m[3]],
                });
            proptest::collection::vec(proptest::collection::vec(span, 1..3), 1..3)
                .prop_map(|examples| ContrastiveBatch { examples })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            // cosine normalization makes the loss blind to positive rescaling
            #[test]
            fn loss_invariant_to_positive_rescaling(
                batch in slot_batch(),
                c_anchor in 0.1f64..10.0,
                c_pos in 0.1f64..10.0,
                c_neg in 0.1f64..10.0,
            ) {
                let base = contrastive_loss(&batch, false).unwrap();
                let scaled = ContrastiveBatch {
                    examples: batch
                        .examples
                        .iter()
                        .map(|ex| {
                            ex.iter()
                                .map(|s| SpanSlots {
                                    anchor: s.anchor.scale(c_anchor),
                                    pos: s.pos.scale(c_pos),
                                    neg: s.neg.scale(c_neg),
                                    neg_mask: s.neg_mask,
                                })
                                .collect()
                        })
                        .collect(),
                };
                let after = contrastive_loss(&scaled, false).unwrap();
                prop_assert!((base - after).abs() < 1e-9, "{base} vs {after}");
            }

            // loss is a mean of -log sigmoid terms, hence strictly positive
            #[test]
            fn loss_is_positive(batch in slot_batch()) {
                let loss = contrastive_loss(&batch, false).unwrap();
                prop_assert!(loss > 0.0 && loss.is_finite());
            }
        }
    }
}
