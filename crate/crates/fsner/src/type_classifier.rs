//! Stage two: build one prototype vector per entity type from support
//! prompts, classify candidate spans by cosine similarity to the prototypes,
//! and train per-domain adapters with prototype cross-entropy on a frozen
//! base.

use crate::backbone::model::{select_layer, AdapterDelta, Backbone};
use crate::backbone::tokenizer::Tokenizer;
use crate::corpus::{spans_from_tags, LabeledSentence, TagScheme, TypeCatalog};
use crate::error::{Error, Result};
use crate::lora::{adapter_step, training_bindings, LoraAdapter, StageTag};
use crate::matrix::{guarded_l2_norm, Matrix};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompting::{render_type_prompt, Candidate, RenderedPrompt, Template};
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    /// Number of pooled support representations.
    pub support_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// One per schema class, in catalog id order.
    pub prototypes: Vec<Prototype>,
    pub layer_index: usize,
    pub domain_tag: String,
}

impl PrototypeSet {
    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.vector.len())
    }

    fn validate(&self) -> Result<()> {
        if self.prototypes.is_empty() {
            return Err(Error::Validation("prototype set is empty".into()));
        }
        let d = self.dim();
        let mut seen = std::collections::HashSet::new();
        for p in &self.prototypes {
            if p.vector.len() != d {
                return Err(Error::Validation("prototype dimensions disagree".into()));
            }
            if p.support_count == 0 {
                return Err(Error::Validation(format!(
                    "prototype for class {} has no support",
                    p.class_id
                )));
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "prototype for class {} is not finite",
                    p.class_id
                )));
            }
            if !seen.insert(p.class_id) {
                return Err(Error::Validation(format!(
                    "duplicate prototype for class {}",
                    p.class_id
                )));
            }
        }
        Ok(())
    }
}

/// Which support representations feed each prototype. Both default on; a
/// class with no support spans always falls back to its name mentions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PrototypeSources {
    pub name_mentions: bool,
    pub support_spans: bool,
}

impl Default for PrototypeSources {
    fn default() -> Self {
        Self {
            name_mentions: true,
            support_spans: true,
        }
    }
}

impl PrototypeSources {
    fn validate(&self) -> Result<()> {
        if !self.name_mentions && !self.support_spans {
            return Err(Error::Config(
                "at least one prototype source must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Mean of the hidden rows over `[begin, end)`.
pub fn span_representation(layer: &Matrix, begin: usize, end: usize) -> Result<Vec<f64>> {
    if begin >= end || end > layer.rows() {
        return Err(Error::Validation(format!(
            "span [{begin},{end}) invalid for {} positions",
            layer.rows()
        )));
    }
    let mut rep = vec![0.0; layer.cols()];
    for r in begin..end {
        for (acc, v) in rep.iter_mut().zip(layer.row(r)) {
            *acc += v;
        }
    }
    rep.iter_mut().for_each(|v| *v /= (end - begin) as f64);
    Ok(rep)
}

/// Renders a type prompt whose candidates are the sentence's gold spans,
/// types included.
pub fn support_type_prompt(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<RenderedPrompt> {
    let gold = spans_from_tags(sentence, catalog, TagScheme::Bio, true)?;
    let candidates: Vec<Candidate> = gold
        .iter()
        .map(|g| Candidate {
            word_begin: g.begin,
            word_end: g.end,
            type_id: Some(g.type_id),
        })
        .collect();
    render_type_prompt(sentence, &candidates, catalog, template, tokenizer, cutoff)
}

/// Renders a type prompt whose candidates are the sentence's gold spans with
/// types withheld; returns the gold class per candidate alongside.
pub fn query_type_prompt(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<(RenderedPrompt, Vec<usize>)> {
    let gold = spans_from_tags(sentence, catalog, TagScheme::Bio, true)?;
    let candidates: Vec<Candidate> = gold
        .iter()
        .map(|g| Candidate {
            word_begin: g.begin,
            word_end: g.end,
            type_id: None,
        })
        .collect();
    let rendered =
        render_type_prompt(sentence, &candidates, catalog, template, tokenizer, cutoff)?;
    Ok((rendered, gold.iter().map(|g| g.type_id).collect()))
}

/// Pools contributions into a mean that is exactly invariant to input order
/// and to uniform duplication: vectors are sorted, exact copies are grouped,
/// and each group enters once with weight multiplicity/total.
fn pool(contributions: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let n = contributions.len();
    let mut sorted: Vec<&Vec<f64>> = contributions.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = vec![0.0; sorted[0].len()];
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let w = (j - i) as f64 / n as f64;
        for (a, v) in acc.iter_mut().zip(sorted[i]) {
            *a += w * v;
        }
        i = j;
    }
    (acc, n)
}

/// Per-class support representations extracted from one rendered prompt.
struct PromptReps {
    /// (class, rep) from schema type-name mentions.
    names: Vec<(usize, Vec<f64>)>,
    /// (class, rep) from typed candidate spans.
    spans: Vec<(usize, Vec<f64>)>,
}

fn extract_reps(
    backbone: &Backbone,
    prompt: &RenderedPrompt,
    deltas: &[AdapterDelta],
    layer: usize,
) -> Result<PromptReps> {
    let hidden = backbone.forward_hidden(prompt.prompt_ids(), deltas)?;
    let h = &hidden.layers[layer];
    let names = prompt
        .type_index_map
        .iter()
        .map(|a| Ok((a.type_id, span_representation(h, a.begin, a.end)?)))
        .collect::<Result<_>>()?;
    let spans = prompt
        .span_index_map
        .iter()
        .map(|a| {
            let class = a.type_id.ok_or_else(|| {
                Error::Validation(format!(
                    "support candidate ({},{}) has no gold type",
                    a.word_begin, a.word_end
                ))
            })?;
            Ok((class, span_representation(h, a.begin, a.end)?))
        })
        .collect::<Result<_>>()?;
    Ok(PromptReps { names, spans })
}

/// One prototype per schema class: the pooled mean of that class's enabled
/// support representations. A class with no support spans falls back to its
/// type-name mentions; a class with neither is an error naming it.
pub fn build_prototypes(
    backbone: &Backbone,
    support: &[RenderedPrompt],
    catalog: &TypeCatalog,
    adapter: Option<&LoraAdapter>,
    layer: Option<usize>,
    sources: PrototypeSources,
    domain_tag: &str,
) -> Result<PrototypeSet> {
    sources.validate()?;
    if support.is_empty() {
        return Err(Error::Validation("prototype building needs support".into()));
    }
    if let Some(a) = adapter {
        a.require_stage(StageTag::Type)?;
    }
    let layer = select_layer(backbone.config.n_layers, layer)?;
    let deltas = adapter.map(|a| a.to_deltas()).unwrap_or_default();
    let mut chosen: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut names_only: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for prompt in support {
        let reps = extract_reps(backbone, prompt, &deltas, layer)?;
        for (class, rep) in reps.names {
            if sources.name_mentions {
                chosen.entry(class).or_default().push(rep.clone());
            }
            names_only.entry(class).or_default().push(rep);
        }
        if sources.support_spans {
            for (class, rep) in reps.spans {
                chosen.entry(class).or_default().push(rep);
            }
        }
    }
    let mut prototypes = Vec::with_capacity(catalog.len());
    for class_id in catalog.ids() {
        let contribs = match chosen.get(&class_id) {
            Some(c) if !c.is_empty() => c,
            _ => names_only.get(&class_id).filter(|c| !c.is_empty()).ok_or_else(|| {
                Error::Validation(format!(
                    "no support representations for class '{}'",
                    catalog.type_name(class_id)
                ))
            })?,
        };
        let (vector, support_count) = pool(contribs);
        prototypes.push(Prototype {
            class_id,
            vector,
            support_count,
        });
    }
    let set = PrototypeSet {
        prototypes,
        layer_index: layer,
        domain_tag: domain_tag.to_string(),
    };
    set.validate()?;
    Ok(set)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = guarded_l2_norm(v);
    v.iter().map(|x| x / norm).collect()
}

/// Probability per class (set order): softmax over the cosine similarity of
/// the span vector to each L2-normalized prototype. `verbatim_sign` flips to
/// softmax over negated similarity for auditing the alternative reading.
pub fn classify_span(
    span_vec: &[f64],
    set: &PrototypeSet,
    verbatim_sign: bool,
) -> Result<Vec<f64>> {
    set.validate()?;
    if span_vec.len() != set.dim() {
        return Err(Error::Validation(format!(
            "span vector dimension {} does not match prototypes ({})",
            span_vec.len(),
            set.dim()
        )));
    }
    if span_vec.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("span vector is not finite".into()));
    }
    let z = normalized(span_vec);
    let sign = if verbatim_sign { -1.0 } else { 1.0 };
    let scores: Vec<f64> = set
        .prototypes
        .iter()
        .map(|p| {
            let pn = normalized(&p.vector);
            sign * z.iter().zip(&pn).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

/// Argmax class and its log-probability (first maximum on ties).
pub fn best_class(probs: &[f64], set: &PrototypeSet) -> Result<(usize, f64)> {
    if probs.len() != set.prototypes.len() || probs.is_empty() {
        return Err(Error::Validation(
            "probability vector does not match the prototype set".into(),
        ));
    }
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Ok((set.prototypes[best].class_id, probs[best].ln()))
}

/// Mean cross-entropy of gold classes under per-span probability vectors.
pub fn type_loss(
    probs: &[Vec<f64>],
    gold_class_ids: &[usize],
    set: &PrototypeSet,
) -> Result<f64> {
    if probs.is_empty() || probs.len() != gold_class_ids.len() {
        return Err(Error::Validation(
            "type loss needs one gold class per probability vector".into(),
        ));
    }
    let mut total = 0.0;
    for (p, &gold) in probs.iter().zip(gold_class_ids) {
        let idx = set
            .prototypes
            .iter()
            .position(|proto| proto.class_id == gold)
            .ok_or_else(|| {
                Error::Validation(format!("gold class {gold} has no prototype"))
            })?;
        if p.len() != set.prototypes.len() {
            return Err(Error::Validation(
                "probability vector does not match the prototype set".into(),
            ));
        }
        total -= p[idx].ln();
    }
    Ok(total / probs.len() as f64)
}

/// One few-shot episode; queries may repeat the support for adaptation-time
/// passes where no held-out labels exist.
#[derive(Clone, Debug)]
pub struct TypeEpisode {
    pub support: Vec<LabeledSentence>,
    pub query: Vec<LabeledSentence>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub cutoff: usize,
    /// Representation layer; `None` picks the stock depth fraction.
    pub layer: Option<usize>,
    pub sources: PrototypeSources,
    pub verbatim_sign: bool,
    pub seed: u64,
}

impl Default for TypeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 5,
            cutoff: 256,
            layer: None,
            sources: PrototypeSources::default(),
            verbatim_sign: false,
            seed: 0,
        }
    }
}

impl TypeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.cutoff == 0 {
            return Err(Error::Config("epochs and cutoff must be positive".into()));
        }
        self.sources.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeTrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Episode objective on frozen weights: prototypes from the support prompts,
/// mean cross-entropy over the query spans. Also serves as the black-box
/// loss for composition weight search.
pub fn episode_loss(
    backbone: &Backbone,
    episode: &TypeEpisode,
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    adapter: Option<&LoraAdapter>,
    cfg: &TypeTrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    let support = episode
        .support
        .iter()
        .map(|s| support_type_prompt(s, catalog, template, tokenizer, cfg.cutoff))
        .collect::<Result<Vec<_>>>()?;
    let set = build_prototypes(
        backbone,
        &support,
        catalog,
        adapter,
        cfg.layer,
        cfg.sources,
        "episode",
    )?;
    let deltas = adapter.map(|a| a.to_deltas()).unwrap_or_default();
    let mut probs = Vec::new();
    let mut golds = Vec::new();
    for q in &episode.query {
        let (rendered, gold) = query_type_prompt(q, catalog, template, tokenizer, cfg.cutoff)?;
        if gold.is_empty() {
            continue;
        }
        let hidden = backbone.forward_hidden(rendered.prompt_ids(), &deltas)?;
        let h = &hidden.layers[set.layer_index];
        for (anchor, g) in rendered.span_index_map.iter().zip(gold) {
            let rep = span_representation(h, anchor.begin, anchor.end)?;
            probs.push(classify_span(&rep, &set, cfg.verbatim_sign)?);
            golds.push(g);
        }
    }
    if probs.is_empty() {
        return Err(Error::Validation("episode query has no spans".into()));
    }
    type_loss(&probs, &golds, &set)
}

/// Pre-rendered episode: support prompts with gold types, query prompts with
/// per-span gold classes.
struct RenderedEpisode {
    support: Vec<RenderedPrompt>,
    query: Vec<(RenderedPrompt, Vec<usize>)>,
}

fn render_episode(
    episode: &TypeEpisode,
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<RenderedEpisode> {
    if episode.support.is_empty() || episode.query.is_empty() {
        return Err(Error::Validation(
            "episode needs support and query sentences".into(),
        ));
    }
    let support = episode
        .support
        .iter()
        .map(|s| support_type_prompt(s, catalog, template, tokenizer, cutoff))
        .collect::<Result<Vec<_>>>()?;
    let query = episode
        .query
        .iter()
        .map(|s| query_type_prompt(s, catalog, template, tokenizer, cutoff))
        .collect::<Result<Vec<_>>>()?;
    if query.iter().all(|(_, g)| g.is_empty()) {
        return Err(Error::Validation("episode query has no spans".into()));
    }
    Ok(RenderedEpisode { support, query })
}

/// Builds the episode cross-entropy on `tape` with the adapter's factors as
/// variables. Prototype pooling here follows prompt order; values agree with
/// [`episode_loss`] up to summation-order rounding.
fn taped_episode_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    episode: &RenderedEpisode,
    catalog: &TypeCatalog,
    adapter: &LoraAdapter,
    layer: usize,
    cfg: &TypeTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let deltas = adapter.to_deltas();
    let d = backbone.config.hidden_dim;
    let mut chosen: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    let mut names_only: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for prompt in &episode.support {
        let ids = prompt.prompt_ids();
        let bindings = training_bindings(adapter, ids.len(), d, rng);
        let fwd = backbone.forward_taped(tape, ids, &deltas, &bindings, false)?;
        let h = fwd.hidden[layer];
        for a in &prompt.type_index_map {
            let rows = tape.gather_rows(h, (a.begin..a.end).collect());
            let rep = tape.mean_rows(rows);
            if cfg.sources.name_mentions {
                chosen.entry(a.type_id).or_default().push(rep);
            }
            names_only.entry(a.type_id).or_default().push(rep);
        }
        if cfg.sources.support_spans {
            for a in &prompt.span_index_map {
                let class = a.type_id.ok_or_else(|| {
                    Error::Validation(format!(
                        "support candidate ({},{}) has no gold type",
                        a.word_begin, a.word_end
                    ))
                })?;
                let rows = tape.gather_rows(h, (a.begin..a.end).collect());
                let rep = tape.mean_rows(rows);
                chosen.entry(class).or_default().push(rep);
            }
        }
    }
    let mut protos = Vec::with_capacity(catalog.len());
    for class_id in catalog.ids() {
        let contribs = match chosen.get(&class_id) {
            Some(c) if !c.is_empty() => c.clone(),
            _ => names_only.get(&class_id).cloned().unwrap_or_default(),
        };
        if contribs.is_empty() {
            return Err(Error::Validation(format!(
                "no support representations for class '{}'",
                catalog.type_name(class_id)
            )));
        }
        let stacked = tape.concat_rows(contribs);
        protos.push(tape.mean_rows(stacked));
    }
    let proto_matrix = tape.concat_rows(protos);
    let proto_norm = tape.l2_normalize_rows(proto_matrix);

    let mut query_reps = Vec::new();
    let mut gold_idx = Vec::new();
    for (prompt, golds) in &episode.query {
        if golds.is_empty() {
            continue;
        }
        let ids = prompt.prompt_ids();
        let bindings = training_bindings(adapter, ids.len(), d, rng);
        let fwd = backbone.forward_taped(tape, ids, &deltas, &bindings, false)?;
        let h = fwd.hidden[layer];
        for (a, &g) in prompt.span_index_map.iter().zip(golds) {
            let rows = tape.gather_rows(h, (a.begin..a.end).collect());
            query_reps.push(tape.mean_rows(rows));
            let idx = catalog
                .ids()
                .position(|id| id == g)
                .ok_or_else(|| Error::Validation(format!("gold class {g} has no prototype")))?;
            gold_idx.push(idx);
        }
    }
    let n = query_reps.len();
    let z = tape.concat_rows(query_reps);
    let z_norm = tape.l2_normalize_rows(z);
    let mut scores = tape.matmul_nt(z_norm, proto_norm);
    if cfg.verbatim_sign {
        scores = tape.scale(scores, -1.0);
    }
    let logp = tape.row_log_softmax(scores);
    let picked = tape.gather_entries(logp, gold_idx.into_iter().enumerate().collect());
    let summed = tape.sum_all(picked);
    Ok(tape.scale(summed, -1.0 / n as f64))
}

/// Trains a type-stage adapter on its domain's episodes against a frozen
/// base; one optimizer step per episode. `enabled = false` (the ablation
/// toggle) returns the adapter bit-identical with an empty log.
#[allow(clippy::too_many_arguments)]
pub fn tune_domain_adapter(
    backbone: &Backbone,
    episodes: &[TypeEpisode],
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    mut adapter: LoraAdapter,
    cfg: &TypeTrainConfig,
    enabled: bool,
) -> Result<(LoraAdapter, Vec<TypeTrainRecord>)> {
    if !enabled {
        return Ok((adapter, Vec::new()));
    }
    cfg.validate()?;
    adapter.require_stage(StageTag::Type)?;
    if episodes.is_empty() {
        return Err(Error::Corpus("type stage has no episodes".into()));
    }
    let rendered = episodes
        .iter()
        .map(|e| render_episode(e, catalog, template, tokenizer, cfg.cutoff))
        .collect::<Result<Vec<_>>>()?;
    let layer = select_layer(backbone.config.n_layers, cfg.layer)?;
    let n_slots = 2 * adapter.sites.len();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.learning_rate,
            ..AdamWConfig::default()
        },
        n_slots,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rendered.len()).collect();
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &ei in &order {
            let mut tape = Tape::new();
            let loss = taped_episode_loss(
                &mut tape,
                backbone,
                &rendered[ei],
                catalog,
                &adapter,
                layer,
                cfg,
                &mut rng,
            )?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite type loss at epoch {epoch} step {step} (episode {ei})"
                )));
            }
            let mut grads = tape.backward(loss);
            let grad_vec: Vec<Option<Matrix>> = (0..n_slots).map(|s| grads.take(s)).collect();
            adapter_step(&mut adapter, &mut opt, &grad_vec);
            step += 1;
            records.push(TypeTrainRecord {
                step,
                epoch,
                loss: loss_val,
                learning_rate: cfg.learning_rate,
                seed: cfg.seed,
            });
        }
    }
    Ok((adapter, records))
}

/// One source domain's training material, with its own schema.
#[derive(Clone, Debug)]
pub struct DomainEpisodes {
    pub domain: String,
    pub catalog: TypeCatalog,
    pub episodes: Vec<TypeEpisode>,
}

/// Adapter shape shared by every domain adapter.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 16.0,
            dropout: 0.05,
            seed: 0,
        }
    }
}

/// One freshly initialized, domain-tagged adapter per source domain.
pub fn tune_domain_adapters(
    backbone: &Backbone,
    domains: &[DomainEpisodes],
    template: &Template,
    tokenizer: &Tokenizer,
    spec: &AdapterSpec,
    cfg: &TypeTrainConfig,
) -> Result<Vec<(LoraAdapter, Vec<TypeTrainRecord>)>> {
    if domains.is_empty() {
        return Err(Error::Corpus("no source domains".into()));
    }
    let mut names = std::collections::HashSet::new();
    for d in domains {
        if !names.insert(&d.domain) {
            return Err(Error::Validation(format!(
                "duplicate domain tag '{}'",
                d.domain
            )));
        }
    }
    domains
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let adapter = LoraAdapter::init(
                &backbone.config,
                spec.rank,
                spec.alpha,
                spec.dropout,
                StageTag::Type,
                &d.domain,
                spec.seed.wrapping_add(i as u64),
            )?;
            tune_domain_adapter(
                backbone, &d.episodes, &d.catalog, template, tokenizer, adapter, cfg, true,
            )
        })
        .collect()
}

/// A typed candidate span with the winning class's log-probability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypedCandidate {
    pub begin: usize,
    pub end: usize,
    pub type_id: usize,
    /// ln of the winning softmax probability; always ≤ 0.
    pub log_prob: f64,
    /// Full distribution in prototype-set order.
    pub probabilities: Vec<f64>,
}

/// Classifies candidate spans (word coordinates) of one sentence against
/// prebuilt prototypes. Empty input yields empty output; otherwise exactly
/// one prediction per candidate.
#[allow(clippy::too_many_arguments)]
pub fn classify_candidates(
    backbone: &Backbone,
    tokenizer: &Tokenizer,
    template: &Template,
    catalog: &TypeCatalog,
    sentence: &LabeledSentence,
    candidates: &[(usize, usize)],
    adapter: Option<&LoraAdapter>,
    prototypes: &PrototypeSet,
    cutoff: usize,
    verbatim_sign: bool,
) -> Result<Vec<TypedCandidate>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(a) = adapter {
        a.require_stage(StageTag::Type)?;
    }
    let cand: Vec<Candidate> = candidates
        .iter()
        .map(|&(b, e)| Candidate {
            word_begin: b,
            word_end: e,
            type_id: None,
        })
        .collect();
    let rendered = render_type_prompt(sentence, &cand, catalog, template, tokenizer, cutoff)?;
    let deltas = adapter.map(|a| a.to_deltas()).unwrap_or_default();
    let hidden = backbone.forward_hidden(rendered.prompt_ids(), &deltas)?;
    let h = &hidden.layers[prototypes.layer_index];
    rendered
        .span_index_map
        .iter()
        .map(|a| {
            let rep = span_representation(h, a.begin, a.end)?;
            let probs = classify_span(&rep, prototypes, verbatim_sign)?;
            let (type_id, log_prob) = best_class(&probs, prototypes)?;
            Ok(TypedCandidate {
                begin: a.word_begin,
                end: a.word_end,
                type_id,
                log_prob,
                probabilities: probs,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PrototypeRecord {
    class_id: usize,
    type_name: String,
    dim: usize,
    vector: Vec<f64>,
    support_count: usize,
    layer_index: usize,
    domain_tag: String,
}

/// One JSON record per prototype, one per line.
pub fn export_prototypes(set: &PrototypeSet, catalog: &TypeCatalog) -> Result<String> {
    set.validate()?;
    let mut out = String::new();
    for p in &set.prototypes {
        let record = PrototypeRecord {
            class_id: p.class_id,
            type_name: catalog.type_name(p.class_id).to_string(),
            dim: p.vector.len(),
            vector: p.vector.clone(),
            support_count: p.support_count,
            layer_index: set.layer_index,
            domain_tag: set.domain_tag.clone(),
        };
        out.push_str(&serde_json::to_string(&record).map_err(|e| {
            Error::Checkpoint(format!("prototype serialization failed: {e}"))
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn import_prototypes(text: &str) -> Result<PrototypeSet> {
    let mut prototypes = Vec::new();
    let mut layer_index = None;
    let mut domain_tag = None;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let record: PrototypeRecord = serde_json::from_str(line)
            .map_err(|e| Error::Checkpoint(format!("prototype record {i}: {e}")))?;
        if record.vector.len() != record.dim {
            return Err(Error::Checkpoint(format!(
                "prototype record {i}: stated dim {} but {} values",
                record.dim,
                record.vector.len()
            )));
        }
        if *layer_index.get_or_insert(record.layer_index) != record.layer_index
            || *domain_tag.get_or_insert(record.domain_tag.clone()) != record.domain_tag
        {
            return Err(Error::Checkpoint(
                "prototype records disagree on layer or domain".into(),
            ));
        }
        prototypes.push(Prototype {
            class_id: record.class_id,
            vector: record.vector,
            support_count: record.support_count,
        });
    }
    let set = PrototypeSet {
        prototypes,
        layer_index: layer_index.unwrap_or_default(),
        domain_tag: domain_tag.unwrap_or_default(),
    };
    set.validate()?;
    Ok(set)
}
