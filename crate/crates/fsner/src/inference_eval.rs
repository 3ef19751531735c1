//! End-to-end inference joining the two stages, exact-match micro-F1,
//! seed-replicated episode- and dataset-level evaluation, and the ablation
//! grid. Per-seed runs are independent and share nothing mutable, so callers
//! may fan them out across threads without changing any reported number.

use crate::backbone::model::Backbone;
use crate::backbone::tokenizer::Tokenizer;
use crate::backbone::GenerationParams;
use crate::corpus::{
    sample_support_set, spans_from_tags, Episode, LabeledSentence, TagScheme, TypeCatalog,
};
use crate::error::{Error, Result};
use crate::lora::{
    merge_adapters, optimize_weights, CompositionConfig, CompositionResult, LoraAdapter, StageTag,
};
use crate::prompting::{RenderedPrompt, Template};
use crate::span_detector::{
    build_span_examples, detect_spans, fine_tune_support, train_span_stage, DetectedSpan,
    SpanTrainConfig,
};
use crate::type_classifier::{
    build_prototypes, classify_candidates, episode_loss, support_type_prompt, tune_domain_adapter,
    tune_domain_adapters, AdapterSpec, DomainEpisodes, PrototypeSet, PrototypeSources,
    TypeEpisode, TypeTrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

/// Frozen model context shared by every inference and evaluation call.
pub struct ModelBundle<'a> {
    pub backbone: &'a Backbone,
    pub tokenizer: &'a Tokenizer,
    pub span_template: &'a Template,
    pub type_template: &'a Template,
    pub generation: GenerationParams,
    pub cutoff: usize,
    pub sources: PrototypeSources,
    /// Representation layer for prototypes; `None` picks the stock depth.
    pub layer: Option<usize>,
    pub verbatim_sign: bool,
}

impl<'a> ModelBundle<'a> {
    /// Type-stage settings with the representation knobs forced to the
    /// bundle's, so adaptation and classification always agree on them.
    fn coherent_type_cfg(&self, base: &TypeTrainConfig) -> TypeTrainConfig {
        TypeTrainConfig {
            cutoff: self.cutoff,
            layer: self.layer,
            sources: self.sources,
            verbatim_sign: self.verbatim_sign,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSpan {
    pub begin: usize,
    pub end: usize,
    pub type_id: usize,
    /// Span-stage sequence log-probability plus the winning class
    /// log-probability; never positive.
    pub log_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_id: String,
    pub spans: Vec<PredictedSpan>,
    /// Stage one emitted unparseable output; spans are empty.
    pub malformed: bool,
}

impl Prediction {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.spans.iter().enumerate() {
            if s.begin >= s.end {
                return Err(Error::Validation(format!(
                    "prediction span ({},{}) is empty",
                    s.begin, s.end
                )));
            }
            if !(s.log_score <= 0.0) {
                return Err(Error::Validation(format!(
                    "span ({},{}) has log score {}, expected ≤ 0",
                    s.begin, s.end, s.log_score
                )));
            }
            for t in &self.spans[i + 1..] {
                if s.begin < t.end && t.begin < s.end {
                    return Err(Error::Validation(format!(
                        "prediction spans ({},{}) and ({},{}) overlap",
                        s.begin, s.end, t.begin, t.end
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Drops the lower-scoring span of every overlapping pair (ties keep the
/// earlier one); survivors come back in sentence order.
pub fn resolve_overlaps(spans: Vec<DetectedSpan>) -> Vec<DetectedSpan> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&i, &j| spans[j].log_prob.total_cmp(&spans[i].log_prob));
    let mut keep = vec![false; spans.len()];
    for i in order {
        let s = &spans[i];
        let clear = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .all(|(j, _)| spans[j].end <= s.begin || s.end <= spans[j].begin);
        keep[i] = clear;
    }
    spans
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Runs both stages on one sentence: detected spans are typed against the
/// prototypes and each span's score combines the two stages in log space.
/// Malformed generation yields an empty flagged prediction, not an error.
pub fn infer(
    bundle: &ModelBundle,
    catalog: &TypeCatalog,
    span_adapter: Option<&LoraAdapter>,
    type_adapter: Option<&LoraAdapter>,
    prototypes: &PrototypeSet,
    sentence: &LabeledSentence,
) -> Result<Prediction> {
    let detection = detect_spans(
        bundle.backbone,
        bundle.tokenizer,
        bundle.span_template,
        catalog,
        sentence,
        span_adapter,
        &bundle.generation,
        bundle.cutoff,
    )?;
    let detected = resolve_overlaps(detection.spans);
    let candidates: Vec<(usize, usize)> = detected.iter().map(|s| (s.begin, s.end)).collect();
    let typed = classify_candidates(
        bundle.backbone,
        bundle.tokenizer,
        bundle.type_template,
        catalog,
        sentence,
        &candidates,
        type_adapter,
        prototypes,
        bundle.cutoff,
        bundle.verbatim_sign,
    )?;
    let spans = detected
        .iter()
        .zip(&typed)
        .map(|(s, t)| PredictedSpan {
            begin: s.begin,
            end: s.end,
            type_id: t.type_id,
            log_score: s.log_prob + t.log_prob,
        })
        .collect();
    let prediction = Prediction {
        sentence_id: sentence.source_id.clone(),
        spans,
        malformed: detection.malformed,
    };
    prediction.validate()?;
    Ok(prediction)
}

/// Exact-match counts for one sentence: a predicted (begin, end, type)
/// counts iff it appears verbatim in the gold spans.
fn match_counts(
    prediction: &Prediction,
    gold: &LabeledSentence,
    catalog: &TypeCatalog,
) -> Result<(usize, usize, usize)> {
    if prediction.sentence_id != gold.source_id {
        return Err(Error::Validation(format!(
            "prediction for '{}' aligned against sentence '{}'",
            prediction.sentence_id, gold.source_id
        )));
    }
    prediction.validate()?;
    let gold_set: HashSet<(usize, usize, usize)> =
        spans_from_tags(gold, catalog, TagScheme::Bio, true)?
            .iter()
            .map(|s| (s.begin, s.end, s.type_id))
            .collect();
    let pred_set: HashSet<(usize, usize, usize)> = prediction
        .spans
        .iter()
        .map(|s| (s.begin, s.end, s.type_id))
        .collect();
    let tp = pred_set.intersection(&gold_set).count();
    Ok((tp, pred_set.len() - tp, gold_set.len() - tp))
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Micro-averaged precision/recall/F1 over aligned prediction/gold pairs.
pub fn micro_f1(
    predictions: &[Prediction],
    gold: &[LabeledSentence],
    catalog: &TypeCatalog,
) -> Result<(f64, f64, f64)> {
    if predictions.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predictions.iter().zip(gold) {
        let (t, f, n) = match_counts(p, g, catalog)?;
        tp += t;
        fp += f;
        fn_ += n;
    }
    Ok(prf(tp, fp, fn_))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Episode,
    Dataset,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Episode => "episode",
            Protocol::Dataset => "dataset",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Sentences scored under this seed.
    pub scored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub scores: Vec<SeedScore>,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// Spread convention over seeds.
    pub std_convention: String,
    pub config_snapshot: String,
}

/// Mean and population standard deviation (divide by n).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Table-cell rendering of a metric in percent: "64.95±0.85".
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

impl EvalReport {
    pub fn from_scores(
        protocol: Protocol,
        scores: Vec<SeedScore>,
        config_snapshot: String,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Validation("report needs at least one seed".into()));
        }
        for s in &scores {
            for (name, v) in [
                ("precision", s.precision),
                ("recall", s.recall),
                ("f1", s.f1),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Numeric(format!(
                        "seed {}: {name} {v} outside [0,1]",
                        s.seed
                    )));
                }
            }
        }
        let stat = |f: fn(&SeedScore) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>());
        let (precision_mean, precision_std) = stat(|s| s.precision);
        let (recall_mean, recall_std) = stat(|s| s.recall);
        let (f1_mean, f1_std) = stat(|s| s.f1);
        Ok(Self {
            protocol,
            scores,
            precision_mean,
            precision_std,
            recall_mean,
            recall_std,
            f1_mean,
            f1_std,
            std_convention: "population".into(),
            config_snapshot,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.scores.iter().map(|s| s.seed).collect()
    }

    pub fn precision_cell(&self) -> String {
        format_cell(self.precision_mean, self.precision_std)
    }

    pub fn recall_cell(&self) -> String {
        format_cell(self.recall_mean, self.recall_std)
    }

    pub fn f1_cell(&self) -> String {
        format_cell(self.f1_mean, self.f1_std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Boundary-contrastive objective in span training (off forces λ = 0).
    pub basd_enabled: bool,
    /// Per-domain type adapters with weighted composition (off trains one
    /// pooled adapter and skips the weight search).
    pub dal_enabled: bool,
    /// Span-stage fine-tune on target support.
    pub sdf_enabled: bool,
    /// Type-stage fine-tune on target support.
    pub tcf_enabled: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            basd_enabled: true,
            dal_enabled: true,
            sdf_enabled: true,
            tcf_enabled: true,
        }
    }
}

impl AblationConfig {
    /// Everything off: the untuned backbone driven zero-shot through the
    /// same prompting and parsing stack, no adapters anywhere.
    pub fn raw(&self) -> bool {
        !(self.basd_enabled || self.dal_enabled || self.sdf_enabled || self.tcf_enabled)
    }
}

/// The six-row grid: the full pipeline and one row per removed feature.
pub fn ablation_variants() -> Vec<(String, AblationConfig)> {
    let full = AblationConfig::default();
    vec![
        ("full".into(), full),
        (
            "no-basd".into(),
            AblationConfig {
                basd_enabled: false,
                ..full
            },
        ),
        (
            "no-dal".into(),
            AblationConfig {
                dal_enabled: false,
                ..full
            },
        ),
        (
            "no-sdf".into(),
            AblationConfig {
                sdf_enabled: false,
                ..full
            },
        ),
        (
            "no-tcf".into(),
            AblationConfig {
                tcf_enabled: false,
                ..full
            },
        ),
        (
            "no-all".into(),
            AblationConfig {
                basd_enabled: false,
                dal_enabled: false,
                sdf_enabled: false,
                tcf_enabled: false,
            },
        ),
    ]
}

/// Type-stage artifact entering evaluation.
#[derive(Clone, Debug)]
pub enum TypeStage {
    /// Per-domain adapters; composed on target support at evaluation time.
    Domains(Vec<LoraAdapter>),
    /// One adapter used as-is (pooled training, or none in raw mode).
    Single(Option<LoraAdapter>),
}

/// Source-trained artifacts entering evaluation.
#[derive(Clone, Debug)]
pub struct TrainedStages {
    pub span: Option<LoraAdapter>,
    pub typ: TypeStage,
}

impl TrainedStages {
    pub fn raw() -> Self {
        Self {
            span: None,
            typ: TypeStage::Single(None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Target-side span fine-tune settings; λ and seed are derived per run.
    pub span_tune: SpanTrainConfig,
    /// Target-side type fine-tune settings; representation knobs (cutoff,
    /// layer, sources, sign) are overridden by the bundle's.
    pub type_tune: TypeTrainConfig,
    pub composition: CompositionConfig,
    pub ablation: AblationConfig,
    pub config_snapshot: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            span_tune: SpanTrainConfig::default(),
            type_tune: TypeTrainConfig::default(),
            composition: CompositionConfig::default(),
            ablation: AblationConfig::default(),
            config_snapshot: String::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("evaluation needs at least one seed".into()));
        }
        let unique: HashSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("evaluation seeds repeat".into()));
        }
        Ok(())
    }

    /// Snapshot plus the effective feature flags and the λ actually used.
    pub fn effective_snapshot(&self) -> String {
        let mut s = self.config_snapshot.clone();
        if !s.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
        let a = self.ablation;
        s.push_str(&format!("ablation.basd = {}\n", a.basd_enabled));
        s.push_str(&format!("ablation.dal = {}\n", a.dal_enabled));
        s.push_str(&format!("ablation.sdf = {}\n", a.sdf_enabled));
        s.push_str(&format!("ablation.tcf = {}\n", a.tcf_enabled));
        let lambda = if a.basd_enabled {
            self.span_tune.lambda
        } else {
            0.0
        };
        s.push_str(&format!("effective.span.lambda = {lambda}\n"));
        s
    }
}

/// Deterministic per-(seed, salt) stream id for adaptation-time training.
fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Searches composition weights for the domain adapters against the support
/// objective (support doubles as query), then merges. A single adapter
/// short-circuits to weight 1.
pub fn compose_type_adapter(
    bundle: &ModelBundle,
    domain_adapters: &[LoraAdapter],
    support: &[LabeledSentence],
    catalog: &TypeCatalog,
    type_cfg: &TypeTrainConfig,
    comp: &CompositionConfig,
) -> Result<(LoraAdapter, CompositionResult)> {
    if domain_adapters.is_empty() {
        return Err(Error::Adapter("no domain adapters to compose".into()));
    }
    let episode = TypeEpisode {
        support: support.to_vec(),
        query: support.to_vec(),
    };
    let cfg = bundle.coherent_type_cfg(type_cfg);
    let loss_fn = |w: &[f64]| -> Result<f64> {
        let merged = merge_adapters(domain_adapters, w)?;
        episode_loss(
            bundle.backbone,
            &episode,
            catalog,
            bundle.type_template,
            bundle.tokenizer,
            Some(&merged),
            &cfg,
        )
    };
    let result = if domain_adapters.len() == 1 {
        let objective = loss_fn(&[1.0])? + comp.l1;
        CompositionResult {
            weights: vec![1.0],
            objective,
            evaluations: 1,
        }
    } else {
        optimize_weights(domain_adapters.len(), loss_fn, comp)?
    };
    let merged = merge_adapters(domain_adapters, &result.weights)?;
    Ok((merged, result))
}

/// Adapts both stages to one support set per the feature flags and builds
/// its prototypes: span fine-tune (sdf), domain composition (dal) followed
/// by type fine-tune (tcf).
fn adapt_support(
    bundle: &ModelBundle,
    stages: &TrainedStages,
    support: &[LabeledSentence],
    catalog: &TypeCatalog,
    cfg: &EvalConfig,
    seed: u64,
    salt: u64,
) -> Result<(Option<LoraAdapter>, Option<LoraAdapter>, PrototypeSet)> {
    let span = match &stages.span {
        Some(adapter) => {
            let mut tune = cfg.span_tune.clone();
            tune.seed = derive_seed(seed, salt);
            if !cfg.ablation.basd_enabled {
                tune.lambda = 0.0;
            }
            let (tuned, _) = fine_tune_support(
                bundle.backbone,
                support,
                catalog,
                bundle.span_template,
                bundle.tokenizer,
                adapter.clone(),
                &tune,
                cfg.ablation.sdf_enabled,
            )?;
            Some(tuned)
        }
        None => None,
    };

    let type_cfg = bundle.coherent_type_cfg(&cfg.type_tune);
    let start = match &stages.typ {
        TypeStage::Domains(adapters) => {
            let (composed, _) = compose_type_adapter(
                bundle,
                adapters,
                support,
                catalog,
                &type_cfg,
                &cfg.composition,
            )?;
            Some(composed)
        }
        TypeStage::Single(adapter) => adapter.clone(),
    };
    let typ = match start {
        Some(adapter) => {
            let mut tune = type_cfg.clone();
            tune.seed = derive_seed(seed, salt ^ 0x5555);
            let support_episode = TypeEpisode {
                support: support.to_vec(),
                query: support.to_vec(),
            };
            let (tuned, _) = tune_domain_adapter(
                bundle.backbone,
                &[support_episode],
                catalog,
                bundle.type_template,
                bundle.tokenizer,
                adapter,
                &tune,
                cfg.ablation.tcf_enabled,
            )?;
            Some(tuned)
        }
        None => None,
    };

    let prompts: Vec<RenderedPrompt> = support
        .iter()
        .map(|s| support_type_prompt(s, catalog, bundle.type_template, bundle.tokenizer, bundle.cutoff))
        .collect::<Result<_>>()?;
    let prototypes = build_prototypes(
        bundle.backbone,
        &prompts,
        catalog,
        typ.as_ref(),
        bundle.layer,
        bundle.sources,
        "target",
    )?;
    Ok((span, typ, prototypes))
}

/// One seed of the episode protocol: adapt on each episode's support,
/// predict its queries, micro-aggregate across all episodes.
pub fn episode_seed_score(
    bundle: &ModelBundle,
    stages: &TrainedStages,
    catalog: &TypeCatalog,
    episodes: &[Episode],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SeedScore> {
    if episodes.is_empty() {
        return Err(Error::Validation("episode evaluation needs episodes".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut scored = 0;
    for (i, episode) in episodes.iter().enumerate() {
        let ep_catalog = catalog.subset(&episode.classes);
        let (span, typ, prototypes) = adapt_support(
            bundle,
            stages,
            &episode.support,
            &ep_catalog,
            cfg,
            seed,
            i as u64,
        )?;
        for query in &episode.query {
            let prediction = infer(
                bundle,
                &ep_catalog,
                span.as_ref(),
                typ.as_ref(),
                &prototypes,
                query,
            )?;
            let (t, f, n) = match_counts(&prediction, query, &ep_catalog)?;
            tp += t;
            fp += f;
            fn_ += n;
            scored += 1;
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(SeedScore {
        seed,
        precision,
        recall,
        f1,
        scored,
    })
}

/// One seed of the dataset protocol: sample a support set from the test
/// corpus, adapt, then score the full corpus as-is (support included).
pub fn dataset_seed_score(
    bundle: &ModelBundle,
    stages: &TrainedStages,
    catalog: &TypeCatalog,
    test_corpus: &[LabeledSentence],
    k_shot: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SeedScore> {
    let support = sample_support_set(test_corpus, catalog, k_shot, seed)?;
    let (span, typ, prototypes) =
        adapt_support(bundle, stages, &support, catalog, cfg, seed, 0)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for sentence in test_corpus {
        let prediction = infer(
            bundle,
            catalog,
            span.as_ref(),
            typ.as_ref(),
            &prototypes,
            sentence,
        )?;
        let (t, f, n) = match_counts(&prediction, sentence, catalog)?;
        tp += t;
        fp += f;
        fn_ += n;
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(SeedScore {
        seed,
        precision,
        recall,
        f1,
        scored: test_corpus.len(),
    })
}

pub fn episode_evaluation(
    bundle: &ModelBundle,
    stages: &TrainedStages,
    catalog: &TypeCatalog,
    episodes: &[Episode],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let scores = cfg
        .seeds
        .iter()
        .map(|&s| episode_seed_score(bundle, stages, catalog, episodes, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(Protocol::Episode, scores, cfg.effective_snapshot())
}

pub fn dataset_evaluation(
    bundle: &ModelBundle,
    stages: &TrainedStages,
    catalog: &TypeCatalog,
    test_corpus: &[LabeledSentence],
    k_shot: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let scores = cfg
        .seeds
        .iter()
        .map(|&s| dataset_seed_score(bundle, stages, catalog, test_corpus, k_shot, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(Protocol::Dataset, scores, cfg.effective_snapshot())
}

/// Source-side training material.
pub struct SourceMaterial<'a> {
    pub span_sentences: &'a [LabeledSentence],
    pub span_catalog: &'a TypeCatalog,
    /// Type-stage material per source domain.
    pub domains: &'a [DomainEpisodes],
}

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub span: SpanTrainConfig,
    pub typ: TypeTrainConfig,
    pub adapter: AdapterSpec,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            span: SpanTrainConfig::default(),
            typ: TypeTrainConfig::default(),
            adapter: AdapterSpec::default(),
        }
    }
}

/// Trains the source-side artifacts a variant needs: the span adapter (λ
/// gated by the contrastive flag) and either per-domain type adapters or a
/// single adapter walked through every domain's episodes in order. All-off
/// trains nothing.
pub fn train_source_stages(
    bundle: &ModelBundle,
    source: &SourceMaterial,
    train: &TrainingConfig,
    ablation: &AblationConfig,
) -> Result<TrainedStages> {
    if ablation.raw() {
        return Ok(TrainedStages::raw());
    }
    let mut span_cfg = train.span.clone();
    if !ablation.basd_enabled {
        span_cfg.lambda = 0.0;
    }
    let init = LoraAdapter::init(
        &bundle.backbone.config,
        train.adapter.rank,
        train.adapter.alpha,
        train.adapter.dropout,
        StageTag::Span,
        "source",
        train.adapter.seed,
    )?;
    let examples = build_span_examples(
        source.span_sentences,
        source.span_catalog,
        bundle.span_template,
        bundle.tokenizer,
        span_cfg.cutoff,
    )?;
    let (span, _) = train_span_stage(bundle.backbone, &examples, init, &span_cfg)?;

    let type_cfg = bundle.coherent_type_cfg(&train.typ);
    let typ = if ablation.dal_enabled {
        let tuned = tune_domain_adapters(
            bundle.backbone,
            source.domains,
            bundle.type_template,
            bundle.tokenizer,
            &train.adapter,
            &type_cfg,
        )?;
        TypeStage::Domains(tuned.into_iter().map(|(a, _)| a).collect())
    } else {
        let mut adapter = LoraAdapter::init(
            &bundle.backbone.config,
            train.adapter.rank,
            train.adapter.alpha,
            train.adapter.dropout,
            StageTag::Type,
            "pooled",
            train.adapter.seed,
        )?;
        for (i, domain) in source.domains.iter().enumerate() {
            let mut cfg = type_cfg.clone();
            cfg.seed = derive_seed(type_cfg.seed, i as u64);
            (adapter, _) = tune_domain_adapter(
                bundle.backbone,
                &domain.episodes,
                &domain.catalog,
                bundle.type_template,
                bundle.tokenizer,
                adapter,
                &cfg,
                true,
            )?;
        }
        TypeStage::Single(Some(adapter))
    };
    Ok(TrainedStages {
        span: Some(span),
        typ,
    })
}

/// Trains and evaluates every grid variant on the same material; source
/// training runs once per variant, evaluation replicates over the seeds.
pub fn run_ablation(
    bundle: &ModelBundle,
    source: &SourceMaterial,
    target_catalog: &TypeCatalog,
    episodes: &[Episode],
    train: &TrainingConfig,
    eval: &EvalConfig,
) -> Result<Vec<(String, EvalReport)>> {
    ablation_variants()
        .into_iter()
        .map(|(name, flags)| {
            let stages = train_source_stages(bundle, source, train, &flags)?;
            let mut cfg = eval.clone();
            cfg.ablation = flags;
            let report = episode_evaluation(bundle, &stages, target_catalog, episodes, &cfg)?;
            Ok((name, report))
        })
        .collect()
}

/// Human-readable grid, one row per variant, percent cells as mean±spread.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = format!(
        "{:<10} {:>14} {:>14} {:>14}\n",
        "variant", "precision", "recall", "f1"
    );
    for (name, report) in rows {
        out.push_str(&format!(
            "{:<10} {:>14} {:>14} {:>14}\n",
            name,
            report.precision_cell(),
            report.recall_cell(),
            report.f1_cell()
        ));
    }
    out
}

/// Plot-ready rows: seed, variant, precision, recall, f1 (tab-separated,
/// full-precision decimals).
pub fn render_tsv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("seed\tvariant\tprecision\trecall\tf1\n");
    for (name, report) in rows {
        for s in &report.scores {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.seed, name, s.precision, s.recall, s.f1
            ));
        }
    }
    out
}
