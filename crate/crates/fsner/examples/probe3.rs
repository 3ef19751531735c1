use fsner::backbone::{load_backbone, GenerationParams, Tokenizer};
use fsner::corpus::{load_column_corpus, sample_episode, spans_from_tags, synthetic_catalog, TagScheme};
use fsner::inference_eval::{compose_type_adapter, ModelBundle};
use fsner::lora::{CompositionConfig, LoraAdapter, StageTag};
use fsner::prompting::Template;
use fsner::type_classifier::{
    build_prototypes, classify_candidates, support_type_prompt, tune_domain_adapter,
    PrototypeSources, TypeEpisode, TypeTrainConfig,
};
use std::path::Path;

fn episodes_from(corpus: &[fsner::corpus::LabeledSentence], catalog: &fsner::corpus::TypeCatalog, base: u64) -> Vec<TypeEpisode> {
    (0..4u64)
        .map(|e| {
            let ep = sample_episode(corpus, catalog, 2, 2, 2, base + e).unwrap();
            TypeEpisode { support: ep.support, query: ep.query }
        })
        .collect()
}

fn main() -> fsner::Result<()> {
    let backbone = load_backbone(Path::new("/tmp/c7/backbone.ckpt"))?;
    let tokenizer = Tokenizer::load(Path::new("/tmp/c7/backbone.tok"))?;
    let catalog = synthetic_catalog(2)?;
    let a = load_column_corpus(Path::new("/tmp/c7/a.conll"), &catalog)?;
    let b = load_column_corpus(Path::new("/tmp/c7/b.conll"), &catalog)?;
    let target = load_column_corpus(Path::new("/tmp/c7/target.conll"), &catalog)?;
    let type_tpl = Template::type_default();
    let span_tpl = Template::span_default();
    let sources = PrototypeSources { name_mentions: false, support_spans: true };
    let cfg = TypeTrainConfig {
        learning_rate: 0.03,
        epochs: 10,
        cutoff: 320,
        layer: Some(1),
        sources,
        verbatim_sign: false,
        seed: 0,
    };

    // per-domain adapters (dal on)
    let init_a = LoraAdapter::init(&backbone.config, 32, 16.0, 0.05, StageTag::Type, "a", 0)?;
    let (ad_a, _) = tune_domain_adapter(&backbone, &episodes_from(&a, &catalog, 500), &catalog, &type_tpl, &tokenizer, init_a, &cfg, true)?;
    let init_b = LoraAdapter::init(&backbone.config, 32, 16.0, 0.05, StageTag::Type, "b", 1)?;
    let (ad_b, _) = tune_domain_adapter(&backbone, &episodes_from(&b, &catalog, 600), &catalog, &type_tpl, &tokenizer, init_b, &cfg, true)?;

    // pooled adapter (dal off): one adapter walked through both domains
    let init_p = LoraAdapter::init(&backbone.config, 32, 16.0, 0.05, StageTag::Type, "pooled", 0)?;
    let mut cfg_a = cfg.clone();
    cfg_a.seed = 0;
    let (pooled, _) = tune_domain_adapter(&backbone, &episodes_from(&a, &catalog, 500), &catalog, &type_tpl, &tokenizer, init_p, &cfg_a, true)?;
    let mut cfg_b = cfg.clone();
    cfg_b.seed = 1;
    let (pooled, _) = tune_domain_adapter(&backbone, &episodes_from(&b, &catalog, 600), &catalog, &type_tpl, &tokenizer, pooled, &cfg_b, true)?;

    // target support: an episode's support sentences
    let ep = sample_episode(&target, &catalog, 2, 2, 2, 900)?;
    let support = ep.support.clone();

    let bundle = ModelBundle {
        backbone: &backbone,
        tokenizer: &tokenizer,
        span_template: &span_tpl,
        type_template: &type_tpl,
        generation: GenerationParams::default(),
        cutoff: 320,
        sources,
        layer: Some(1),
        verbatim_sign: false,
    };
    let comp = CompositionConfig { l1: 0.05, budget: 60, seed: 0 };
    let (composed, result) = compose_type_adapter(&bundle, &[ad_a.clone(), ad_b.clone()], &support, &catalog, &cfg, &comp)?;
    println!("composition weights {:?} objective {:.4} evals {}", result.weights, result.objective, result.evaluations);

    let rendered: Vec<_> = support
        .iter()
        .map(|s| support_type_prompt(s, &catalog, &type_tpl, &tokenizer, 320))
        .collect::<fsner::Result<_>>()?;
    for (tag, adapter) in [("composed", &composed), ("pooled", &pooled), ("domain-a", &ad_a)] {
        let protos = build_prototypes(&backbone, &rendered, &catalog, Some(adapter), Some(1), sources, "t")?;
        let (mut right, mut total) = (0usize, 0usize);
        for sentence in &target {
            let gold = spans_from_tags(sentence, &catalog, TagScheme::Bio, true)?;
            if gold.is_empty() { continue; }
            let cands: Vec<(usize, usize)> = gold.iter().map(|g| (g.begin, g.end)).collect();
            let typed = classify_candidates(&backbone, &tokenizer, &type_tpl, &catalog, sentence, &cands, Some(adapter), &protos, 320, false)?;
            for (t, g) in typed.iter().zip(&gold) {
                total += 1;
                if t.type_id == g.type_id { right += 1; }
            }
        }
        println!("{tag}: typing {right}/{total}");
    }
    Ok(())
}
