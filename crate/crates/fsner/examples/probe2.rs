use fsner::backbone::{load_backbone, GenerationParams, Tokenizer};
use fsner::corpus::{load_column_corpus, spans_from_tags, synthetic_catalog, TagScheme};
use fsner::lora::{LoraAdapter, StageTag};
use fsner::prompting::Template;
use fsner::span_detector::{build_span_examples, detect_spans, train_span_stage, SpanTrainConfig};
use std::path::Path;

fn main() -> fsner::Result<()> {
    let backbone = load_backbone(Path::new("/tmp/c7/backbone.ckpt"))?;
    let tokenizer = Tokenizer::load(Path::new("/tmp/c7/backbone.tok"))?;
    let catalog = synthetic_catalog(2)?;
    let all = load_column_corpus(Path::new("/tmp/c7/span.conll"), &catalog)?;
    let target = load_column_corpus(Path::new("/tmp/c7/target.conll"), &catalog)?;
    let span_tpl = Template::span_default();
    let params = GenerationParams::default();

    let examples = build_span_examples(&all, &catalog, &span_tpl, &tokenizer, 320)?;
    // raw backbone baseline
    {
        let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
        for s in &target {
            let gold = spans_from_tags(s, &catalog, TagScheme::Bio, true)?;
            let det = detect_spans(&backbone, &tokenizer, &span_tpl, &catalog, s, None, &params, 320)?;
            let want: Vec<(usize, usize)> = gold.iter().map(|g| (g.begin, g.end)).collect();
            ng += want.len();
            np += det.spans.len();
            tp += det.spans.iter().filter(|d| want.contains(&(d.begin, d.end))).count();
        }
        println!("raw: tp {tp} pred {np} gold {ng}");
    }
    let lambdas: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let seeds: Vec<u64> = std::env::var("SPAN_SEEDS")
        .map(|v| v.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![0]);
    for seed in seeds {
    for &lambda in &lambdas {
        let lr: f64 = std::env::var("SPAN_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(3e-4);
        let epochs: usize = std::env::var("SPAN_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
        let cfg = SpanTrainConfig { lambda, learning_rate: lr, epochs, seed, ..SpanTrainConfig::default() };
        let init = LoraAdapter::init(&backbone.config, 32, 16.0, 0.05, StageTag::Span, "source", seed)?;
        let (adapter, log) = train_span_stage(&backbone, &examples, init, &cfg)?;
        let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
        for s in &target {
            let gold = spans_from_tags(s, &catalog, TagScheme::Bio, true)?;
            let det = detect_spans(&backbone, &tokenizer, &span_tpl, &catalog, s, Some(&adapter), &params, 320)?;
            let want: Vec<(usize, usize)> = gold.iter().map(|g| (g.begin, g.end)).collect();
            ng += want.len();
            np += det.spans.len();
            tp += det.spans.iter().filter(|d| want.contains(&(d.begin, d.end))).count();
        }
        let p = tp as f64 / np.max(1) as f64;
        let r = tp as f64 / ng.max(1) as f64;
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        println!(
            "seed {seed} lambda {lambda}: P {p:.3} R {r:.3} F {f:.3} (tp {tp} pred {np} gold {ng}) gen-loss {:.3}->{:.3}",
            log.first().unwrap().l_g, log.last().unwrap().l_g
        );
    }
    }
    Ok(())
}
