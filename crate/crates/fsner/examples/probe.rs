use fsner::backbone::tokenizer::build_vocab;
use fsner::backbone::{pretrain, Backbone, BackboneConfig, PretrainConfig, Tokenizer};
use fsner::corpus::{generate_synthetic_corpus, synthetic_catalog, write_column_corpus, SynthSpec};
use fsner::prompting::{render_span_prompt, Template, SPAN_TEMPLATE, TYPE_TEMPLATE};
use fsner::type_classifier::support_type_prompt;
use std::path::Path;

fn main() -> fsner::Result<()> {
    let catalog = synthetic_catalog(2)?;
    let mut spec_a = SynthSpec::desk(2);
    spec_a.entity_density = 0.45;
    spec_a.sentence_len = (8, 14);
    spec_a.entity_len = (2, 3);
    spec_a.n_sentences = 100;
    // domain whose classes cut across the target's vocabulary clusters
    let mut spec_b = spec_a.clone();
    {
        let v0 = spec_a.entity_vocabs[0].clone();
        let v1 = spec_a.entity_vocabs[1].clone();
        let mut m0: Vec<String> = v0[..6].to_vec();
        m0.extend(v1[..6].iter().cloned());
        let mut m1: Vec<String> = v0[6..].to_vec();
        m1.extend(v1[6..].iter().cloned());
        spec_b.entity_vocabs = vec![m0, m1];
    }
    let mut spec_t = spec_a.clone();
    spec_t.n_sentences = 60;

    let a = generate_synthetic_corpus(&spec_a, 10)?;
    let b = generate_synthetic_corpus(&spec_b, 11)?;
    let target = generate_synthetic_corpus(&spec_t, 12)?;

    std::fs::create_dir_all("/tmp/c7").ok();
    write_column_corpus(Path::new("/tmp/c7/a.conll"), &a)?;
    write_column_corpus(Path::new("/tmp/c7/b.conll"), &b)?;
    write_column_corpus(Path::new("/tmp/c7/target.conll"), &target)?;
    // span corpus covers the source domains only; the target span task is left to adapters
    let mut sources = a.clone();
    sources.extend(b.iter().cloned());
    write_column_corpus(Path::new("/tmp/c7/span.conll"), &sources)?;
    let mut all = sources.clone();
    all.extend(target.iter().cloned());
    std::fs::write("/tmp/c7/catalog.json", serde_json::to_string_pretty(&catalog).unwrap()).unwrap();

    let mut words: Vec<String> = Vec::new();
    for s in &all {
        words.extend(s.tokens.iter().cloned());
    }
    for t in [SPAN_TEMPLATE, TYPE_TEMPLATE] {
        words.extend(t.split_whitespace().filter(|w| !w.contains('{')).map(str::to_string));
    }
    words.extend(catalog.type_names().iter().map(|n| n.to_string()));
    let tokenizer = Tokenizer::from_tokens(build_vocab(&words))?;

    let span_tpl = Template::span_default();
    let type_tpl = Template::type_default();
    let mut sequences = Vec::new();
    for s in &sources {
        sequences.push(render_span_prompt(s, &catalog, &span_tpl, &tokenizer, 320)?.token_ids);
    }
    for s in &all {
        sequences.push(support_type_prompt(s, &catalog, &type_tpl, &tokenizer, 320)?.token_ids);
    }
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let mut backbone = Backbone::new(BackboneConfig::reference(tokenizer.vocab_size()), 0)?;
    let log = pretrain(&mut backbone, &sequences, &PretrainConfig { epochs, lr: 3e-3, seed: 0 })?;
    println!("pretrained {} seqs {} epochs, loss {:.4}", sequences.len(), epochs, log.last().unwrap().loss);
    fsner::backbone::save_backbone(Path::new("/tmp/c7/backbone.ckpt"), &backbone)?;
    tokenizer.save(Path::new("/tmp/c7/backbone.tok"))?;
    Ok(())
}
