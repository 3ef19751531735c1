//! Command-line surface for the two-stage few-shot tagger: synthetic
//! corpora, backbone pretraining, stage training, adapter composition,
//! inference, and seeded evaluation with an ablation grid. Every run writes
//! a manifest (inputs, outputs, hashes, seed, wall time) next to its
//! artifacts, and every run is reproducible from its config snapshot.

mod runconfig;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fsner::backbone::tokenizer::build_vocab;
use fsner::backbone::{
    load_backbone, pretrain, save_backbone, Backbone, BackboneConfig, PretrainConfig, Tokenizer,
};
use fsner::corpus::{
    generate_synthetic_corpus, load_column_corpus, sample_episode, synthetic_catalog,
    write_column_corpus, Episode, LabeledSentence, SynthSpec, TypeCatalog,
};
use fsner::inference_eval::{
    ablation_variants, compose_type_adapter, dataset_seed_score, episode_seed_score, infer,
    render_table, render_tsv, train_source_stages, EvalConfig, EvalReport, ModelBundle,
    Protocol, SeedScore, SourceMaterial, TrainedStages, TrainingConfig,
};
use fsner::lora::{load_adapter, save_adapter, LoraAdapter, StageTag};
use fsner::prompting::{Template, SPAN_TEMPLATE, TYPE_TEMPLATE};
use fsner::span_detector::{build_span_examples, train_span_stage};
use fsner::type_classifier::{
    build_prototypes, export_prototypes, import_prototypes, support_type_prompt,
    tune_domain_adapters, DomainEpisodes, TypeEpisode,
};

use runconfig::RunConfig;

/// Few-shot named-entity tagging over a pluggable autoregressive backbone.
#[derive(Parser, Debug)]
#[command(name = "fsner", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic corpus and its type catalog.
    Synth(SynthArgs),
    /// Train a backbone from scratch on rendered prompts from a corpus.
    Pretrain(PretrainArgs),
    /// Train the span-detection adapter on a labeled corpus.
    TrainSpan(TrainSpanArgs),
    /// Train one type-classification adapter per source domain.
    TrainType(TrainTypeArgs),
    /// Search composition weights for domain adapters on a support set.
    Compose(ComposeArgs),
    /// Tag sentences: detect spans, then type them against prototypes.
    Infer(InferArgs),
    /// Train on source material and score a target under a seeded protocol.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key-value config file; overrides built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Single `key=value` override; repeatable, beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-seed evaluation fan-out.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    /// Defaults, then file, then `--set` pairs, then dedicated flags.
    fn resolve(&self, dedicated: &[(String, String)]) -> Result<RunConfig> {
        let file_text = match &self.config {
            Some(path) => {
                require_path(path, "config file")?;
                Some(fs::read_to_string(path).with_context(|| display(path))?)
            }
            None => None,
        };
        let mut overrides = Vec::new();
        for pair in &self.set {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                fsner::Error::Config(format!("--set '{pair}': expected key=value"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(jobs) = self.jobs {
            overrides.push(("jobs".into(), jobs.to_string()));
        }
        overrides.extend(dedicated.iter().cloned());
        Ok(runconfig::resolve(file_text.as_deref(), &overrides)?)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for corpus.conll and catalog.json.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Number of entity classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Number of sentences.
    #[arg(long)]
    sentences: Option<usize>,
    /// Target fraction of tokens inside entities.
    #[arg(long)]
    density: Option<f64>,
    /// Entity length range, `MIN,MAX` words.
    #[arg(long, value_name = "MIN,MAX")]
    entity_len: Option<String>,
    /// Sentence length range, `MIN,MAX` words.
    #[arg(long, value_name = "MIN,MAX")]
    sentence_len: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Labeled corpus in column format.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Type catalog JSON.
    #[arg(long, value_name = "FILE")]
    catalog: PathBuf,
    /// Output directory for backbone.ckpt and backbone.tok.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainSpanArgs {
    /// Backbone stem; reads STEM.ckpt and STEM.tok.
    #[arg(long, value_name = "STEM")]
    backbone: PathBuf,
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    catalog: PathBuf,
    /// Output directory for span_adapter.lora and train_span.log.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Contrastive term weight (same as `--set stage.span.lambda=F`).
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainTypeArgs {
    #[arg(long, value_name = "STEM")]
    backbone: PathBuf,
    /// Source domain as `NAME=CORPUS=CATALOG`; repeatable.
    #[arg(long = "domain", value_name = "NAME=CORPUS=CATALOG", required = true)]
    domains: Vec<String>,
    /// Output directory for adapter_NAME.lora files and train_type.log.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Learning rate (same as `--set stage.type.lr=F`).
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long, value_name = "STEM")]
    backbone: PathBuf,
    /// Domain adapter file; repeatable.
    #[arg(long = "adapter", value_name = "FILE", required = true)]
    adapters: Vec<PathBuf>,
    /// Support sentences steering the weight search.
    #[arg(long, value_name = "FILE")]
    support: PathBuf,
    #[arg(long, value_name = "FILE")]
    catalog: PathBuf,
    /// Composed adapter output; weight report lands beside it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Objective evaluation budget (same as `--set compose.budget=N`).
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, value_name = "STEM")]
    backbone: PathBuf,
    /// Sentences to tag, column format (tags may be all-O).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    catalog: PathBuf,
    #[arg(long, value_name = "FILE")]
    span_adapter: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    type_adapter: Option<PathBuf>,
    /// Prototype file from a previous run.
    #[arg(long, value_name = "FILE", conflicts_with = "support")]
    prototypes: Option<PathBuf>,
    /// Labeled support sentences to build prototypes from.
    #[arg(long, value_name = "FILE")]
    support: Option<PathBuf>,
    /// Write the prototypes used for typing.
    #[arg(long, value_name = "FILE")]
    save_prototypes: Option<PathBuf>,
    /// Predictions file, one JSON record per sentence.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_name = "STEM")]
    backbone: PathBuf,
    /// Span-stage training corpus.
    #[arg(long, value_name = "FILE")]
    span_corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    span_catalog: PathBuf,
    /// Type-stage source domain as `NAME=CORPUS=CATALOG`; repeatable.
    #[arg(long = "domain", value_name = "NAME=CORPUS=CATALOG", required = true)]
    domains: Vec<String>,
    /// Corpus scored by the evaluation.
    #[arg(long, value_name = "FILE")]
    target_corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    target_catalog: PathBuf,
    /// `episode` (sampled N-way K-shot tasks) or `dataset` (full test set).
    #[arg(long, default_value = "episode")]
    protocol: String,
    /// Score all six ablation variants instead of the configured flags.
    #[arg(long)]
    grid: bool,
    /// Output directory for report.txt, seeds.jsonl, plot.tsv, snapshot.txt.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            std::process::exit(1);
        }
        Err(e) => {
            print!("{e}");
            std::process::exit(0);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<fsner::Error>() {
                Some(inner) => inner.exit_code(),
                None => 2,
            }
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::TrainSpan(args) => cmd_train_span(args),
        Command::TrainType(args) => cmd_train_type(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

// ---- manifest ----------------------------------------------------------

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    seed: u64,
    wall_time_seconds: f64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    config_snapshot: String,
}

/// Collects hashed inputs/outputs while a subcommand runs.
struct RunLog {
    command: String,
    started: Instant,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

impl RunLog {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(file_record(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(file_record(path)?);
        Ok(())
    }

    fn finish(mut self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        self.inputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: self.command,
            seed: cfg.seed,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            inputs: self.inputs,
            outputs: self.outputs,
            config_snapshot: cfg.snapshot(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| display(&path))?;
        Ok(())
    }
}

fn file_record(path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path).with_context(|| display(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(FileRecord {
        path: display(path),
        sha256: format!("{:x}", hasher.finalize()),
    })
}

// ---- shared plumbing ---------------------------------------------------

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(fsner::Error::Validation(format!("{what} '{}' does not exist", path.display()))
            .into())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| display(dir))?;
    Ok(())
}

fn load_catalog(path: &Path) -> Result<TypeCatalog> {
    require_path(path, "catalog path")?;
    let text = fs::read_to_string(path).with_context(|| display(path))?;
    let catalog: TypeCatalog =
        serde_json::from_str(&text).with_context(|| display(path))?;
    Ok(catalog)
}

fn load_corpus(path: &Path, catalog: &TypeCatalog) -> Result<Vec<LabeledSentence>> {
    require_path(path, "corpus path")?;
    Ok(load_column_corpus(path, catalog)?)
}

/// Reads STEM.ckpt and STEM.tok.
fn load_stem(stem: &Path) -> Result<(Backbone, Tokenizer)> {
    let ckpt = stem.with_extension("ckpt");
    let tok = stem.with_extension("tok");
    require_path(&ckpt, "backbone checkpoint")?;
    require_path(&tok, "tokenizer file")?;
    Ok((load_backbone(&ckpt)?, Tokenizer::load(&tok)?))
}

fn parse_range(text: &str, key: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').collect();
    let bad = || fsner::Error::Config(format!("--{key} '{text}': expected MIN,MAX"));
    if parts.len() != 2 {
        return Err(bad().into());
    }
    let lo = parts[0].trim().parse().map_err(|_| bad())?;
    let hi = parts[1].trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

/// `NAME=CORPUS=CATALOG` triple for a source domain.
fn parse_domain_spec(text: &str) -> Result<(String, PathBuf, PathBuf)> {
    let parts: Vec<&str> = text.split('=').collect();
    if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
        return Err(fsner::Error::Config(format!(
            "--domain '{text}': expected NAME=CORPUS=CATALOG"
        ))
        .into());
    }
    Ok((parts[0].into(), parts[1].into(), parts[2].into()))
}

struct Templates {
    span: Template,
    typ: Template,
}

fn templates() -> Templates {
    Templates {
        span: Template::span_default(),
        typ: Template::type_default(),
    }
}

fn bundle<'a>(
    backbone: &'a Backbone,
    tokenizer: &'a Tokenizer,
    tpl: &'a Templates,
    cfg: &RunConfig,
) -> ModelBundle<'a> {
    ModelBundle {
        backbone,
        tokenizer,
        span_template: &tpl.span,
        type_template: &tpl.typ,
        generation: cfg.generation.clone(),
        cutoff: cfg.typ.cutoff,
        sources: cfg.typ.sources,
        layer: cfg.typ.layer,
        verbatim_sign: cfg.typ.verbatim_sign,
    }
}

/// Loads each `NAME=CORPUS=CATALOG` triple and samples its episodes. Each
/// episode keeps the full domain catalog so spanless classes still
/// contribute name-mention prototypes.
fn load_domains(
    specs: &[String],
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<Vec<DomainEpisodes>> {
    let mut domains = Vec::new();
    for (di, spec) in specs.iter().enumerate() {
        let (name, corpus_path, catalog_path) = parse_domain_spec(spec)?;
        let catalog = load_catalog(&catalog_path)?;
        let corpus = load_corpus(&corpus_path, &catalog)?;
        log.input(&corpus_path)?;
        log.input(&catalog_path)?;
        let mut episodes = Vec::with_capacity(cfg.episodes);
        for e in 0..cfg.episodes {
            // decorrelated from the target-episode seeds (cfg.seed + e)
            let seed = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((di * cfg.episodes + e) as u64);
            let ep = sample_episode(&corpus, &catalog, cfg.n_way, cfg.k_shot, cfg.query_shots, seed)?;
            episodes.push(TypeEpisode {
                support: ep.support,
                query: ep.query,
            });
        }
        domains.push(DomainEpisodes {
            domain: name,
            catalog,
            episodes,
        });
    }
    Ok(domains)
}

/// Snapshot block for text artifacts: every line `# `-prefixed.
fn snapshot_header(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for line in cfg.snapshot().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str, log: &mut RunLog) -> Result<()> {
    fs::write(path, text).with_context(|| display(path))?;
    log.output(path)?;
    Ok(())
}

// ---- synth -------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = args.common.resolve(&[])?;
    let mut log = RunLog::new("synth");
    ensure_dir(&args.out_dir)?;

    let mut spec = SynthSpec::desk(args.classes);
    if let Some(n) = args.sentences {
        spec.n_sentences = n;
    }
    if let Some(d) = args.density {
        spec.entity_density = d;
    }
    if let Some(r) = &args.entity_len {
        spec.entity_len = parse_range(r, "entity-len")?;
    }
    if let Some(r) = &args.sentence_len {
        spec.sentence_len = parse_range(r, "sentence-len")?;
    }
    let corpus = generate_synthetic_corpus(&spec, cfg.seed)?;
    let catalog = synthetic_catalog(args.classes)?;

    let corpus_path = args.out_dir.join("corpus.conll");
    write_column_corpus(&corpus_path, &corpus)?;
    log.output(&corpus_path)?;
    let catalog_path = args.out_dir.join("catalog.json");
    write_text(&catalog_path, &serde_json::to_string_pretty(&catalog)?, &mut log)?;

    println!(
        "synth: classes={} sentences={} density={} entity_len={:?} seed={}",
        args.classes,
        corpus.len(),
        spec.entity_density,
        spec.entity_len,
        cfg.seed
    );
    println!("wrote {} and {}", display(&corpus_path), display(&catalog_path));
    log.finish(&args.out_dir, &cfg)
}

// ---- pretrain ----------------------------------------------------------

/// Vocabulary: corpus words, instruction words from both templates, and
/// catalog type names (placeholders excluded; specials come from the
/// reserved block).
fn vocab_words(corpus: &[LabeledSentence], catalog: &TypeCatalog) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for s in corpus {
        words.extend(s.tokens.iter().cloned());
    }
    for template in [SPAN_TEMPLATE, TYPE_TEMPLATE] {
        words.extend(
            template
                .split_whitespace()
                .filter(|w| !w.contains('{'))
                .map(str::to_string),
        );
    }
    words.extend(catalog.type_names().iter().map(|n| n.to_string()));
    words
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.common.resolve(&[])?;
    let mut log = RunLog::new("pretrain");
    ensure_dir(&args.out_dir)?;

    let catalog = load_catalog(&args.catalog)?;
    let corpus = load_corpus(&args.corpus, &catalog)?;
    log.input(&args.corpus)?;
    log.input(&args.catalog)?;

    let tokenizer = Tokenizer::from_tokens(build_vocab(&vocab_words(&corpus, &catalog)))?;
    let tpl = templates();
    let mut sequences = Vec::with_capacity(2 * corpus.len());
    for sentence in &corpus {
        let span = fsner::prompting::render_span_prompt(
            sentence,
            &catalog,
            &tpl.span,
            &tokenizer,
            cfg.span.cutoff,
        )?;
        sequences.push(span.token_ids);
        let typ = support_type_prompt(sentence, &catalog, &tpl.typ, &tokenizer, cfg.typ.cutoff)?;
        sequences.push(typ.token_ids);
    }

    let shape = match cfg.preset.as_str() {
        "tiny" => BackboneConfig::tiny(tokenizer.vocab_size()),
        _ => BackboneConfig::reference(tokenizer.vocab_size()),
    };
    let mut backbone = Backbone::new(shape, cfg.seed)?;
    let records = pretrain(
        &mut backbone,
        &sequences,
        &PretrainConfig {
            epochs: cfg.pretrain_epochs,
            lr: cfg.pretrain_lr,
            seed: cfg.seed,
        },
    )?;

    let ckpt = args.out_dir.join("backbone.ckpt");
    save_backbone(&ckpt, &backbone)?;
    log.output(&ckpt)?;
    let tok = args.out_dir.join("backbone.tok");
    tokenizer.save(&tok)?;
    log.output(&tok)?;

    let mut text = snapshot_header(&cfg);
    let _ = writeln!(
        text,
        "# pretrain preset = {} vocab = {} sequences = {}",
        cfg.preset,
        tokenizer.vocab_size(),
        sequences.len()
    );
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(&args.out_dir.join("pretrain.log"), &text, &mut log)?;

    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrain: {} sequences, {} epochs, final loss {:.4}",
        sequences.len(),
        cfg.pretrain_epochs,
        last
    );
    println!("wrote {} and {}", display(&ckpt), display(&tok));
    log.finish(&args.out_dir, &cfg)
}

// ---- train-span --------------------------------------------------------

fn cmd_train_span(args: TrainSpanArgs) -> Result<()> {
    let mut dedicated = Vec::new();
    if let Some(lambda) = args.lambda {
        dedicated.push(("stage.span.lambda".to_string(), lambda.to_string()));
    }
    let cfg = args.common.resolve(&dedicated)?;
    let mut log = RunLog::new("train-span");
    ensure_dir(&args.out_dir)?;

    let (backbone, tokenizer) = load_stem(&args.backbone)?;
    let catalog = load_catalog(&args.catalog)?;
    let corpus = load_corpus(&args.corpus, &catalog)?;
    log.input(&args.backbone.with_extension("ckpt"))?;
    log.input(&args.corpus)?;
    log.input(&args.catalog)?;

    let tpl = templates();
    let examples = build_span_examples(&corpus, &catalog, &tpl.span, &tokenizer, cfg.span.cutoff)?;
    let adapter = LoraAdapter::init(
        &backbone.config,
        cfg.adapter.rank,
        cfg.adapter.alpha,
        cfg.adapter.dropout,
        StageTag::Span,
        "source",
        cfg.adapter.seed,
    )?;
    let (adapter, records) = train_span_stage(&backbone, &examples, adapter, &cfg.span)?;

    let out = args.out_dir.join("span_adapter.lora");
    save_adapter(&out, &adapter)?;
    log.output(&out)?;

    let mut text = snapshot_header(&cfg);
    let _ = writeln!(
        text,
        "# train-span lambda = {} lr = {} epochs = {} examples = {}",
        cfg.span.lambda,
        cfg.span.learning_rate,
        cfg.span.epochs,
        examples.len()
    );
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(&args.out_dir.join("train_span.log"), &text, &mut log)?;

    let last = records.last().map(|r| r.combined).unwrap_or(f64::NAN);
    println!(
        "train-span: lambda = {}, {} examples, final loss {:.4}",
        cfg.span.lambda,
        examples.len(),
        last
    );
    println!("wrote {}", display(&out));
    log.finish(&args.out_dir, &cfg)
}

// ---- train-type --------------------------------------------------------

fn cmd_train_type(args: TrainTypeArgs) -> Result<()> {
    let mut dedicated = Vec::new();
    if let Some(lr) = args.lr {
        dedicated.push(("stage.type.lr".to_string(), lr.to_string()));
    }
    let cfg = args.common.resolve(&dedicated)?;
    let mut log = RunLog::new("train-type");
    ensure_dir(&args.out_dir)?;

    let (backbone, tokenizer) = load_stem(&args.backbone)?;
    log.input(&args.backbone.with_extension("ckpt"))?;
    let domains = load_domains(&args.domains, &cfg, &mut log)?;

    let tpl = templates();
    let trained = tune_domain_adapters(
        &backbone,
        &domains,
        &tpl.typ,
        &tokenizer,
        &cfg.adapter,
        &cfg.typ,
    )?;

    let mut text = snapshot_header(&cfg);
    let _ = writeln!(
        text,
        "# train-type lr = {} epochs = {} domains = {}",
        cfg.typ.learning_rate,
        cfg.typ.epochs,
        trained.len()
    );
    let mut paths = Vec::new();
    for (adapter, records) in &trained {
        let path = args.out_dir.join(format!("adapter_{}.lora", adapter.domain));
        save_adapter(&path, adapter)?;
        log.output(&path)?;
        let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
        let _ = writeln!(
            text,
            "# domain {} final loss {:.6}",
            adapter.domain, last
        );
        for r in records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        paths.push(path);
    }
    write_text(&args.out_dir.join("train_type.log"), &text, &mut log)?;

    println!(
        "train-type: lr = {}, {} domain adapter(s)",
        cfg.typ.learning_rate,
        paths.len()
    );
    for p in &paths {
        println!("wrote {}", display(p));
    }
    log.finish(&args.out_dir, &cfg)
}

// ---- compose -----------------------------------------------------------

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    let mut dedicated = Vec::new();
    if let Some(budget) = args.budget {
        dedicated.push(("compose.budget".to_string(), budget.to_string()));
    }
    let cfg = args.common.resolve(&dedicated)?;
    let mut log = RunLog::new("compose");

    let (backbone, tokenizer) = load_stem(&args.backbone)?;
    log.input(&args.backbone.with_extension("ckpt"))?;
    let catalog = load_catalog(&args.catalog)?;
    let support = load_corpus(&args.support, &catalog)?;
    log.input(&args.support)?;
    log.input(&args.catalog)?;

    let mut adapters = Vec::new();
    for path in &args.adapters {
        require_path(path, "adapter path")?;
        adapters.push(load_adapter(path, Some(StageTag::Type))?);
        log.input(path)?;
    }

    let tpl = templates();
    let b = bundle(&backbone, &tokenizer, &tpl, &cfg);
    let (merged, result) =
        compose_type_adapter(&b, &adapters, &support, &catalog, &cfg.typ, &cfg.composition)?;

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_adapter(&args.out, &merged)?;
    log.output(&args.out)?;

    let mut report = snapshot_header(&cfg);
    let _ = writeln!(report, "# compose budget = {}", cfg.composition.budget);
    for (adapter, w) in adapters.iter().zip(&result.weights) {
        let _ = writeln!(report, "{} {}", adapter.domain, w);
    }
    let _ = writeln!(report, "objective = {}", result.objective);
    let _ = writeln!(report, "evaluations = {}", result.evaluations);
    let report_path = args.out.with_extension("weights.txt");
    write_text(&report_path, &report, &mut log)?;

    println!("compose: budget = {}", cfg.composition.budget);
    for (adapter, w) in adapters.iter().zip(&result.weights) {
        println!("  w[{}] = {}", adapter.domain, w);
    }
    println!(
        "objective = {} after {} evaluations",
        result.objective, result.evaluations
    );
    println!("wrote {}", display(&args.out));
    let manifest_dir = args
        .out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    log.finish(&manifest_dir, &cfg)
}

// ---- infer -------------------------------------------------------------

#[derive(Serialize)]
struct SpanOut {
    begin: usize,
    end: usize,
    type_id: usize,
    type_name: String,
    surface: String,
    log_score: f64,
}

#[derive(Serialize)]
struct PredictionOut {
    sentence_id: String,
    spans: Vec<SpanOut>,
    malformed: bool,
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg = args.common.resolve(&[])?;
    let mut log = RunLog::new("infer");

    let (backbone, tokenizer) = load_stem(&args.backbone)?;
    log.input(&args.backbone.with_extension("ckpt"))?;
    let catalog = load_catalog(&args.catalog)?;
    let sentences = load_corpus(&args.input, &catalog)?;
    log.input(&args.input)?;
    log.input(&args.catalog)?;

    let span_adapter = match &args.span_adapter {
        Some(p) => {
            require_path(p, "adapter path")?;
            log.input(p)?;
            Some(load_adapter(p, Some(StageTag::Span))?)
        }
        None => None,
    };
    let type_adapter = match &args.type_adapter {
        Some(p) => {
            require_path(p, "adapter path")?;
            log.input(p)?;
            Some(load_adapter(p, Some(StageTag::Type))?)
        }
        None => None,
    };

    let tpl = templates();
    let b = bundle(&backbone, &tokenizer, &tpl, &cfg);

    let prototypes = match (&args.prototypes, &args.support) {
        (Some(path), _) => {
            require_path(path, "prototype path")?;
            log.input(path)?;
            import_prototypes(&fs::read_to_string(path).with_context(|| display(path))?)?
        }
        (None, Some(path)) => {
            let support = load_corpus(path, &catalog)?;
            log.input(path)?;
            let rendered = support
                .iter()
                .map(|s| support_type_prompt(s, &catalog, &tpl.typ, &tokenizer, cfg.typ.cutoff))
                .collect::<fsner::Result<Vec<_>>>()?;
            build_prototypes(
                &backbone,
                &rendered,
                &catalog,
                type_adapter.as_ref(),
                cfg.typ.layer,
                cfg.typ.sources,
                "target",
            )?
        }
        (None, None) => {
            return Err(fsner::Error::Config(
                "infer needs --prototypes or --support".into(),
            )
            .into())
        }
    };

    let mut lines = String::new();
    let mut total_spans = 0;
    let mut malformed = 0;
    for sentence in &sentences {
        let prediction = infer(
            &b,
            &catalog,
            span_adapter.as_ref(),
            type_adapter.as_ref(),
            &prototypes,
            sentence,
        )?;
        if prediction.malformed {
            malformed += 1;
        }
        total_spans += prediction.spans.len();
        let record = PredictionOut {
            sentence_id: prediction.sentence_id,
            spans: prediction
                .spans
                .iter()
                .map(|s| SpanOut {
                    begin: s.begin,
                    end: s.end,
                    type_id: s.type_id,
                    type_name: catalog.type_name(s.type_id).to_string(),
                    surface: sentence.tokens[s.begin..s.end].join(" "),
                    log_score: s.log_score,
                })
                .collect(),
            malformed: prediction.malformed,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }

    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    write_text(&args.out, &lines, &mut log)?;
    if let Some(path) = &args.save_prototypes {
        write_text(path, &export_prototypes(&prototypes, &catalog)?, &mut log)?;
    }

    println!(
        "infer: {} sentence(s), {} span(s), {} malformed generation(s)",
        sentences.len(),
        total_spans,
        malformed
    );
    println!("wrote {}", display(&args.out));
    let manifest_dir = args
        .out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    log.finish(&manifest_dir, &cfg)
}

// ---- evaluate ----------------------------------------------------------

/// Scores one variant's seeds, fanned out over `jobs` threads. Each seed is
/// independent, so the fan-out width never changes any number.
fn seed_scores(
    jobs: usize,
    seeds: &[u64],
    score: impl Fn(u64) -> fsner::Result<SeedScore> + Sync,
) -> fsner::Result<Vec<SeedScore>> {
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| score(s)).collect();
    }
    let workers = jobs.min(seeds.len());
    let mut slots: Vec<Option<fsner::Result<SeedScore>>> = Vec::new();
    slots.resize_with(seeds.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let score = &score;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for (i, &seed) in seeds.iter().enumerate() {
                    if i % workers == w {
                        out.push((i, score(seed)));
                    }
                }
                out
            }));
        }
        for handle in handles {
            for (i, result) in handle.join().expect("seed worker panicked") {
                slots[i] = Some(result);
            }
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every seed scored"))
        .collect()
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = args.common.resolve(&[])?;
    let protocol = match args.protocol.as_str() {
        "episode" => Protocol::Episode,
        "dataset" => Protocol::Dataset,
        other => {
            return Err(fsner::Error::Config(format!(
                "--protocol '{other}': expected episode or dataset"
            ))
            .into())
        }
    };
    let mut log = RunLog::new("evaluate");
    ensure_dir(&args.out_dir)?;

    let (backbone, tokenizer) = load_stem(&args.backbone)?;
    log.input(&args.backbone.with_extension("ckpt"))?;
    let span_catalog = load_catalog(&args.span_catalog)?;
    let span_corpus = load_corpus(&args.span_corpus, &span_catalog)?;
    log.input(&args.span_corpus)?;
    log.input(&args.span_catalog)?;
    let domains = load_domains(&args.domains, &cfg, &mut log)?;
    let target_catalog = load_catalog(&args.target_catalog)?;
    let target_corpus = load_corpus(&args.target_corpus, &target_catalog)?;
    log.input(&args.target_corpus)?;
    log.input(&args.target_catalog)?;

    // Episodes are fixed before the seed loop; per-seed variation comes from
    // re-running the pipeline (source training, adaptation), not task resampling.
    let episodes: Vec<Episode> = match protocol {
        Protocol::Episode => (0..cfg.episodes)
            .map(|e| {
                sample_episode(
                    &target_corpus,
                    &target_catalog,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.query_shots,
                    cfg.seed.wrapping_add(e as u64),
                )
            })
            .collect::<fsner::Result<Vec<_>>>()?,
        Protocol::Dataset => Vec::new(),
    };

    let tpl = templates();
    let b = bundle(&backbone, &tokenizer, &tpl, &cfg);
    let source = SourceMaterial {
        span_sentences: &span_corpus,
        span_catalog: &span_catalog,
        domains: &domains,
    };
    let train_cfg = TrainingConfig {
        span: cfg.span.clone(),
        typ: cfg.typ.clone(),
        adapter: cfg.adapter,
    };
    let eval_cfg = EvalConfig {
        seeds: cfg.eval_seeds.clone(),
        span_tune: cfg.span.clone(),
        type_tune: cfg.typ.clone(),
        composition: cfg.composition.clone(),
        ablation: cfg.ablation,
        config_snapshot: cfg.snapshot(),
    };
    eval_cfg.validate()?;

    let variants = if args.grid {
        ablation_variants()
    } else {
        vec![("run".to_string(), cfg.ablation)]
    };

    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for (name, flags) in variants {
        let mut vcfg = eval_cfg.clone();
        vcfg.ablation = flags;
        let scores = seed_scores(cfg.jobs, &vcfg.seeds, |seed| {
            // Each seed re-runs the whole pipeline: source stages are retrained
            // with seed-shifted randomness so the spread reflects training draws,
            // not just support sampling.
            let mut tc = train_cfg.clone();
            tc.span.seed = tc.span.seed.wrapping_add(seed);
            tc.typ.seed = tc.typ.seed.wrapping_add(seed);
            tc.adapter.seed = tc.adapter.seed.wrapping_add(seed);
            let stages: TrainedStages = train_source_stages(&b, &source, &tc, &flags)?;
            match protocol {
                Protocol::Episode => {
                    episode_seed_score(&b, &stages, &target_catalog, &episodes, &vcfg, seed)
                }
                Protocol::Dataset => dataset_seed_score(
                    &b,
                    &stages,
                    &target_catalog,
                    &target_corpus,
                    cfg.k_shot,
                    &vcfg,
                    seed,
                ),
            }
        })?;
        let report = EvalReport::from_scores(protocol, scores, vcfg.effective_snapshot())?;
        println!("{name}: f1 {}", report.f1_cell());
        rows.push((name, report));
    }

    let table = render_table(&rows);
    let mut report_text = snapshot_header(&cfg);
    let _ = writeln!(report_text, "# protocol = {protocol}");
    report_text.push_str(&table);
    write_text(&args.out_dir.join("report.txt"), &report_text, &mut log)?;

    let mut seeds_text = String::new();
    for (name, report) in &rows {
        for s in &report.scores {
            let mut record = serde_json::to_value(s)?;
            record["variant"] = serde_json::Value::String(name.clone());
            seeds_text.push_str(&serde_json::to_string(&record)?);
            seeds_text.push('\n');
        }
    }
    write_text(&args.out_dir.join("seeds.jsonl"), &seeds_text, &mut log)?;
    write_text(&args.out_dir.join("plot.tsv"), &render_tsv(&rows), &mut log)?;
    write_text(&args.out_dir.join("snapshot.txt"), &cfg.snapshot(), &mut log)?;

    print!("{table}");
    log.finish(&args.out_dir, &cfg)
}
