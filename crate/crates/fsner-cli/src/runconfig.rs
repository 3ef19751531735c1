//! Flat key-value run configuration with three precedence layers: built-in
//! defaults, then a config file, then command-line overrides. The snapshot
//! prints every key in canonical order and parses back to an identical
//! configuration, so artifacts can embed it and runs can be replayed.

use fsner::backbone::GenerationParams;
use fsner::inference_eval::AblationConfig;
use fsner::lora::CompositionConfig;
use fsner::span_detector::SpanTrainConfig;
use fsner::type_classifier::{AdapterSpec, TypeTrainConfig};
use fsner::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Backbone shape preset: "reference" or "tiny".
    pub preset: String,
    /// Global seed for corpus sampling and anything without its own seed.
    pub seed: u64,
    /// Per-seed evaluation fan-out width; 1 runs everything on one thread.
    pub jobs: usize,
    pub span: SpanTrainConfig,
    pub typ: TypeTrainConfig,
    pub adapter: AdapterSpec,
    pub composition: CompositionConfig,
    pub generation: GenerationParams,
    pub ablation: AblationConfig,
    pub eval_seeds: Vec<u64>,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_shots: usize,
    /// Episodes sampled per evaluation (and per source domain).
    pub episodes: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "reference".into(),
            seed: 0,
            jobs: 1,
            span: SpanTrainConfig::default(),
            typ: TypeTrainConfig::default(),
            adapter: AdapterSpec::default(),
            composition: CompositionConfig::default(),
            generation: GenerationParams::default(),
            ablation: AblationConfig::default(),
            eval_seeds: (0..5).collect(),
            n_way: 2,
            k_shot: 1,
            query_shots: 1,
            episodes: 4,
            pretrain_epochs: 30,
            pretrain_lr: 3e-3,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key '{key}': '{value}' is not {want}"))
}

fn pf64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn pusize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value, "a non-negative integer"))
}

fn pu64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| bad(key, value, "a non-negative integer"))
}

fn pbool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

/// "auto" or a concrete layer index.
fn playef(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        pusize(key, value).map(Some)
    }
}

fn pseeds(key: &str, value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(|s| pu64(key, s.trim()))
        .collect()
}

fn layer_text(layer: Option<usize>) -> String {
    layer.map_or_else(|| "auto".into(), |l| l.to_string())
}

impl RunConfig {
    /// Applies one key; unknown keys fail fast.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone.preset" => match value {
                "reference" | "tiny" => self.preset = value.into(),
                _ => return Err(bad(key, value, "one of reference, tiny")),
            },
            "seed" => self.seed = pu64(key, value)?,
            "jobs" => {
                self.jobs = pusize(key, value)?;
                if self.jobs == 0 {
                    return Err(bad(key, value, "at least 1"));
                }
            }
            "stage.span.lr" => self.span.learning_rate = pf64(key, value)?,
            "stage.span.epochs" => self.span.epochs = pusize(key, value)?,
            "stage.span.batch" => self.span.batch_size = pusize(key, value)?,
            "stage.span.cutoff" => self.span.cutoff = pusize(key, value)?,
            "stage.span.lambda" => self.span.lambda = pf64(key, value)?,
            "stage.span.layer" => self.span.contrastive_layer = playef(key, value)?,
            "stage.span.mean_reduction" => self.span.mean_reduction = pbool(key, value)?,
            "stage.span.seed" => self.span.seed = pu64(key, value)?,
            "stage.type.lr" => self.typ.learning_rate = pf64(key, value)?,
            "stage.type.epochs" => self.typ.epochs = pusize(key, value)?,
            "stage.type.cutoff" => self.typ.cutoff = pusize(key, value)?,
            "stage.type.layer" => self.typ.layer = playef(key, value)?,
            "stage.type.name_mentions" => self.typ.sources.name_mentions = pbool(key, value)?,
            "stage.type.support_spans" => self.typ.sources.support_spans = pbool(key, value)?,
            "stage.type.verbatim_sign" => self.typ.verbatim_sign = pbool(key, value)?,
            "stage.type.seed" => self.typ.seed = pu64(key, value)?,
            "adapter.rank" => self.adapter.rank = pusize(key, value)?,
            "adapter.alpha" => self.adapter.alpha = pf64(key, value)?,
            "adapter.dropout" => self.adapter.dropout = pf64(key, value)?,
            "adapter.seed" => self.adapter.seed = pu64(key, value)?,
            "compose.l1" => self.composition.l1 = pf64(key, value)?,
            "compose.budget" => self.composition.budget = pusize(key, value)?,
            "compose.seed" => self.composition.seed = pu64(key, value)?,
            "generation.temperature" => self.generation.temperature = pf64(key, value)?,
            "generation.top_p" => self.generation.top_p = pf64(key, value)?,
            "generation.top_k" => self.generation.top_k = pusize(key, value)?,
            "generation.num_beams" => self.generation.num_beams = pusize(key, value)?,
            "generation.max_new_tokens" => {
                self.generation.max_new_tokens = pusize(key, value)?
            }
            "ablation.basd" => self.ablation.basd_enabled = pbool(key, value)?,
            "ablation.dal" => self.ablation.dal_enabled = pbool(key, value)?,
            "ablation.sdf" => self.ablation.sdf_enabled = pbool(key, value)?,
            "ablation.tcf" => self.ablation.tcf_enabled = pbool(key, value)?,
            "eval.seeds" => self.eval_seeds = pseeds(key, value)?,
            "eval.n_way" => self.n_way = pusize(key, value)?,
            "eval.k_shot" => self.k_shot = pusize(key, value)?,
            "eval.query_shots" => self.query_shots = pusize(key, value)?,
            "eval.episodes" => self.episodes = pusize(key, value)?,
            "pretrain.epochs" => self.pretrain_epochs = pusize(key, value)?,
            "pretrain.lr" => self.pretrain_lr = pf64(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key '{key}'"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.span.validate()?;
        self.typ.validate()?;
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.query_shots == 0 || self.episodes == 0 {
            return Err(Error::Config(
                "eval.n_way, eval.k_shot, eval.query_shots, eval.episodes must be ≥ 1".into(),
            ));
        }
        if self.pretrain_epochs == 0 || !(self.pretrain_lr.is_finite() && self.pretrain_lr > 0.0)
        {
            return Err(Error::Config(
                "pretrain.epochs must be ≥ 1 and pretrain.lr positive".into(),
            ));
        }
        Ok(())
    }

    /// Every key in canonical order; parsing the result reproduces `self`.
    pub fn snapshot(&self) -> String {
        let seeds = self
            .eval_seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        // `jobs` is deliberately absent: fan-out width never changes a
        // number, and leaving it out keeps snapshots byte-stable across
        // machines with different core counts.
        let lines = [
            format!("backbone.preset = {}", self.preset),
            format!("seed = {}", self.seed),
            format!("stage.span.lr = {}", self.span.learning_rate),
            format!("stage.span.epochs = {}", self.span.epochs),
            format!("stage.span.batch = {}", self.span.batch_size),
            format!("stage.span.cutoff = {}", self.span.cutoff),
            format!("stage.span.lambda = {}", self.span.lambda),
            format!("stage.span.layer = {}", layer_text(self.span.contrastive_layer)),
            format!("stage.span.mean_reduction = {}", self.span.mean_reduction),
            format!("stage.span.seed = {}", self.span.seed),
            format!("stage.type.lr = {}", self.typ.learning_rate),
            format!("stage.type.epochs = {}", self.typ.epochs),
            format!("stage.type.cutoff = {}", self.typ.cutoff),
            format!("stage.type.layer = {}", layer_text(self.typ.layer)),
            format!("stage.type.name_mentions = {}", self.typ.sources.name_mentions),
            format!("stage.type.support_spans = {}", self.typ.sources.support_spans),
            format!("stage.type.verbatim_sign = {}", self.typ.verbatim_sign),
            format!("stage.type.seed = {}", self.typ.seed),
            format!("adapter.rank = {}", self.adapter.rank),
            format!("adapter.alpha = {}", self.adapter.alpha),
            format!("adapter.dropout = {}", self.adapter.dropout),
            format!("adapter.seed = {}", self.adapter.seed),
            format!("compose.l1 = {}", self.composition.l1),
            format!("compose.budget = {}", self.composition.budget),
            format!("compose.seed = {}", self.composition.seed),
            format!("generation.temperature = {}", self.generation.temperature),
            format!("generation.top_p = {}", self.generation.top_p),
            format!("generation.top_k = {}", self.generation.top_k),
            format!("generation.num_beams = {}", self.generation.num_beams),
            format!("generation.max_new_tokens = {}", self.generation.max_new_tokens),
            format!("ablation.basd = {}", self.ablation.basd_enabled),
            format!("ablation.dal = {}", self.ablation.dal_enabled),
            format!("ablation.sdf = {}", self.ablation.sdf_enabled),
            format!("ablation.tcf = {}", self.ablation.tcf_enabled),
            format!("eval.seeds = {seeds}"),
            format!("eval.n_way = {}", self.n_way),
            format!("eval.k_shot = {}", self.k_shot),
            format!("eval.query_shots = {}", self.query_shots),
            format!("eval.episodes = {}", self.episodes),
            format!("pretrain.epochs = {}", self.pretrain_epochs),
            format!("pretrain.lr = {}", self.pretrain_lr),
        ];
        let mut out = String::new();
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        out
    }

}

/// (key, value) pairs from config-file text. `#` starts a comment; blank
/// lines are skipped; everything else must be `key = value`.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected 'key = value'", n + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Builds a configuration from the three layers: defaults, then the file,
/// then explicit overrides (last wins).
pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(text) = file_text {
        for (k, v) in parse_lines(text)? {
            cfg.apply(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_values_are_pinned() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.span.learning_rate, 3e-4);
        assert_eq!(cfg.span.epochs, 5);
        assert_eq!(cfg.span.batch_size, 1);
        assert_eq!(cfg.span.cutoff, 256);
        assert_eq!(cfg.span.lambda, 0.001);
        assert_eq!(cfg.adapter.rank, 32);
        assert_eq!(cfg.adapter.alpha, 16.0);
        assert_eq!(cfg.adapter.dropout, 0.05);
        assert_eq!(cfg.generation.temperature, 0.0);
        assert_eq!(cfg.generation.top_p, 1.0);
        assert_eq!(cfg.generation.top_k, 65536);
        assert_eq!(cfg.generation.num_beams, 4);
        assert_eq!(cfg.generation.max_new_tokens, 128);
        assert_eq!(cfg.jobs, 1);
        assert_eq!(cfg.eval_seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn snapshot_parses_back_to_itself() {
        let mut cfg = RunConfig::default();
        cfg.apply("stage.span.lambda", "0.25").unwrap();
        cfg.apply("stage.span.layer", "3").unwrap();
        cfg.apply("stage.type.lr", "0.017").unwrap();
        cfg.apply("eval.seeds", "7, 9, 11").unwrap();
        cfg.apply("ablation.dal", "false").unwrap();
        cfg.apply("backbone.preset", "tiny").unwrap();
        cfg.apply("pretrain.lr", "0.004999999999999999").unwrap();
        let snap = cfg.snapshot();
        let back = resolve(Some(&snap), &[]).unwrap();
        assert_eq!(back.snapshot(), snap);
        assert_eq!(back.span.lambda, 0.25);
        assert_eq!(back.span.contrastive_layer, Some(3));
        assert_eq!(back.eval_seeds, vec![7, 9, 11]);
        assert!(!back.ablation.dal_enabled);
        // shortest-roundtrip decimal survives exactly
        assert_eq!(back.pretrain_lr, 0.004999999999999999);
    }

    #[test]
    fn precedence_is_defaults_then_file_then_flags() {
        let file = "stage.span.lr = 0.01\nstage.span.epochs = 9\n";
        let flags = vec![("stage.span.lr".to_string(), "0.5".to_string())];
        let cfg = resolve(Some(file), &flags).unwrap();
        assert_eq!(cfg.span.learning_rate, 0.5); // flag beats file
        assert_eq!(cfg.span.epochs, 9); // file beats default
        assert_eq!(cfg.span.cutoff, 256); // default untouched
    }

    #[test]
    fn unknown_and_malformed_keys_fail_fast() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("stage.span.lrr", "0.1").unwrap_err();
        assert!(err.to_string().contains("stage.span.lrr"));
        assert!(cfg.apply("stage.span.lr", "fast").is_err());
        assert!(cfg.apply("ablation.basd", "yes").is_err());
        assert!(cfg.apply("jobs", "0").is_err());
        assert!(parse_lines("stage.span.lr 0.1").is_err());
        // comments and blanks are fine
        let pairs = parse_lines("# header\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "3".to_string())]);
    }

    #[test]
    fn auto_layer_round_trips() {
        let cfg = RunConfig::default();
        assert!(cfg.snapshot().contains("stage.span.layer = auto"));
        let back = resolve(Some(&cfg.snapshot()), &[]).unwrap();
        assert_eq!(back.span.contrastive_layer, None);
    }
}
