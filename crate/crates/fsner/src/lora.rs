//! Low-rank adapter algebra: per-site factor pairs trained against a frozen
//! base model, weighted multi-adapter composition, and an L1-penalized
//! gradient-free weight search for picking composition weights.

use crate::backbone::checkpoint::{read_container, write_container, ADAPTER_MAGIC};
use crate::backbone::model::{normal, AdapterDelta, BackboneConfig, Proj};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Span,
    Type,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageTag::Span => write!(f, "span"),
            StageTag::Type => write!(f, "type"),
        }
    }
}

/// One adapted weight site: factors for `W + (alpha/rank)·A·B` at a given
/// layer/projection.
#[derive(Clone, Debug)]
pub struct SiteFactors {
    pub layer: usize,
    pub proj: Proj,
    /// d×r
    pub a: Matrix,
    /// r×k
    pub b: Matrix,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub stage: StageTag,
    pub domain: String,
    pub sites: Vec<SiteFactors>,
}

impl LoraAdapter {
    /// Fresh adapter on the query and value projections of every layer.
    /// B starts at zero, so the adapter is an exact no-op until trained.
    pub fn init(
        config: &BackboneConfig,
        rank: usize,
        alpha: f64,
        dropout: f64,
        stage: StageTag,
        domain: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let d = config.hidden_dim;
        if rank == 0 || rank > d {
            return Err(Error::Adapter(format!(
                "rank {rank} must be in 1..={d} for hidden dim {d}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Adapter(format!("dropout {dropout} must be in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = Vec::with_capacity(2 * config.n_layers);
        for layer in 0..config.n_layers {
            for proj in [Proj::Q, Proj::V] {
                sites.push(SiteFactors {
                    layer,
                    proj,
                    a: normal(&mut rng, d, rank, 0.02),
                    b: Matrix::zeros(rank, d),
                });
            }
        }
        Ok(Self {
            rank,
            alpha,
            dropout,
            stage,
            domain: domain.into(),
            sites,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Deltas in a shape the forward pass accepts; factor data is cloned.
    pub fn to_deltas(&self) -> Vec<AdapterDelta> {
        let scale = self.scale();
        self.sites
            .iter()
            .map(|s| AdapterDelta {
                layer: s.layer,
                proj: s.proj,
                a: s.a.clone(),
                b: s.b.clone(),
                scale,
            })
            .collect()
    }

    pub fn require_stage(&self, stage: StageTag) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Adapter(format!(
                "adapter '{}' is tagged for the {} stage, expected {}",
                self.domain, self.stage, stage
            )));
        }
        Ok(())
    }

    fn site_signature(&self) -> Vec<(usize, Proj, (usize, usize), (usize, usize))> {
        self.sites
            .iter()
            .map(|s| (s.layer, s.proj, s.a.shape(), s.b.shape()))
            .collect()
    }
}

/// One binding per site with slots 2j (A) and 2j+1 (B), drawing a fresh
/// inverted-dropout mask per site when the adapter uses dropout.
pub fn training_bindings(
    adapter: &LoraAdapter,
    seq_len: usize,
    hidden_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<crate::backbone::model::DeltaBinding> {
    (0..adapter.sites.len())
        .map(|j| crate::backbone::model::DeltaBinding {
            a_slot: Some(2 * j),
            b_slot: Some(2 * j + 1),
            dropout_mask: if adapter.dropout > 0.0 {
                let keep = 1.0 / (1.0 - adapter.dropout);
                let mut m = Matrix::zeros(seq_len, hidden_dim);
                for v in m.as_mut_slice() {
                    *v = if rng.gen::<f64>() < adapter.dropout {
                        0.0
                    } else {
                        keep
                    };
                }
                Some(m)
            } else {
                None
            },
        })
        .collect()
}

/// Applies one optimizer step over the adapter's factors laid out in the
/// `training_bindings` slot order.
pub fn adapter_step(
    adapter: &mut LoraAdapter,
    opt: &mut crate::optim::AdamW,
    grads: &[Option<Matrix>],
) {
    let mut params: Vec<(usize, &mut Matrix)> = Vec::with_capacity(2 * adapter.sites.len());
    for (j, site) in adapter.sites.iter_mut().enumerate() {
        params.push((2 * j, &mut site.a));
        params.push((2 * j + 1, &mut site.b));
    }
    opt.step(&mut params, grads);
}

/// `base_output + (alpha/rank)·(site_input·A)·B`. The optional mask is an
/// inverted-dropout matrix applied to the site input (training only; passing
/// `None` makes the call deterministic).
pub fn apply_site(
    site_input: &Matrix,
    base_output: &Matrix,
    site: &SiteFactors,
    scale: f64,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    if site_input.cols() != site.a.rows() || site.a.cols() != site.b.rows() {
        return Err(Error::Adapter(format!(
            "site input {:?} does not chain through factors {:?}·{:?}",
            site_input.shape(),
            site.a.shape(),
            site.b.shape()
        )));
    }
    if base_output.shape() != (site_input.rows(), site.b.cols()) {
        return Err(Error::Adapter(format!(
            "base output {:?} does not match correction shape {:?}",
            base_output.shape(),
            (site_input.rows(), site.b.cols())
        )));
    }
    let x = match mask {
        Some(m) => {
            if m.shape() != site_input.shape() {
                return Err(Error::Adapter(format!(
                    "dropout mask {:?} does not match site input {:?}",
                    m.shape(),
                    site_input.shape()
                )));
            }
            site_input.hadamard(m)
        }
        None => site_input.clone(),
    };
    Ok(base_output.add(&x.matmul(&site.a).matmul(&site.b).scale(scale)))
}

/// Weighted composition: per site, `Â = Σ wᵢAᵢ` and `B̂ = Σ wᵢBᵢ`, so the
/// composed correction is `(Σ wᵢAᵢ)(Σ wᵢBᵢ)` — the cross terms between
/// different adapters survive; this is not `Σ wᵢAᵢBᵢ`.
pub fn merge_adapters(adapters: &[LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    if adapters.is_empty() {
        return Err(Error::Adapter("nothing to compose".into()));
    }
    if adapters.len() != weights.len() {
        return Err(Error::Adapter(format!(
            "{} adapters but {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Adapter(format!("non-finite composition weight {w}")));
    }
    let first = &adapters[0];
    let signature = first.site_signature();
    for ad in &adapters[1..] {
        if ad.rank != first.rank || ad.stage != first.stage || ad.site_signature() != signature {
            return Err(Error::Adapter(format!(
                "adapter '{}' does not match '{}' in rank, stage, or site layout",
                ad.domain, first.domain
            )));
        }
    }
    let sites = (0..first.sites.len())
        .map(|si| {
            let mut a = Matrix::zeros(first.sites[si].a.rows(), first.sites[si].a.cols());
            let mut b = Matrix::zeros(first.sites[si].b.rows(), first.sites[si].b.cols());
            for (ad, &w) in adapters.iter().zip(weights) {
                a.add_assign(&ad.sites[si].a.scale(w));
                b.add_assign(&ad.sites[si].b.scale(w));
            }
            SiteFactors {
                layer: first.sites[si].layer,
                proj: first.sites[si].proj,
                a,
                b,
            }
        })
        .collect();
    let domains: Vec<&str> = adapters.iter().map(|a| a.domain.as_str()).collect();
    Ok(LoraAdapter {
        rank: first.rank,
        alpha: first.alpha,
        dropout: first.dropout,
        stage: first.stage,
        domain: domains.join("+"),
        sites,
    })
}

/// Weights are searched inside this box; it keeps the composed product
/// (quadratic in w) numerically tame.
pub const WEIGHT_BOUND: f64 = 1.5;

#[derive(Clone, Debug)]
pub struct CompositionConfig {
    /// L1 penalty coefficient on the weights.
    pub l1: f64,
    /// Total loss-function evaluation budget.
    pub budget: usize,
    pub seed: u64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            l1: 0.05,
            budget: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompositionResult {
    pub weights: Vec<f64>,
    /// Best penalized objective found: `loss(w) + l1·Σ|wᵢ|`.
    pub objective: f64,
    pub evaluations: usize,
}

/// Gradient-free search for composition weights: seeded coordinate descent
/// with halving steps and random restarts inside `[-WEIGHT_BOUND, WEIGHT_BOUND]^m`.
/// Deterministic for a fixed seed. The returned objective is never worse than
/// the objective at the uniform initialization; with budget 1 the
/// initialization is returned unchanged.
pub fn optimize_weights(
    m: usize,
    mut loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    cfg: &CompositionConfig,
) -> Result<CompositionResult> {
    if m == 0 {
        return Err(Error::Adapter("no adapters to weight".into()));
    }
    if cfg.budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    if !cfg.l1.is_finite() || cfg.l1 < 0.0 {
        return Err(Error::Config(format!("l1 coefficient {} must be finite and >= 0", cfg.l1)));
    }
    let mut evals = 0usize;
    let mut eval = |w: &[f64], evals: &mut usize| -> Result<f64> {
        let loss = loss_fn(w)?;
        *evals += 1;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "composition loss returned {loss} at weights {w:?}"
            )));
        }
        Ok(loss + cfg.l1 * w.iter().map(|x| x.abs()).sum::<f64>())
    };

    let init = vec![1.0 / m as f64; m];
    let mut best_w = init.clone();
    let mut best_obj = eval(&init, &mut evals)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    const MIN_STEP: f64 = 1e-3;
    let mut first_restart = true;
    'outer: while evals < cfg.budget {
        let (mut cur_w, mut cur_obj) = if first_restart {
            first_restart = false;
            (best_w.clone(), best_obj)
        } else {
            let w: Vec<f64> = (0..m)
                .map(|_| rng.gen_range(-WEIGHT_BOUND..=WEIGHT_BOUND))
                .collect();
            let obj = eval(&w, &mut evals)?;
            (w, obj)
        };
        let mut step = 0.5;
        while step >= MIN_STEP {
            let mut improved = false;
            for i in 0..m {
                for dir in [1.0, -1.0] {
                    if evals >= cfg.budget {
                        if cur_obj < best_obj {
                            best_w = cur_w.clone();
                            best_obj = cur_obj;
                        }
                        break 'outer;
                    }
                    let mut cand = cur_w.clone();
                    cand[i] = (cand[i] + dir * step).clamp(-WEIGHT_BOUND, WEIGHT_BOUND);
                    if cand[i] == cur_w[i] {
                        continue;
                    }
                    let obj = eval(&cand, &mut evals)?;
                    if obj < cur_obj {
                        cur_w = cand;
                        cur_obj = obj;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if cur_obj < best_obj {
            best_w = cur_w;
            best_obj = cur_obj;
        }
    }
    Ok(CompositionResult {
        weights: best_w,
        objective: best_obj,
        evaluations: evals,
    })
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    rank: usize,
    alpha: f64,
    dropout: f64,
    stage: StageTag,
    domain: String,
    sites: Vec<(usize, Proj)>,
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter) -> Result<()> {
    let header = serde_json::to_value(AdapterHeader {
        rank: adapter.rank,
        alpha: adapter.alpha,
        dropout: adapter.dropout,
        stage: adapter.stage,
        domain: adapter.domain.clone(),
        sites: adapter.sites.iter().map(|s| (s.layer, s.proj)).collect(),
    })?;
    let mut names = Vec::with_capacity(2 * adapter.sites.len());
    for i in 0..adapter.sites.len() {
        names.push((format!("site{i}.a"), format!("site{i}.b")));
    }
    let arrays: Vec<(&str, &Matrix)> = adapter
        .sites
        .iter()
        .zip(&names)
        .flat_map(|(s, (na, nb))| [(na.as_str(), &s.a), (nb.as_str(), &s.b)])
        .collect();
    write_container(path, ADAPTER_MAGIC, &header, &arrays)
}

/// Loads an adapter, optionally enforcing the pipeline stage it belongs to.
pub fn load_adapter(path: &Path, expect_stage: Option<StageTag>) -> Result<LoraAdapter> {
    let (meta, arrays) = read_container(path, ADAPTER_MAGIC)?;
    let header: AdapterHeader = serde_json::from_value(meta)?;
    if arrays.len() != 2 * header.sites.len() {
        return Err(Error::Checkpoint(format!(
            "{} arrays for {} sites; expected two per site",
            arrays.len(),
            header.sites.len()
        )));
    }
    let mut sites = Vec::with_capacity(header.sites.len());
    for (i, &(layer, proj)) in header.sites.iter().enumerate() {
        let (am, a) = &arrays[2 * i];
        let (bm, b) = &arrays[2 * i + 1];
        if am.name != format!("site{i}.a") || bm.name != format!("site{i}.b") {
            return Err(Error::Checkpoint(format!(
                "array order mismatch at site {i}: found '{}', '{}'",
                am.name, bm.name
            )));
        }
        if a.cols() != header.rank || b.rows() != header.rank {
            return Err(Error::Checkpoint(format!(
                "site {i} factors {:?}·{:?} do not match rank {}",
                a.shape(),
                b.shape(),
                header.rank
            )));
        }
        sites.push(SiteFactors {
            layer,
            proj,
            a: a.clone(),
            b: b.clone(),
        });
    }
    let adapter = LoraAdapter {
        rank: header.rank,
        alpha: header.alpha,
        dropout: header.dropout,
        stage: header.stage,
        domain: header.domain,
        sites,
    };
    if let Some(stage) = expect_stage {
        adapter.require_stage(stage)?;
    }
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::model::Backbone;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig::tiny(16)
    }

    fn random_adapter(seed: u64, domain: &str) -> LoraAdapter {
        let mut ad = LoraAdapter::init(&tiny_config(), 4, 16.0, 0.0, StageTag::Span, domain, seed)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
        for s in &mut ad.sites {
            s.b = normal(&mut rng, s.b.rows(), s.b.cols(), 0.05);
        }
        ad
    }

    #[test]
    fn zero_b_is_exact_identity() {
        let ad = LoraAdapter::init(&tiny_config(), 4, 16.0, 0.05, StageTag::Span, "d0", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal(&mut rng, 5, 16, 1.0);
        let base = normal(&mut rng, 5, 16, 1.0);
        let out = apply_site(&x, &base, &ad.sites[0], ad.scale(), None).unwrap();
        assert_eq!(out.as_slice(), base.as_slice());
    }

    #[test]
    fn full_rank_correction_matches_dense_oracle() {
        // rank = hidden dim lets A·B represent an arbitrary dense correction
        let d = 16;
        let mut ad =
            LoraAdapter::init(&tiny_config(), d, 16.0, 0.0, StageTag::Span, "dense", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta = normal(&mut rng, d, d, 0.3);
        let site = &mut ad.sites[0];
        site.a = Matrix::identity(d);
        site.b = delta.clone();
        let x = normal(&mut rng, 6, d, 1.0);
        let base = normal(&mut rng, 6, d, 1.0);
        let got = apply_site(&x, &base, &ad.sites[0], ad.scale(), None).unwrap();
        let want = base.add(&x.matmul(&delta).scale(16.0 / d as f64));
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_is_deterministic_without_mask() {
        let ad = random_adapter(5, "det");
        let bb = Backbone::new(tiny_config(), 6).unwrap();
        let ids = vec![2, 9, 4, 11];
        let a = bb.forward_hidden(&ids, &ad.to_deltas()).unwrap();
        let b = bb.forward_hidden(&ids, &ad.to_deltas()).unwrap();
        assert_eq!(a.log_probs.as_slice(), b.log_probs.as_slice());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let ad = random_adapter(7, "bad");
        let x = Matrix::zeros(3, 8); // wrong input width
        let base = Matrix::zeros(3, 16);
        assert!(apply_site(&x, &base, &ad.sites[0], 1.0, None).is_err());
        let mask = Matrix::zeros(2, 16); // wrong mask shape
        let x = Matrix::zeros(3, 16);
        assert!(apply_site(&x, &base, &ad.sites[0], 1.0, Some(&mask)).is_err());
    }

    #[test]
    fn one_hot_composition_equals_single_adapter() {
        let ads = [random_adapter(10, "a"), random_adapter(11, "b")];
        let merged = merge_adapters(&ads, &[1.0, 0.0]).unwrap();
        let bb = Backbone::new(tiny_config(), 12).unwrap();
        let ids = vec![2, 5, 13, 3, 8];
        let alone = bb.forward_hidden(&ids, &ads[0].to_deltas()).unwrap();
        let composed = bb.forward_hidden(&ids, &merged.to_deltas()).unwrap();
        for (x, y) in alone
            .log_probs
            .as_slice()
            .iter()
            .zip(composed.log_probs.as_slice())
        {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_pair_exhibits_cross_terms() {
        // two copies with weights (w, w): Â·B̂ = (2wA)(2wB) = 4w²·A·B
        let ad = random_adapter(13, "twin");
        let w = 0.7;
        let merged = merge_adapters(&[ad.clone(), ad.clone()], &[w, w]).unwrap();
        for (ms, s) in merged.sites.iter().zip(&ad.sites) {
            let got = ms.a.matmul(&ms.b);
            let want = s.a.matmul(&s.b).scale(4.0 * w * w);
            for (g, x) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((g - x).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_weights_compose_to_noop() {
        let ads = [random_adapter(14, "a"), random_adapter(15, "b")];
        let merged = merge_adapters(&ads, &[0.0, 0.0]).unwrap();
        let bb = Backbone::new(tiny_config(), 16).unwrap();
        let ids = vec![2, 4, 6];
        let plain = bb.forward_hidden(&ids, &[]).unwrap();
        let composed = bb.forward_hidden(&ids, &merged.to_deltas()).unwrap();
        assert_eq!(plain.log_probs.as_slice(), composed.log_probs.as_slice());
    }

    #[test]
    fn composition_input_validation() {
        let a = random_adapter(17, "a");
        assert!(merge_adapters(&[], &[]).is_err());
        assert!(merge_adapters(std::slice::from_ref(&a), &[1.0, 2.0]).is_err());
        assert!(merge_adapters(&[a.clone()], &[f64::NAN]).is_err());
        let mut b = random_adapter(18, "b");
        b.rank = 2;
        b.sites
            .iter_mut()
            .for_each(|s| s.a = Matrix::zeros(16, 2));
        b.sites
            .iter_mut()
            .for_each(|s| s.b = Matrix::zeros(2, 16));
        assert!(merge_adapters(&[a.clone(), b], &[0.5, 0.5]).is_err());
        let mut c = random_adapter(19, "c");
        c.stage = StageTag::Type;
        assert!(merge_adapters(&[a, c], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weight_search_finds_quadratic_optimum() {
        // quadratic pins w₁ near 0.5; the absolute-value terms on the other
        // coordinates pull them to zero
        let res = optimize_weights(
            3,
            |w| Ok((w[0] - 0.5).powi(2) + w[1].abs() + w[2].abs()),
            &CompositionConfig {
                l1: 0.0,
                budget: 500,
                seed: 1,
            },
        )
        .unwrap();
        assert!((res.weights[0] - 0.5).abs() < 1e-2, "w = {:?}", res.weights);
        assert!(res.weights[1].abs() < 1e-2 && res.weights[2].abs() < 1e-2);
        assert!(res.evaluations <= 500);
    }

    #[test]
    fn dominant_penalty_drives_weights_to_zero() {
        let res = optimize_weights(
            4,
            |_| Ok(0.0),
            &CompositionConfig {
                l1: 100.0,
                budget: 400,
                seed: 2,
            },
        )
        .unwrap();
        for w in &res.weights {
            assert!(w.abs() < 1e-2, "w = {:?}", res.weights);
        }
    }

    #[test]
    fn budget_one_returns_initialization() {
        let res = optimize_weights(
            4,
            |w| Ok(w.iter().sum()),
            &CompositionConfig {
                l1: 0.05,
                budget: 1,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(res.weights, vec![0.25; 4]);
        assert_eq!(res.evaluations, 1);
    }

    #[test]
    fn nan_loss_aborts_with_weights_reported() {
        let err = optimize_weights(
            2,
            |_| Ok(f64::NAN),
            &CompositionConfig::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("NaN") && msg.contains("0.5"), "got: {msg}");
    }

    #[test]
    fn search_is_deterministic_per_seed() {
        let landscape = |w: &[f64]| Ok(w.iter().map(|x| (x - 0.3).powi(2)).sum::<f64>());
        let cfg = CompositionConfig {
            l1: 0.01,
            budget: 150,
            seed: 9,
        };
        let a = optimize_weights(3, landscape, &cfg).unwrap();
        let b = optimize_weights(3, landscape, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn adapter_roundtrip_is_bit_exact() {
        let ad = random_adapter(21, "news");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        save_adapter(&path, &ad).unwrap();
        let back = load_adapter(&path, Some(StageTag::Span)).unwrap();
        assert_eq!(back.rank, ad.rank);
        assert_eq!(back.alpha, ad.alpha);
        assert_eq!(back.dropout, ad.dropout);
        assert_eq!(back.stage, ad.stage);
        assert_eq!(back.domain, ad.domain);
        for (x, y) in back.sites.iter().zip(&ad.sites) {
            assert_eq!(x.layer, y.layer);
            assert_eq!(x.proj, y.proj);
            assert_eq!(x.a.as_slice(), y.a.as_slice());
            assert_eq!(x.b.as_slice(), y.b.as_slice());
        }
    }

    #[test]
    fn wrong_stage_tag_is_rejected_on_load() {
        let ad = random_adapter(22, "wire");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        save_adapter(&path, &ad).unwrap();
        let err = load_adapter(&path, Some(StageTag::Type)).unwrap_err();
        assert!(err.to_string().contains("span"));
    }

    #[test]
    fn corrupted_adapter_file_is_detected() {
        let ad = random_adapter(23, "bits");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        save_adapter(&path, &ad).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.len() / 3;
        bytes[at] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_adapter(&path, None).is_err());
    }

    #[test]
    fn init_validation() {
        let cfg = tiny_config();
        assert!(LoraAdapter::init(&cfg, 0, 16.0, 0.0, StageTag::Span, "x", 0).is_err());
        assert!(LoraAdapter::init(&cfg, 17, 16.0, 0.0, StageTag::Span, "x", 0).is_err());
        assert!(LoraAdapter::init(&cfg, 4, 16.0, 1.0, StageTag::Span, "x", 0).is_err());
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-1.0f64..1.0, rows * cols)
                .prop_map(move |v| Matrix::from_vec(rows, cols, v))
        }

        fn adapter_pair() -> impl Strategy<Value = (LoraAdapter, LoraAdapter, f64, f64)> {
            (
                small_matrix(6, 2),
                small_matrix(2, 6),
                small_matrix(6, 2),
                small_matrix(2, 6),
                -1.5f64..1.5,
                -1.5f64..1.5,
            )
                .prop_map(|(a1, b1, a2, b2, w1, w2)| {
                    let mk = |a: Matrix, b: Matrix, name: &str| LoraAdapter {
                        rank: 2,
                        alpha: 16.0,
                        dropout: 0.0,
                        stage: StageTag::Span,
                        domain: name.into(),
                        sites: vec![SiteFactors {
                            layer: 0,
                            proj: Proj::Q,
                            a,
                            b,
                        }],
                    };
                    (mk(a1, b1, "p"), mk(a2, b2, "q"), w1, w2)
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(250))]

            // merged factors are the weighted sums of the input factors
            #[test]
            fn merge_factors_are_weighted_sums((ad1, ad2, w1, w2) in adapter_pair()) {
                let merged = merge_adapters(&[ad1.clone(), ad2.clone()], &[w1, w2]).unwrap();
                let a_want = ad1.sites[0].a.scale(w1).add(&ad2.sites[0].a.scale(w2));
                let b_want = ad1.sites[0].b.scale(w1).add(&ad2.sites[0].b.scale(w2));
                for (g, w) in merged.sites[0].a.as_slice().iter().zip(a_want.as_slice()) {
                    prop_assert!((g - w).abs() < 1e-12);
                }
                for (g, w) in merged.sites[0].b.as_slice().iter().zip(b_want.as_slice()) {
                    prop_assert!((g - w).abs() < 1e-12);
                }
            }

            // zero B is an exact identity correction for any A and input
            #[test]
            fn zero_b_identity_for_any_a(
                a in small_matrix(6, 2),
                x in small_matrix(3, 6),
                base in small_matrix(3, 6),
            ) {
                let site = SiteFactors { layer: 0, proj: Proj::V, a, b: Matrix::zeros(2, 6) };
                let out = apply_site(&x, &base, &site, 8.0, None).unwrap();
                prop_assert_eq!(out.as_slice(), base.as_slice());
            }

            // the search never ends worse than its starting objective
            #[test]
            fn weight_search_is_monotone(
                seed in 0u64..50,
                c in proptest::collection::vec(-1.0f64..1.0, 3),
                l1 in 0.0f64..0.5,
            ) {
                let loss = |w: &[f64]| {
                    Ok(w.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                };
                let init = vec![1.0 / 3.0; 3];
                let init_obj = loss(&init).unwrap()
                    + l1 * init.iter().map(|x| x.abs()).sum::<f64>();
                let res = optimize_weights(3, loss, &CompositionConfig { l1, budget: 120, seed }).unwrap();
                prop_assert!(res.objective <= init_obj + 1e-12);
            }

            // composing one adapter with weight 1 changes nothing
            #[test]
            fn singleton_weight_one_is_output_equivalent((ad1, _, _, _) in adapter_pair()) {
                let merged = merge_adapters(std::slice::from_ref(&ad1), &[1.0]).unwrap();
                let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.9, 0.0, -1.1, 0.5]]);
                let base = Matrix::zeros(1, 6);
                let direct = apply_site(&x, &base, &ad1.sites[0], ad1.scale(), None).unwrap();
                let via = apply_site(&x, &base, &merged.sites[0], merged.scale(), None).unwrap();
                for (g, w) in via.as_slice().iter().zip(direct.as_slice()) {
                    prop_assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }
}
