//! Episode and support-set sampling. All sampling is deterministic for a
//! fixed seed (ChaCha8 stream) and keeps support/query sentence sets
//! disjoint at the sentence level.

use super::{class_counts, restrict_to_classes, LabeledSentence, TypeCatalog};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<LabeledSentence>,
    pub query: Vec<LabeledSentence>,
    /// Episode class set as ids into the full catalog, in sampled order.
    pub classes: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_classes: usize,
    pub query_shots: usize,
    pub seed: u64,
}

fn corpus_counts(
    corpus: &[LabeledSentence],
    catalog: &TypeCatalog,
) -> Result<Vec<HashMap<usize, usize>>> {
    corpus.iter().map(|s| class_counts(s, catalog)).collect()
}

/// Greedy fill: walk `order`, taking any sentence that still contributes to a
/// deficient class; stops once every class in `need` reaches zero. Returns
/// indices taken. Counts may overshoot (one sentence can hold several
/// instances); that is accepted and recorded via the sentences themselves.
fn greedy_fill(
    order: &[usize],
    taken: &mut Vec<bool>,
    counts: &[HashMap<usize, usize>],
    need: &mut HashMap<usize, isize>,
) -> Vec<usize> {
    let mut picked = Vec::new();
    for &idx in order {
        if taken[idx] {
            continue;
        }
        if need.values().all(|&n| n <= 0) {
            break;
        }
        let contributes = counts[idx]
            .iter()
            .any(|(cls, &c)| c > 0 && need.get(cls).is_some_and(|&n| n > 0));
        if !contributes {
            continue;
        }
        taken[idx] = true;
        picked.push(idx);
        for (cls, &c) in &counts[idx] {
            if let Some(n) = need.get_mut(cls) {
                *n -= c as isize;
            }
        }
    }
    picked
}

fn deficient_class(need: &HashMap<usize, isize>, catalog: &TypeCatalog) -> Option<String> {
    let mut deficient: Vec<usize> = need
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&cls, _)| cls)
        .collect();
    deficient.sort_unstable();
    deficient
        .first()
        .map(|&cls| catalog.raw_label(cls).to_string())
}

/// Samples an N-way K-shot episode: N classes, ≥K support and ≥K′ query
/// instances per class, support and query sentence sets disjoint. Entities
/// of classes outside the episode set are relabeled as non-entities.
pub fn sample_episode(
    corpus: &[LabeledSentence],
    catalog: &TypeCatalog,
    n_way: usize,
    k_shot: usize,
    query_shots: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || query_shots == 0 {
        return Err(Error::Validation(
            "sampling: n_way, k_shot, query_shots must all be ≥ 1".into(),
        ));
    }
    let counts = corpus_counts(corpus, catalog)?;
    let mut totals: HashMap<usize, usize> = HashMap::new();
    for c in &counts {
        for (cls, n) in c {
            *totals.entry(*cls).or_insert(0) += n;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_pool: Vec<usize> = {
        let mut v: Vec<usize> = totals.keys().copied().collect();
        v.sort_unstable();
        v
    };
    class_pool.shuffle(&mut rng);
    if class_pool.len() < n_way {
        return Err(Error::Validation(format!(
            "sampling: corpus has {} classes with entities, need {n_way}",
            class_pool.len()
        )));
    }
    let classes: Vec<usize> = class_pool.into_iter().take(n_way).collect();
    for &cls in &classes {
        let have = totals.get(&cls).copied().unwrap_or(0);
        if have < k_shot + query_shots {
            return Err(Error::Validation(format!(
                "sampling: class '{}' has {have} instances, need {}",
                catalog.raw_label(cls),
                k_shot + query_shots
            )));
        }
    }

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut taken = vec![false; corpus.len()];

    let mut need: HashMap<usize, isize> =
        classes.iter().map(|&c| (c, k_shot as isize)).collect();
    let support_idx = greedy_fill(&order, &mut taken, &counts, &mut need);
    if let Some(cls) = deficient_class(&need, catalog) {
        return Err(Error::Validation(format!(
            "sampling: support exhausted corpus before class '{cls}' reached {k_shot}"
        )));
    }

    let mut need: HashMap<usize, isize> =
        classes.iter().map(|&c| (c, query_shots as isize)).collect();
    let query_idx = greedy_fill(&order, &mut taken, &counts, &mut need);
    if let Some(cls) = deficient_class(&need, catalog) {
        return Err(Error::Validation(format!(
            "sampling: query exhausted corpus before class '{cls}' reached {query_shots}"
        )));
    }

    let relabel = |idx: &[usize]| -> Result<Vec<LabeledSentence>> {
        idx.iter()
            .map(|&i| restrict_to_classes(&corpus[i], catalog, &classes))
            .collect()
    };
    Ok(Episode {
        support: relabel(&support_idx)?,
        query: relabel(&query_idx)?,
        classes,
        n_way,
        k_shot,
        query_classes: n_way,
        query_shots,
        seed,
    })
}

/// Greedy minimal support set over a full label catalog: repeatedly take the
/// sentence with the largest marginal contribution to still-deficient labels
/// (ties broken by seeded order) until every label has ≥ K instances.
pub fn sample_support_set(
    test_corpus: &[LabeledSentence],
    catalog: &TypeCatalog,
    k_shot: usize,
    seed: u64,
) -> Result<Vec<LabeledSentence>> {
    if k_shot == 0 {
        return Err(Error::Validation("sampling: k_shot must be ≥ 1".into()));
    }
    let counts = corpus_counts(test_corpus, catalog)?;
    for cls in catalog.ids() {
        let have: usize = counts.iter().map(|c| c.get(&cls).copied().unwrap_or(0)).sum();
        if have < k_shot {
            return Err(Error::Validation(format!(
                "sampling: label '{}' has {have} instances, need {k_shot}",
                catalog.raw_label(cls)
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..test_corpus.len()).collect();
    order.shuffle(&mut rng);

    let mut need: HashMap<usize, isize> =
        catalog.ids().map(|c| (c, k_shot as isize)).collect();
    let mut taken = vec![false; test_corpus.len()];
    let mut picked = Vec::new();
    while need.values().any(|&n| n > 0) {
        let mut best: Option<(usize, usize)> = None; // (gain, idx)
        for &idx in &order {
            if taken[idx] {
                continue;
            }
            let gain: usize = counts[idx]
                .iter()
                .map(|(cls, &c)| {
                    let n = need.get(cls).copied().unwrap_or(0).max(0) as usize;
                    n.min(c)
                })
                .sum();
            if gain > 0 && best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, idx));
            }
        }
        let (_, idx) = best.ok_or_else(|| {
            Error::Validation("sampling: no sentence covers the remaining deficit".into())
        })?;
        taken[idx] = true;
        picked.push(idx);
        for (cls, &c) in &counts[idx] {
            if let Some(n) = need.get_mut(cls) {
                *n -= c as isize;
            }
        }
    }
    Ok(picked.into_iter().map(|i| test_corpus[i].clone()).collect())
}

/// One JSON record per line.
pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut file, ep)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut episodes = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        episodes.push(serde_json::from_str(&line)?);
    }
    Ok(episodes)
}
