//! Corpus handling: column-format loading, tag/span conversion, label
//! catalogs, episode and support-set sampling, synthetic corpus generation.

pub mod sampling;
pub mod synth;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub use sampling::{sample_episode, sample_support_set, Episode};
pub use synth::{generate_synthetic_corpus, synthetic_catalog, SynthSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub source_id: String,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>, source_id: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("sentence has no tokens".into()));
        }
        if tokens.len() != tags.len() {
            return Err(Error::Validation(format!(
                "token/tag length mismatch: {} vs {}",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Self {
            tokens,
            tags,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Half-open token span `[begin, end)` carrying a class handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub begin: usize,
    pub end: usize,
    pub type_id: usize,
}

impl EntitySpan {
    pub fn new(begin: usize, end: usize, type_id: usize) -> Self {
        assert!(begin < end, "span must be non-empty");
        Self { begin, end, type_id }
    }

    pub fn surface(&self, sentence: &LabeledSentence) -> String {
        sentence.tokens[self.begin..self.end].join(" ")
    }
}

/// Ordered raw-label → natural-language-name table; `type_id` is the entry
/// index, so lookups are bijective in both directions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeCatalog {
    entries: Vec<(String, String)>,
    non_entity_label: String,
}

impl TypeCatalog {
    pub fn new(entries: Vec<(String, String)>, non_entity_label: impl Into<String>) -> Result<Self> {
        let non_entity_label = non_entity_label.into();
        let mut raws = std::collections::HashSet::new();
        let mut names = std::collections::HashSet::new();
        for (raw, name) in &entries {
            if !raws.insert(raw.clone()) {
                return Err(Error::Corpus(format!("duplicate raw label '{raw}'")));
            }
            if !names.insert(name.clone()) {
                return Err(Error::Corpus(format!("duplicate type name '{name}'")));
            }
            if *raw == non_entity_label {
                return Err(Error::Corpus(format!(
                    "raw label '{raw}' collides with the non-entity marker"
                )));
            }
        }
        Ok(Self {
            entries,
            non_entity_label,
        })
    }

    /// CoNLL-style default: PER/LOC/ORG/MISC with outside marker `O`.
    pub fn conll() -> Self {
        Self::new(
            vec![
                ("PER".into(), "person".into()),
                ("LOC".into(), "location".into()),
                ("ORG".into(), "organization".into()),
                ("MISC".into(), "miscellaneous".into()),
            ],
            "O",
        )
        .expect("static catalog is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn non_entity_label(&self) -> &str {
        &self.non_entity_label
    }

    pub fn raw_label(&self, type_id: usize) -> &str {
        &self.entries[type_id].0
    }

    pub fn type_name(&self, type_id: usize) -> &str {
        &self.entries[type_id].1
    }

    pub fn id_of_raw(&self, raw: &str) -> Option<usize> {
        self.entries.iter().position(|(r, _)| r == raw)
    }

    pub fn id_of_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(_, n)| n == name)
    }

    pub fn type_names(&self) -> Vec<&str> {
        self.entries.iter().map(|(_, n)| n.as_str()).collect()
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.entries.len()
    }

    /// Restricted view keeping only `keep` (episode class subsets); ids in the
    /// result are re-numbered to the new entry order.
    pub fn subset(&self, keep: &[usize]) -> TypeCatalog {
        let entries = keep
            .iter()
            .map(|&id| self.entries[id].clone())
            .collect();
        TypeCatalog {
            entries,
            non_entity_label: self.non_entity_label.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagScheme {
    Bio,
    Io,
}

/// Splits a tag into (prefix, raw label). `O` and scheme violations are the
/// caller's concern.
fn split_tag(tag: &str) -> Option<(char, &str)> {
    let rest = tag.strip_prefix("B-").map(|r| ('B', r));
    rest.or_else(|| tag.strip_prefix("I-").map(|r| ('I', r)))
}

/// Maximal contiguous same-type runs become spans; under BIO a `B-` tag
/// always starts a new span. `lenient` repairs a dangling `I-` to `B-`.
pub fn spans_from_tags(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
    scheme: TagScheme,
    lenient: bool,
) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None; // (begin, type_id)
    for (i, tag) in sentence.tags.iter().enumerate() {
        if tag == catalog.non_entity_label() {
            if let Some((b, t)) = open.take() {
                spans.push(EntitySpan::new(b, i, t));
            }
            continue;
        }
        let (prefix, raw) = split_tag(tag).ok_or_else(|| {
            Error::Validation(format!("tag '{tag}' is neither outside nor B-/I- prefixed"))
        })?;
        let type_id = catalog
            .id_of_raw(raw)
            .ok_or_else(|| Error::Corpus(format!("unknown label '{raw}' in tag '{tag}'")))?;
        let continues = matches!(open, Some((_, t)) if t == type_id)
            && (prefix == 'I' || scheme == TagScheme::Io);
        let starts = match scheme {
            // B- always starts; I- continues a same-type run else starts
            // (lenient) or errors (strict).
            TagScheme::Bio => {
                if prefix == 'B' {
                    true
                } else if continues {
                    false
                } else if lenient {
                    true
                } else {
                    return Err(Error::Validation(format!(
                        "dangling I- tag '{tag}' at token {i} without a preceding same-type span"
                    )));
                }
            }
            TagScheme::Io => !continues,
        };
        if starts {
            if let Some((b, t)) = open.take() {
                spans.push(EntitySpan::new(b, i, t));
            }
            open = Some((i, type_id));
        }
    }
    if let Some((b, t)) = open {
        spans.push(EntitySpan::new(b, sentence.len(), t));
    }
    Ok(spans)
}

/// Exact inverse of [`spans_from_tags`] for the same scheme.
pub fn tags_from_spans(
    length: usize,
    spans: &[EntitySpan],
    catalog: &TypeCatalog,
    scheme: TagScheme,
) -> Result<Vec<String>> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.begin);
    let mut tags = vec![catalog.non_entity_label().to_string(); length];
    let mut last_end = 0usize;
    for (k, span) in sorted.iter().enumerate() {
        if span.end > length {
            return Err(Error::Validation(format!(
                "span ({},{}) exceeds sentence length {length}",
                span.begin, span.end
            )));
        }
        if k > 0 && span.begin < last_end {
            return Err(Error::Validation(format!(
                "overlapping spans at token {}",
                span.begin
            )));
        }
        last_end = span.end;
        let raw = catalog.raw_label(span.type_id);
        for i in span.begin..span.end {
            let prefix = match scheme {
                TagScheme::Bio if i == span.begin => "B-",
                _ => "I-",
            };
            tags[i] = format!("{prefix}{raw}");
        }
    }
    Ok(tags)
}

/// Rewrites tags so entities outside `keep` become non-entities. Used when an
/// episode narrows the class set.
pub fn restrict_to_classes(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
    keep: &[usize],
) -> Result<LabeledSentence> {
    let spans = spans_from_tags(sentence, catalog, TagScheme::Bio, true)?;
    let kept: Vec<EntitySpan> = spans
        .into_iter()
        .filter(|s| keep.contains(&s.type_id))
        .collect();
    let tags = tags_from_spans(sentence.len(), &kept, catalog, TagScheme::Bio)?;
    LabeledSentence::new(sentence.tokens.clone(), tags, sentence.source_id.clone())
}

/// Per-class entity instance counts for one sentence.
pub fn class_counts(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
) -> Result<HashMap<usize, usize>> {
    let mut counts = HashMap::new();
    for span in spans_from_tags(sentence, catalog, TagScheme::Bio, true)? {
        *counts.entry(span.type_id).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Reads a `token<TAB>tag` column file; blank lines separate sentences.
pub fn load_column_corpus(path: &Path, catalog: &TypeCatalog) -> Result<Vec<LabeledSentence>> {
    let raw = std::fs::read_to_string(path)?;
    parse_column_corpus(&raw, catalog, &path.display().to_string())
}

pub fn parse_column_corpus(
    raw: &str,
    catalog: &TypeCatalog,
    source: &str,
) -> Result<Vec<LabeledSentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| -> Result<()> {
        if !tokens.is_empty() {
            let n = sentences.len();
            sentences.push(LabeledSentence::new(
                std::mem::take(tokens),
                std::mem::take(tags),
                format!("{source}:{n}"),
            )?);
        }
        Ok(())
    };
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        let (token, tag) = line.split_once('\t').ok_or_else(|| {
            Error::Corpus(format!(
                "line {}: expected 'token<TAB>tag', got '{line}'",
                lineno + 1
            ))
        })?;
        if tag != catalog.non_entity_label() {
            let raw_label = split_tag(tag)
                .map(|(_, r)| r)
                .ok_or_else(|| Error::Corpus(format!("line {}: malformed tag '{tag}'", lineno + 1)))?;
            if catalog.id_of_raw(raw_label).is_none() {
                return Err(Error::Corpus(format!(
                    "line {}: tag '{tag}' names unknown label '{raw_label}'",
                    lineno + 1
                )));
            }
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags)?;
    Ok(sentences)
}

/// Writes the inverse of [`load_column_corpus`].
pub fn write_column_corpus(path: &Path, sentences: &[LabeledSentence]) -> Result<()> {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
