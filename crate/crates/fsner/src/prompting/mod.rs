//! Prompt rendering with exact token-index bookkeeping.
//!
//! Rendering produces the full training sequence (instruction prefix +
//! gold completion), a prompt mask marking the prefix, and index maps that
//! locate every entity span and every schema type-name mention inside the
//! token sequence. Those indices feed the boundary-contrastive loss and the
//! prototype builder, so they are checked — misalignment is an error, never
//! a silent shift.

pub mod format;

use crate::backbone::tokenizer::{Tokenizer, ITEM_CLOSE, ITEM_OPEN};
use crate::corpus::{spans_from_tags, LabeledSentence, TagScheme, TypeCatalog};
use crate::error::{Error, Result};
pub use format::{parse_generation, serialize_output, split_typed_item, typed_item, StructuredOutput};

/// Template text with `{schema}`, `{sentence}`, `{candidates}`, `{answer}`
/// placeholders. `{sentence}` and `{answer}` are required and `{answer}`
/// must be final; instruction wording is data, not code.
#[derive(Clone, Debug)]
pub struct Template {
    segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Schema,
    Sentence,
    Candidates,
    Answer,
}

pub const SPAN_TEMPLATE: &str = "<s> Below is a sentence paired with an entity schema. List every entity span exactly as it appears in the sentence. Types: {schema} Sentence: {sentence} Answer: {answer}";

pub const TYPE_TEMPLATE: &str = "<s> Below is a sentence, an entity schema, and candidate mentions. Assign one type from the schema to each candidate. Types: {schema} Sentence: {sentence} Candidates: {candidates} Answer: {answer}";

impl Template {
    pub fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Config("unclosed placeholder in template".into()))?
                + open;
            let name = &rest[open + 1..close];
            segments.push(match name {
                "schema" => Segment::Schema,
                "sentence" => Segment::Sentence,
                "candidates" => Segment::Candidates,
                "answer" => Segment::Answer,
                other => {
                    return Err(Error::Config(format!("unknown placeholder '{{{other}}}'")))
                }
            });
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        let count = |s: &Segment| segments.iter().filter(|x| *x == s).count();
        if count(&Segment::Sentence) != 1 || count(&Segment::Answer) != 1 {
            return Err(Error::Config(
                "template needs exactly one {sentence} and one {answer}".into(),
            ));
        }
        match segments.iter().rposition(|s| *s == Segment::Answer) {
            Some(at)
                if segments[at + 1..]
                    .iter()
                    .all(|s| matches!(s, Segment::Literal(t) if t.trim().is_empty())) => {}
            _ => {
                return Err(Error::Config(
                    "{answer} must be the final template content".into(),
                ))
            }
        }
        Ok(Self { segments })
    }

    pub fn span_default() -> Self {
        Self::parse(SPAN_TEMPLATE).expect("built-in template is valid")
    }

    pub fn type_default() -> Self {
        Self::parse(TYPE_TEMPLATE).expect("built-in template is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(std::fs::read_to_string(path)?.trim_end())
    }

    fn has_candidates(&self) -> bool {
        self.segments.contains(&Segment::Candidates)
    }
}

/// A span to render/locate, in word coordinates with an optional known type.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub word_begin: usize,
    pub word_end: usize,
    pub type_id: Option<usize>,
}

/// Token-space location of one span, plus its word coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanAnchor {
    pub begin: usize,
    pub end: usize,
    pub type_id: Option<usize>,
    pub word_begin: usize,
    pub word_end: usize,
}

/// Token-space location of one schema type-name mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TypeAnchor {
    pub type_id: usize,
    pub begin: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct RenderedPrompt {
    /// Instruction prefix followed by the gold completion.
    pub token_ids: Vec<usize>,
    /// True exactly on the instruction prefix (excluded from generation loss).
    pub prompt_mask: Vec<bool>,
    pub span_index_map: Vec<SpanAnchor>,
    pub type_index_map: Vec<TypeAnchor>,
    pub target_ids: Vec<usize>,
    pub prompt_len: usize,
}

impl RenderedPrompt {
    pub fn prompt_ids(&self) -> &[usize] {
        &self.token_ids[..self.prompt_len]
    }
}

/// Maps a word-coordinate span onto token coordinates, rejecting spans whose
/// boundary falls inside a multi-word merged token.
fn word_span_to_tokens(
    ranges: &[(usize, usize)],
    word_begin: usize,
    word_end: usize,
) -> Result<(usize, usize)> {
    let tb = ranges[word_begin].0;
    let te = ranges[word_end - 1].1;
    let crosses_begin = word_begin > 0 && ranges[word_begin - 1].1 > tb;
    let crosses_end = word_end < ranges.len() && ranges[word_end].0 < te;
    if crosses_begin || crosses_end {
        return Err(Error::Alignment {
            begin: word_begin,
            end: word_end,
            detail: "tokenizer merged across the span boundary".into(),
        });
    }
    Ok((tb, te))
}

struct Rendering {
    ids: Vec<usize>,
    sentence_offset: usize,
    sentence_ranges: Vec<(usize, usize)>,
    type_anchors: Vec<TypeAnchor>,
}

fn render_prefix(
    template: &Template,
    sentence: &LabeledSentence,
    candidates: &[Candidate],
    catalog: &TypeCatalog,
    tokenizer: &Tokenizer,
) -> Result<Rendering> {
    let mut ids: Vec<usize> = Vec::new();
    let mut sentence_offset = 0;
    let mut sentence_ranges = Vec::new();
    let mut type_anchors = Vec::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(text) => ids.extend(tokenizer.encode_text(text)),
            Segment::Schema => {
                for type_id in catalog.ids() {
                    ids.push(ITEM_OPEN);
                    let words: Vec<&str> =
                        catalog.type_name(type_id).split_whitespace().collect();
                    let (name_ids, _) = tokenizer.encode_words(&words);
                    let begin = ids.len();
                    ids.extend(name_ids);
                    type_anchors.push(TypeAnchor {
                        type_id,
                        begin,
                        end: ids.len(),
                    });
                    ids.push(ITEM_CLOSE);
                }
            }
            Segment::Sentence => {
                let (tok_ids, ranges) = tokenizer.encode_words(&sentence.tokens);
                sentence_offset = ids.len();
                ids.extend(tok_ids);
                sentence_ranges = ranges;
            }
            Segment::Candidates => {
                for c in candidates {
                    ids.push(ITEM_OPEN);
                    let (surf_ids, _) =
                        tokenizer.encode_words(&sentence.tokens[c.word_begin..c.word_end]);
                    ids.extend(surf_ids);
                    ids.push(ITEM_CLOSE);
                }
            }
            Segment::Answer => break,
        }
    }
    Ok(Rendering {
        ids,
        sentence_offset,
        sentence_ranges,
        type_anchors,
    })
}

fn assemble(
    rendering: Rendering,
    sentence: &LabeledSentence,
    anchored: &[Candidate],
    target_items: Vec<String>,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<RenderedPrompt> {
    let mut span_index_map = Vec::with_capacity(anchored.len());
    for c in anchored {
        let (tb, te) = word_span_to_tokens(&rendering.sentence_ranges, c.word_begin, c.word_end)?;
        span_index_map.push(SpanAnchor {
            begin: rendering.sentence_offset + tb,
            end: rendering.sentence_offset + te,
            type_id: c.type_id,
            word_begin: c.word_begin,
            word_end: c.word_end,
        });
    }
    let _ = sentence;
    let target_ids = tokenizer.encode_text(&serialize_output(&target_items));
    let prompt_len = rendering.ids.len();
    let mut token_ids = rendering.ids;
    token_ids.extend(&target_ids);
    let needed = token_ids.len();
    if needed > cutoff {
        return Err(Error::Truncation { needed, cutoff });
    }
    let mut prompt_mask = vec![true; prompt_len];
    prompt_mask.resize(token_ids.len(), false);
    Ok(RenderedPrompt {
        token_ids,
        prompt_mask,
        span_index_map,
        type_index_map: rendering.type_anchors,
        target_ids,
        prompt_len,
    })
}

/// Span-stage prompt: instruction + schema + sentence; completion lists the
/// gold span surfaces in sentence order.
pub fn render_span_prompt(
    sentence: &LabeledSentence,
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<RenderedPrompt> {
    let gold = spans_from_tags(sentence, catalog, TagScheme::Bio, true)?;
    let anchored: Vec<Candidate> = gold
        .iter()
        .map(|s| Candidate {
            word_begin: s.begin,
            word_end: s.end,
            type_id: Some(s.type_id),
        })
        .collect();
    let items: Vec<String> = gold.iter().map(|s| s.surface(sentence)).collect();
    let rendering = render_prefix(template, sentence, &[], catalog, tokenizer)?;
    assemble(rendering, sentence, &anchored, items, tokenizer, cutoff)
}

/// Type-stage prompt: instruction + schema + sentence + candidate mentions;
/// completion pairs each candidate with its type name when known.
pub fn render_type_prompt(
    sentence: &LabeledSentence,
    candidates: &[Candidate],
    catalog: &TypeCatalog,
    template: &Template,
    tokenizer: &Tokenizer,
    cutoff: usize,
) -> Result<RenderedPrompt> {
    if catalog.is_empty() {
        return Err(Error::Validation("type prompt needs a non-empty catalog".into()));
    }
    if !template.has_candidates() {
        return Err(Error::Config(
            "type-stage template must contain {candidates}".into(),
        ));
    }
    for c in candidates {
        if c.word_begin >= c.word_end || c.word_end > sentence.len() {
            return Err(Error::Validation(format!(
                "candidate ({},{}) invalid for sentence of length {}",
                c.word_begin,
                c.word_end,
                sentence.len()
            )));
        }
    }
    let items: Vec<String> = candidates
        .iter()
        .map(|c| {
            let surface = sentence.tokens[c.word_begin..c.word_end].join(" ");
            match c.type_id {
                Some(t) => typed_item(&surface, catalog.type_name(t)),
                None => surface,
            }
        })
        .collect();
    let rendering = render_prefix(template, sentence, candidates, catalog, tokenizer)?;
    assemble(rendering, sentence, candidates, items, tokenizer, cutoff)
}

/// Boundary-contrastive index tuples for one rendered span prompt. Per span
/// i with token span (b, e): positive pair (b, e−1); negative quadruple
/// (b−1, b−2, e, e+1) with out-of-range entries masked, never clamped
/// (clamping would alias an interior token as exterior); type anchor = the
/// schema mention of the span's type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveIndices {
    pub pos: Vec<(usize, usize)>,
    pub neg: Vec<[Option<usize>; 4]>,
    pub type_anchor: Vec<(usize, usize)>,
}

pub fn build_contrastive_indices(prompt: &RenderedPrompt) -> Result<ContrastiveIndices> {
    if prompt.span_index_map.is_empty() {
        return Err(Error::Validation(
            "contrastive indices need at least one span".into(),
        ));
    }
    let len = prompt.token_ids.len();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut type_anchor = Vec::new();
    for anchor in &prompt.span_index_map {
        let type_id = anchor.type_id.ok_or_else(|| {
            Error::Validation("span without a type cannot anchor the contrastive loss".into())
        })?;
        let mention = prompt
            .type_index_map
            .iter()
            .find(|t| t.type_id == type_id)
            .ok_or_else(|| {
                Error::Validation(format!("no schema mention for type {type_id}"))
            })?;
        pos.push((anchor.begin, anchor.end - 1));
        let guard = |i: Option<usize>| i.filter(|&v| v < len);
        neg.push([
            guard(anchor.begin.checked_sub(1)),
            guard(anchor.begin.checked_sub(2)),
            guard(Some(anchor.end)),
            guard(Some(anchor.end + 1)),
        ]);
        type_anchor.push((mention.begin, mention.end));
    }
    Ok(ContrastiveIndices {
        pos,
        neg,
        type_anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tokenizer::build_vocab;

    fn sent(tokens: &[&str], tags: &[&str]) -> LabeledSentence {
        LabeledSentence::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            tags.iter().map(|s| s.to_string()).collect(),
            "test",
        )
        .unwrap()
    }

    fn fixture() -> (TypeCatalog, Tokenizer) {
        let catalog = TypeCatalog::new(
            vec![("PER".into(), "person".into()), ("DATE".into(), "date".into())],
            "O",
        )
        .unwrap();
        let mut words: Vec<String> = "Barack Obama was born in 1961 person date"
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        for t in [SPAN_TEMPLATE, TYPE_TEMPLATE] {
            words.extend(
                t.replace(['{', '}'], " ")
                    .split_whitespace()
                    .map(|s| s.to_string()),
            );
        }
        (catalog, Tokenizer::from_tokens(build_vocab(&words)).unwrap())
    }

    fn obama() -> LabeledSentence {
        sent(
            &["Barack", "Obama", "was", "born", "in", "1961"],
            &["B-PER", "I-PER", "O", "O", "O", "B-DATE"],
        )
    }

    #[test]
    fn span_prompt_locates_gold_surfaces() {
        let (catalog, tok) = fixture();
        let p = render_span_prompt(&obama(), &catalog, &Template::span_default(), &tok, 256).unwrap();
        assert_eq!(p.span_index_map.len(), 2);
        let decoded: Vec<String> = p
            .span_index_map
            .iter()
            .map(|a| tok.decode(&p.token_ids[a.begin..a.end]))
            .collect();
        assert_eq!(decoded, vec!["Barack Obama", "1961"]);
        assert_eq!(p.span_index_map[0].type_id, Some(0));
        assert_eq!(p.span_index_map[1].type_id, Some(1));
    }

    #[test]
    fn prompt_mask_is_prefix_and_target_is_suffix() {
        let (catalog, tok) = fixture();
        let p = render_span_prompt(&obama(), &catalog, &Template::span_default(), &tok, 256).unwrap();
        assert!(p.prompt_mask[..p.prompt_len].iter().all(|&m| m));
        assert!(p.prompt_mask[p.prompt_len..].iter().all(|&m| !m));
        assert_eq!(&p.token_ids[p.prompt_len..], &p.target_ids[..]);
        assert_eq!(
            tok.decode(&p.target_ids),
            "<im_start><<<Barack Obama>>> <<<1961>>><im_end>"
        );
    }

    #[test]
    fn entity_free_sentence_renders_empty_answer() {
        let (catalog, tok) = fixture();
        let s = sent(&["was", "born", "in"], &["O", "O", "O"]);
        let p = render_span_prompt(&s, &catalog, &Template::span_default(), &tok, 256).unwrap();
        assert!(p.span_index_map.is_empty());
        assert_eq!(tok.decode(&p.target_ids), "<im_start><im_end>");
    }

    #[test]
    fn merge_crossing_span_is_alignment_error() {
        let catalog = TypeCatalog::new(vec![("LOC".into(), "location".into())], "O").unwrap();
        let mut words: Vec<String> = "in new york city person location Types Sentence Answer"
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        words.push("new york".to_string()); // merged entry
        words.extend(
            SPAN_TEMPLATE
                .replace(['{', '}'], " ")
                .split_whitespace()
                .map(|s| s.to_string()),
        );
        let tok = Tokenizer::from_tokens(build_vocab(&words)).unwrap();
        // span covers only "york": its first token is shared with "new"
        let s = sent(&["in", "new", "york", "city"], &["O", "O", "B-LOC", "O"]);
        let err = render_span_prompt(&s, &catalog, &Template::span_default(), &tok, 256).unwrap_err();
        assert!(matches!(err, Error::Alignment { .. }), "{err}");
        // whole merged token inside the span aligns fine
        let s2 = sent(&["in", "new", "york", "city"], &["O", "B-LOC", "I-LOC", "O"]);
        let p = render_span_prompt(&s2, &catalog, &Template::span_default(), &tok, 256).unwrap();
        let a = p.span_index_map[0];
        assert_eq!(tok.decode(&p.token_ids[a.begin..a.end]), "new york");
    }

    #[test]
    fn cutoff_overflow_is_truncation_error() {
        let (catalog, tok) = fixture();
        let err = render_span_prompt(&obama(), &catalog, &Template::span_default(), &tok, 10)
            .unwrap_err();
        match err {
            Error::Truncation { needed, cutoff } => {
                assert!(needed > 10);
                assert_eq!(cutoff, 10);
            }
            other => panic!("expected truncation, got {other}"),
        }
    }

    #[test]
    fn type_prompt_anchors_every_schema_name() {
        let catalog = TypeCatalog::conll();
        let mut words: Vec<String> =
            "Obama visited Paris person location organization miscellaneous"
                .split_whitespace()
                .map(|s| s.to_string())
                .collect();
        words.extend(
            TYPE_TEMPLATE
                .replace(['{', '}'], " ")
                .split_whitespace()
                .map(|s| s.to_string()),
        );
        let tok = Tokenizer::from_tokens(build_vocab(&words)).unwrap();
        let s = sent(&["Obama", "visited", "Paris"], &["B-PER", "O", "B-LOC"]);
        let candidates = [
            Candidate { word_begin: 0, word_end: 1, type_id: Some(0) },
            Candidate { word_begin: 2, word_end: 3, type_id: Some(1) },
        ];
        let p = render_type_prompt(&s, &candidates, &catalog, &Template::type_default(), &tok, 256)
            .unwrap();
        assert_eq!(p.type_index_map.len(), 4);
        let names: Vec<String> = p
            .type_index_map
            .iter()
            .map(|a| tok.decode(&p.token_ids[a.begin..a.end]))
            .collect();
        assert_eq!(names, vec!["person", "location", "organization", "miscellaneous"]);
        assert_eq!(p.span_index_map.len(), 2);
        assert_eq!(
            tok.decode(&p.target_ids),
            "<im_start><<<Obama : person>>> <<<Paris : location>>><im_end>"
        );
    }

    #[test]
    fn type_prompt_with_no_candidates_is_valid() {
        let (catalog, tok) = fixture();
        let p = render_type_prompt(&obama(), &[], &catalog, &Template::type_default(), &tok, 256)
            .unwrap();
        assert!(p.span_index_map.is_empty());
        assert_eq!(tok.decode(&p.target_ids), "<im_start><im_end>");
    }

    #[test]
    fn contrastive_indices_interior_span() {
        let (catalog, tok) = fixture();
        let p = render_span_prompt(&obama(), &catalog, &Template::span_default(), &tok, 256).unwrap();
        let ci = build_contrastive_indices(&p).unwrap();
        let a = p.span_index_map[0];
        assert_eq!(ci.pos[0], (a.begin, a.end - 1));
        assert_eq!(
            ci.neg[0],
            [
                Some(a.begin - 1),
                Some(a.begin - 2),
                Some(a.end),
                Some(a.end + 1)
            ]
        );
        let (tb, te) = ci.type_anchor[0];
        assert_eq!(tok.decode(&p.token_ids[tb..te]), "person");
    }

    #[test]
    fn contrastive_indices_mask_out_of_range() {
        // hand-built prompt: span starts at position 1 of a 5-token sequence
        let p = RenderedPrompt {
            token_ids: vec![0; 5],
            prompt_mask: vec![true; 5],
            span_index_map: vec![SpanAnchor {
                begin: 1,
                end: 3,
                type_id: Some(0),
                word_begin: 0,
                word_end: 2,
            }],
            type_index_map: vec![TypeAnchor { type_id: 0, begin: 4, end: 5 }],
            target_ids: vec![],
            prompt_len: 5,
        };
        let ci = build_contrastive_indices(&p).unwrap();
        assert_eq!(ci.neg[0], [Some(0), None, Some(3), Some(4)]);
        // span ending at the sequence edge masks e and e+1
        let p2 = RenderedPrompt {
            span_index_map: vec![SpanAnchor {
                begin: 3,
                end: 5,
                type_id: Some(0),
                word_begin: 0,
                word_end: 2,
            }],
            ..p
        };
        let ci2 = build_contrastive_indices(&p2).unwrap();
        assert_eq!(ci2.neg[0], [Some(2), Some(1), None, None]);
    }

    #[test]
    fn contrastive_indices_require_spans_and_anchors() {
        let (catalog, tok) = fixture();
        let s = sent(&["was", "born"], &["O", "O"]);
        let p = render_span_prompt(&s, &catalog, &Template::span_default(), &tok, 256).unwrap();
        assert!(build_contrastive_indices(&p).is_err());
    }

    #[test]
    fn template_validation() {
        assert!(Template::parse("no placeholders").is_err());
        assert!(Template::parse("{sentence} then {answer} trailing words").is_err());
        assert!(Template::parse("{sentence} {bogus} {answer}").is_err());
        assert!(Template::parse("S: {sentence} A: {answer}").is_ok());
        assert!(Template::parse("S: {sentence} A: {answer}  ").is_ok());
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn arb_sentence() -> impl Strategy<Value = LabeledSentence> {
            let words = ["Barack", "Obama", "was", "born", "in", "1961"];
            (
                proptest::collection::vec(0usize..words.len(), 1..10),
                proptest::collection::vec((0usize..10, 1usize..3, 0usize..2), 0..3),
            )
                .prop_map(move |(word_idx, raw_spans)| {
                    let tokens: Vec<String> =
                        word_idx.iter().map(|&i| words[i].to_string()).collect();
                    let len = tokens.len();
                    let mut tags = vec!["O".to_string(); len];
                    let mut cursor = 0usize;
                    let mut items = raw_spans;
                    items.sort_by_key(|r| r.0);
                    for (start, width, ty) in items {
                        let begin = start.min(len.saturating_sub(1)).max(cursor);
                        let end = (begin + width).min(len);
                        if begin >= end {
                            continue;
                        }
                        let raw = if ty == 0 { "PER" } else { "DATE" };
                        for (k, tag) in tags[begin..end].iter_mut().enumerate() {
                            *tag = format!("{}{raw}", if k == 0 { "B-" } else { "I-" });
                        }
                        cursor = end;
                    }
                    LabeledSentence::new(tokens, tags, "prop").unwrap()
                })
        }

        proptest! {
            #[test]
            fn decoded_anchor_slices_match_surfaces(s in arb_sentence()) {
                let (catalog, tok) = fixture();
                let p = render_span_prompt(&s, &catalog, &Template::span_default(), &tok, 512)
                    .unwrap();
                for a in &p.span_index_map {
                    let surface = s.tokens[a.word_begin..a.word_end].join(" ");
                    prop_assert_eq!(tok.decode(&p.token_ids[a.begin..a.end]), surface);
                }
            }

            #[test]
            fn no_unmasked_index_out_of_range(s in arb_sentence()) {
                let (catalog, tok) = fixture();
                let p = render_span_prompt(&s, &catalog, &Template::span_default(), &tok, 512)
                    .unwrap();
                if p.span_index_map.is_empty() {
                    return Ok(());
                }
                let ci = build_contrastive_indices(&p).unwrap();
                let len = p.token_ids.len();
                for (pair, quad) in ci.pos.iter().zip(&ci.neg) {
                    prop_assert!(pair.0 < len && pair.1 < len);
                    for idx in quad.iter().flatten() {
                        prop_assert!(*idx < len);
                    }
                }
            }
        }
    }
}
