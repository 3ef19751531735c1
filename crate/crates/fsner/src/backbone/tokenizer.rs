//! Word-level tokenizer with greedy multi-word merges and character
//! fallback. Vocabulary file format: one token per line, id = line index;
//! the seven reserved tokens always occupy ids 0..7.
//!
//! Decoding reproduces surface text exactly: continuation pieces (`##x`)
//! attach without a space, and structural markers re-render with the exact
//! spacing of the structured output format.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const IM_START: usize = 3;
pub const IM_END: usize = 4;
pub const ITEM_OPEN: usize = 5;
pub const ITEM_CLOSE: usize = 6;

pub const SPECIALS: [&str; 7] = ["<pad>", "<unk>", "<s>", "<im_start>", "<im_end>", "<<<", ">>>"];

#[derive(Clone, Debug)]
pub struct Tokenizer {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
    /// Longest multi-word vocabulary entry, in words.
    max_merge_words: usize,
}

impl Tokenizer {
    /// Builds from the full token table; the reserved tokens must already
    /// sit at ids 0..7 (as produced by [`build_vocab`] / `save`).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || SPECIALS.iter().enumerate().any(|(i, s)| tokens[i] != *s)
        {
            return Err(Error::Config(
                "vocabulary must start with the reserved token block".into(),
            ));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry '{tok}'")));
            }
        }
        let max_merge_words = tokens
            .iter()
            .map(|t| t.split(' ').count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            tokens,
            lookup,
            max_merge_words,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_tokens(raw.lines().map(|l| l.to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    /// Encodes a word sequence. Returns token ids plus, per input word, the
    /// half-open token range covering it. Words absorbed into one multi-word
    /// merge share the same single-token range.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> (Vec<usize>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut ranges = vec![(0usize, 0usize); words.len()];
        let mut w = 0;
        while w < words.len() {
            // greedy longest multi-word match
            let mut matched = 0usize;
            let mut matched_id = 0usize;
            let upper = self.max_merge_words.min(words.len() - w);
            for span in (1..=upper).rev() {
                let candidate = words[w..w + span]
                    .iter()
                    .map(|s| s.as_ref())
                    .collect::<Vec<_>>()
                    .join(" ");
                if let Some(&id) = self.lookup.get(&candidate) {
                    matched = span;
                    matched_id = id;
                    break;
                }
            }
            if matched > 0 {
                let t = ids.len();
                ids.push(matched_id);
                for r in ranges.iter_mut().skip(w).take(matched) {
                    *r = (t, t + 1);
                }
                w += matched;
            } else {
                let t0 = ids.len();
                self.encode_chars(words[w].as_ref(), &mut ids);
                ranges[w] = (t0, ids.len());
                w += 1;
            }
        }
        (ids, ranges)
    }

    /// Character fallback: first char plain, rest as `##c` continuations.
    fn encode_chars(&self, word: &str, out: &mut Vec<usize>) {
        for (i, ch) in word.chars().enumerate() {
            let piece = if i == 0 {
                ch.to_string()
            } else {
                format!("##{ch}")
            };
            out.push(self.lookup.get(&piece).copied().unwrap_or(UNK));
        }
    }

    /// Encodes free text: structural markers split off even when glued to
    /// neighboring characters; remaining segments split on whitespace.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for lexeme in split_markers(text) {
            match lexeme {
                Lexeme::Marker(m) => ids.push(self.lookup[m]),
                Lexeme::Plain(seg) => {
                    let words: Vec<&str> = seg.split_whitespace().collect();
                    if !words.is_empty() {
                        let (mut w_ids, _) = self.encode_words(&words);
                        ids.append(&mut w_ids);
                    }
                }
            }
        }
        ids
    }

    /// Exact inverse of encoding for well-formed inputs: single spaces
    /// between words, `##` pieces attached, marker spacing per the
    /// structured output format (nothing after `<im_start>`/`<<<`, nothing
    /// before `>>>`/`<im_end>`).
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut glue_next = true; // suppress the space before the next piece
        for &id in ids {
            let tok = self.token(id);
            let (glue_before, glue_after) = match id {
                IM_START | ITEM_OPEN => (false, true),
                IM_END | ITEM_CLOSE => (true, false),
                _ => (false, false),
            };
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
            } else {
                if !out.is_empty() && !glue_next && !glue_before {
                    out.push(' ');
                }
                out.push_str(tok);
            }
            glue_next = glue_after;
        }
        out
    }
}

enum Lexeme<'a> {
    Marker(&'static str),
    Plain(&'a str),
}

/// Longest-first scan for reserved markers; everything between markers is a
/// plain segment.
fn split_markers(text: &str) -> Vec<Lexeme<'_>> {
    // sorted by length descending so "<im_start>" wins over shorter matches
    const MARKERS: [&str; 7] = ["<im_start>", "<im_end>", "<pad>", "<unk>", "<<<", ">>>", "<s>"];
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut seg_start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        let hit = MARKERS
            .iter()
            .find(|m| text[i..].starts_with(*m))
            .copied();
        if let Some(m) = hit {
            if seg_start < i {
                out.push(Lexeme::Plain(&text[seg_start..i]));
            }
            out.push(Lexeme::Marker(m));
            i += m.len();
            seg_start = i;
        } else {
            i += 1;
        }
    }
    if seg_start < bytes.len() {
        out.push(Lexeme::Plain(&text[seg_start..]));
    }
    out
}

/// Assembles a vocabulary: reserved block, then the given words
/// (deduplicated, sorted), then single-character fallback pieces.
pub fn build_vocab<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
    let mut sorted: Vec<String> = words
        .iter()
        .map(|w| w.as_ref().to_string())
        .filter(|w| !w.is_empty())
        .collect();
    sorted.sort();
    sorted.dedup();
    for w in sorted {
        if seen.insert(w.clone()) {
            vocab.push(w);
        }
    }
    // fallback alphabet: ascii letters, digits, light punctuation
    let alphabet = ('a'..='z')
        .chain('A'..='Z')
        .chain('0'..='9')
        .chain(['.', ',', ':', ';', '-', '\'', '(', ')', '?', '!', '/']);
    for ch in alphabet {
        for piece in [ch.to_string(), format!("##{ch}")] {
            if seen.insert(piece.clone()) {
                vocab.push(piece);
            }
        }
    }
    vocab
}
