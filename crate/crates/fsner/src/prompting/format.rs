//! Structured generation output grammar.
//!
//! A well-formed output is `<im_start>` + body + `<im_end>`. A single item
//! renders bare; multiple items each render as `<<<item>>>`, joined by a
//! single space (the separator is fixed here and relied on by tests).
//! Items must be non-empty, trimmed, and marker-free.

const START: &str = "<im_start>";
const END: &str = "<im_end>";
const OPEN: &str = "<<<";
const CLOSE: &str = ">>>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredOutput {
    pub items: Vec<String>,
    pub raw: String,
    /// Missing/truncated markers or unbalanced delimiters.
    pub malformed: bool,
    /// Count of delimiter-grammar violations dropped during parsing.
    pub dropped: usize,
}

pub fn serialize_output(items: &[String]) -> String {
    match items.len() {
        0 => format!("{START}{END}"),
        1 => format!("{START}{}{END}", items[0]),
        _ => {
            let body: Vec<String> = items.iter().map(|i| format!("{OPEN}{i}{CLOSE}")).collect();
            format!("{START}{}{END}", body.join(" "))
        }
    }
}

/// Pair item encoding for span+type outputs: `surface : type`.
pub fn typed_item(surface: &str, type_name: &str) -> String {
    format!("{surface} : {type_name}")
}

/// Splits a pair item on its last ` : ` so surfaces containing the
/// separator still parse.
pub fn split_typed_item(item: &str) -> Option<(&str, &str)> {
    item.rfind(" : ")
        .map(|at| (&item[..at], &item[at + 3..]))
}

pub fn parse_generation(raw: &str) -> StructuredOutput {
    let mut out = StructuredOutput {
        items: Vec::new(),
        raw: raw.to_string(),
        malformed: false,
        dropped: 0,
    };
    let Some(start) = raw.find(START) else {
        out.malformed = true;
        return out;
    };
    let after = &raw[start + START.len()..];
    let body = match after.find(END) {
        Some(end) => &after[..end],
        None => {
            // truncated: parse what is there
            out.malformed = true;
            after
        }
    };
    if !body.contains(OPEN) {
        let item = body.trim();
        if !item.is_empty() {
            out.items.push(item.to_string());
        }
        return out;
    }
    let mut rest = body;
    loop {
        match rest.find(OPEN) {
            Some(at) => {
                if !rest[..at].trim().is_empty() {
                    out.dropped += 1; // stray text between items
                }
                let inner = &rest[at + OPEN.len()..];
                match inner.find(CLOSE) {
                    Some(close) => {
                        out.items.push(inner[..close].to_string());
                        rest = &inner[close + CLOSE.len()..];
                    }
                    None => {
                        // unbalanced open: drop the partial item
                        out.malformed = true;
                        out.dropped += 1;
                        return out;
                    }
                }
            }
            None => {
                if !rest.trim().is_empty() {
                    out.dropped += 1; // trailing stray text
                }
                return out;
            }
        }
    }
}
