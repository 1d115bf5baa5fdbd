//! Extraction of structured answers from raw predictor output.
//!
//! The scanner is deliberately lenient: model output is only XML-shaped,
//! so we look for literal tag delimiters with a linear scan instead of a
//! real XML parser. Anything unrecoverable yields a malformed `Prediction`
//! with empty lists; parsing never aborts on any byte sequence.

use crate::domain::{ParseStatus, Prediction};

/// Content after `<{tag}>`, ending at `</{tag}>` when present. A missing
/// closing tag (truncated generation) extends the block to the end of the
/// input; `stop_tags` cut that fallback short so a sibling tag is never
/// swallowed.
fn extract_block<'a>(text: &'a str, tag: &str, stop_tags: &[&str]) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let rest = &text[start..];
    let mut end = rest.find(&close).unwrap_or(rest.len());
    for stop in stop_tags {
        let marker = format!("<{stop}>");
        if let Some(pos) = rest.find(&marker) {
            end = end.min(pos);
        }
    }
    Some(&rest[..end])
}

/// Splits a bracketed pipe-separated list: "[a | b | c]" -> ["a", "b", "c"].
/// Brackets are optional and stripped wherever they appear at entry edges;
/// empty entries are dropped.
fn split_entries(content: &str) -> Vec<String> {
    let mut body = content.trim();
    body = body.strip_prefix('[').unwrap_or(body);
    body = body.strip_suffix(']').unwrap_or(body);
    body.split('|')
        .map(|e| {
            let e = e.trim();
            let e = e.strip_prefix('[').unwrap_or(e);
            let e = e.strip_suffix(']').unwrap_or(e);
            e.trim()
        })
        .filter(|e| !e.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Parses a ranked-list completion. The expected shape is an `<answer>`
/// block holding `<advertiser_names>` and `<interests>` in either order,
/// each a pipe-separated list with optional surrounding brackets. The
/// result is ok iff both tags are present and the advertiser list is
/// non-empty; list lengths are not enforced here, scoring penalizes them.
pub fn parse_answer(raw: &str) -> Prediction {
    let Some(answer) = extract_block(raw, "answer", &[]) else {
        return Prediction::malformed(raw);
    };
    let advertisers = extract_block(answer, "advertiser_names", &["interests"]);
    let interests = extract_block(answer, "interests", &["advertiser_names"]);
    let (Some(adv_block), Some(int_block)) = (advertisers, interests) else {
        return Prediction::malformed(raw);
    };
    let advertisers = split_entries(adv_block);
    let interests = split_entries(int_block);
    if advertisers.is_empty() {
        return Prediction::malformed(raw);
    }
    Prediction {
        advertisers,
        interests,
        parse_status: ParseStatus::Ok,
        raw: raw.to_owned(),
    }
}

/// Parses a free-text single-advertiser completion: the first non-empty
/// line, with list markers ("-", "1.") and surrounding quotes stripped.
pub fn parse_sft_answer(raw: &str) -> Option<String> {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty())?;
    let mut s = line;
    if let Some(rest) = s.strip_prefix('-') {
        s = rest.trim_start();
    } else {
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix('.') {
                s = rest.trim_start();
            }
        }
    }
    let s = s.trim_matches(|c| c == '"' || c == '\'').trim();
    if s.is_empty() {
        None
    } else {
        Some(s.to_owned())
    }
}

/// Canonical form for advertiser-name comparison: unicode-preserving
/// lowercase, edge punctuation stripped, internal whitespace runs collapsed
/// to single spaces. Idempotent.
pub fn normalize_name(name: &str) -> String {
    let lowered = name.to_lowercase();
    let trimmed =
        lowered.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}
