//! Rule-based JSON repair.
//!
//! Rules run once each, in the order of [`RepairKind::ORDER`]. Apart from
//! fence stripping, rules only touch text inside braces so that prose around
//! the JSON (apostrophes, the word "None") survives until the final
//! extraction step trims it away.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    StripCodeFence,
    SingleToDoubleQuotes,
    RemoveTrailingComma,
    QuoteBareKey,
    PyliteralToJson,
    NanToNull,
    ExtractJsonSubstring,
}

impl RepairKind {
    pub const ORDER: [RepairKind; 7] = [
        RepairKind::StripCodeFence,
        RepairKind::SingleToDoubleQuotes,
        RepairKind::RemoveTrailingComma,
        RepairKind::QuoteBareKey,
        RepairKind::PyliteralToJson,
        RepairKind::NanToNull,
        RepairKind::ExtractJsonSubstring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RepairKind::StripCodeFence => "strip_code_fence",
            RepairKind::SingleToDoubleQuotes => "single_to_double_quotes",
            RepairKind::RemoveTrailingComma => "remove_trailing_comma",
            RepairKind::QuoteBareKey => "quote_bare_key",
            RepairKind::PyliteralToJson => "pyliteral_to_json",
            RepairKind::NanToNull => "nan_to_null",
            RepairKind::ExtractJsonSubstring => "extract_json_substring",
        }
    }
}

/// One applied rule. `span` is the byte range of the rule's input text
/// between the first and last edit it made.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAction {
    pub kind: RepairKind,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("JSON could not be repaired: {message}")]
pub struct Unrepairable {
    pub message: String,
    /// Text after every rule ran; what a correction prompt should quote.
    pub partially_repaired: String,
}

fn parses_as_object(text: &str) -> bool {
    matches!(serde_json::from_str::<serde_json::Value>(text), Ok(serde_json::Value::Object(_)))
}

/// Applies the repair rules to `raw`. Succeeds iff the result parses
/// strictly as a JSON object. Already-valid JSON objects come back unchanged
/// with no actions.
pub fn repair_json(raw: &str) -> Result<(String, Vec<RepairAction>), Unrepairable> {
    if parses_as_object(raw) {
        return Ok((raw.to_string(), Vec::new()));
    }
    let mut text = raw.to_string();
    let mut actions = Vec::new();
    for kind in RepairKind::ORDER {
        let rule: fn(&str) -> Option<(String, Range<usize>)> = match kind {
            RepairKind::StripCodeFence => strip_code_fence,
            RepairKind::SingleToDoubleQuotes => single_to_double_quotes,
            RepairKind::RemoveTrailingComma => remove_trailing_commas,
            RepairKind::QuoteBareKey => quote_bare_keys,
            RepairKind::PyliteralToJson => |t| replace_words(t, &[("True", "true"), ("False", "false"), ("None", "null")]),
            RepairKind::NanToNull => nan_to_null,
            RepairKind::ExtractJsonSubstring => extract_json_substring,
        };
        if let Some((next, span)) = rule(&text) {
            text = next;
            actions.push(RepairAction { kind, span });
        }
    }
    if parses_as_object(&text) {
        Ok((text, actions))
    } else {
        let message = match serde_json::from_str::<serde_json::Value>(&text) {
            Err(e) => e.to_string(),
            Ok(_) => "top-level value is not an object".to_string(),
        };
        Err(Unrepairable {
            message,
            partially_repaired: text,
        })
    }
}

/// Keeps the body of the first fenced block (dropping a language tag).
fn strip_code_fence(text: &str) -> Option<(String, Range<usize>)> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    let body_start = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => nl + 1,
        _ => after.chars().take_while(|c| c.is_ascii_alphabetic()).map(char::len_utf8).sum(),
    };
    let body = &after[body_start..];
    let (body, end) = match body.find("```") {
        Some(close) => (&body[..close], open + 3 + body_start + close + 3),
        None => (body, text.len()),
    };
    let trimmed = body.trim();
    (trimmed != text).then(|| (trimmed.to_string(), open..end))
}

/// Byte offsets (with characters) of the text that lies inside braces and
/// outside string literals. `quotes` lists the characters that open strings.
/// Depth is tracked for `{`/`}` only; `[` `]` count as structure within.
fn structural_chars(text: &str, quotes: &[char]) -> Vec<(usize, char, bool)> {
    let mut out = Vec::with_capacity(text.len());
    let mut depth = 0usize;
    let mut in_str: Option<char> = None;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if let Some(q) = in_str {
            out.push((i, c, false));
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                in_str = None;
            }
            continue;
        }
        match c {
            '{' => {
                depth += 1;
                out.push((i, c, true));
            }
            '}' => {
                out.push((i, c, depth > 0));
                depth = depth.saturating_sub(1);
            }
            _ if depth > 0 && quotes.contains(&c) => {
                in_str = Some(c);
                out.push((i, c, false));
            }
            _ => out.push((i, c, depth > 0)),
        }
    }
    out
}

fn single_to_double_quotes(text: &str) -> Option<(String, Range<usize>)> {
    let mut out = String::with_capacity(text.len() + 8);
    let mut first = None;
    let mut last = 0;
    let mut depth = 0usize;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        match c {
            '{' => {
                depth += 1;
                out.push(c);
            }
            '}' => {
                depth = depth.saturating_sub(1);
                out.push(c);
            }
            '"' if depth > 0 => {
                // Copy a double-quoted string verbatim.
                out.push(c);
                let mut escaped = false;
                for (_, d) in chars.by_ref() {
                    out.push(d);
                    if escaped {
                        escaped = false;
                    } else if d == '\\' {
                        escaped = true;
                    } else if d == '"' {
                        break;
                    }
                }
            }
            '\'' if depth > 0 => {
                first.get_or_insert(i);
                out.push('"');
                let mut end = i;
                while let Some((j, d)) = chars.next() {
                    end = j;
                    match d {
                        '\\' => match chars.next() {
                            Some((k, '\'')) => {
                                end = k;
                                out.push('\'');
                            }
                            Some((k, e)) => {
                                end = k;
                                out.push('\\');
                                out.push(e);
                            }
                            None => out.push('\\'),
                        },
                        '"' => out.push_str("\\\""),
                        '\'' => {
                            out.push('"');
                            break;
                        }
                        _ => out.push(d),
                    }
                }
                last = end + 1;
            }
            _ => out.push(c),
        }
    }
    first.map(|f| (out, f..last))
}

fn remove_trailing_commas(text: &str) -> Option<(String, Range<usize>)> {
    let sc = structural_chars(text, &['"']);
    let mut drop = Vec::new();
    for (k, &(i, c, structural)) in sc.iter().enumerate() {
        if structural && c == ',' {
            let next = sc[k + 1..].iter().find(|(_, d, _)| !d.is_whitespace());
            if matches!(next, Some((_, '}' | ']', true))) {
                drop.push(i);
            }
        }
    }
    if drop.is_empty() {
        return None;
    }
    let span = drop[0]..drop[drop.len() - 1] + 1;
    let mut out = String::with_capacity(text.len());
    for (i, c) in text.char_indices() {
        if drop.binary_search(&i).is_err() {
            out.push(c);
        }
    }
    Some((out, span))
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$' || c == '-'
}

fn quote_bare_keys(text: &str) -> Option<(String, Range<usize>)> {
    let sc = structural_chars(text, &['"']);
    let mut inserts: Vec<(usize, usize)> = Vec::new();
    let mut k = 0;
    while k < sc.len() {
        let (_, c, structural) = sc[k];
        if structural && (c == '{' || c == ',') {
            let mut j = k + 1;
            while j < sc.len() && sc[j].1.is_whitespace() {
                j += 1;
            }
            if j < sc.len() && sc[j].2 && is_ident_start(sc[j].1) {
                let start = sc[j].0;
                let mut e = j;
                while e < sc.len() && sc[e].2 && is_ident_char(sc[e].1) {
                    e += 1;
                }
                let end = if e < sc.len() { sc[e].0 } else { text.len() };
                let mut n = e;
                while n < sc.len() && sc[n].1.is_whitespace() {
                    n += 1;
                }
                if n < sc.len() && sc[n].1 == ':' && sc[n].2 {
                    inserts.push((start, end));
                }
                k = e;
                continue;
            }
        }
        k += 1;
    }
    if inserts.is_empty() {
        return None;
    }
    let span = inserts[0].0..inserts[inserts.len() - 1].1;
    let mut out = String::with_capacity(text.len() + 2 * inserts.len());
    let mut pos = 0;
    for (s, e) in inserts {
        out.push_str(&text[pos..s]);
        out.push('"');
        out.push_str(&text[s..e]);
        out.push('"');
        pos = e;
    }
    out.push_str(&text[pos..]);
    Some((out, span))
}

/// Replaces whole-word tokens outside strings and inside braces.
fn replace_words(text: &str, table: &[(&str, &str)]) -> Option<(String, Range<usize>)> {
    let sc = structural_chars(text, &['"']);
    let mut edits: Vec<(usize, usize, &str)> = Vec::new();
    let mut k = 0;
    while k < sc.len() {
        let (i, c, structural) = sc[k];
        let boundary_before = k == 0 || !(sc[k - 1].1.is_alphanumeric() || sc[k - 1].1 == '_');
        if structural && boundary_before && (c.is_alphabetic() || c == '-') {
            let mut e = k + 1;
            while e < sc.len() && sc[e].2 && (sc[e].1.is_alphanumeric() || sc[e].1 == '_') {
                e += 1;
            }
            let end = if e < sc.len() { sc[e].0 } else { text.len() };
            if let Some((_, to)) = table.iter().find(|(from, _)| *from == &text[i..end]) {
                edits.push((i, end, to));
            }
            k = e;
            continue;
        }
        k += 1;
    }
    if edits.is_empty() {
        return None;
    }
    let span = edits[0].0..edits[edits.len() - 1].1;
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    for (s, e, to) in edits {
        out.push_str(&text[pos..s]);
        out.push_str(to);
        pos = e;
    }
    out.push_str(&text[pos..]);
    Some((out, span))
}

fn nan_to_null(text: &str) -> Option<(String, Range<usize>)> {
    replace_words(
        text,
        &[
            ("NaN", "null"),
            ("nan", "null"),
            ("-NaN", "null"),
            ("-nan", "null"),
            ("Infinity", "null"),
            ("-Infinity", "null"),
            ("inf", "null"),
            ("-inf", "null"),
        ],
    )
}

/// Byte range of the last complete top-level `{...}` block, honouring
/// double-quoted strings inside braces.
pub(crate) fn last_object_span(text: &str) -> Option<Range<usize>> {
    let mut depth = 0usize;
    let mut start = 0;
    let mut in_str = false;
    let mut escaped = false;
    let mut found = None;
    for (i, c) in text.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            '}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    found = Some(start..i + 1);
                }
            }
            '"' if depth > 0 => in_str = true,
            _ => {}
        }
    }
    found
}

fn extract_json_substring(text: &str) -> Option<(String, Range<usize>)> {
    let span = last_object_span(text)?;
    let inner = &text[span.clone()];
    (inner != text.trim()).then(|| (inner.to_string(), span))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(actions: &[RepairAction]) -> Vec<RepairKind> {
        actions.iter().map(|a| a.kind).collect()
    }

    #[test]
    fn single_quotes() {
        let (out, actions) = repair_json("{'Age': 63}").unwrap();
        assert_eq!(out, "{\"Age\": 63}");
        assert_eq!(kinds(&actions), vec![RepairKind::SingleToDoubleQuotes]);
    }

    #[test]
    fn fence_and_trailing_comma() {
        let (out, actions) = repair_json("```json\n{\"a\":1,}\n```").unwrap();
        assert_eq!(out, "{\"a\":1}");
        assert_eq!(kinds(&actions), vec![RepairKind::StripCodeFence, RepairKind::RemoveTrailingComma]);
    }

    #[test]
    fn python_none() {
        let (out, actions) = repair_json("{\"a\": None}").unwrap();
        assert_eq!(out, "{\"a\": null}");
        assert_eq!(kinds(&actions), vec![RepairKind::PyliteralToJson]);
    }

    #[test]
    fn hopeless_input() {
        assert!(repair_json("{{{").is_err());
        assert!(repair_json("").is_err());
    }

    #[test]
    fn valid_json_untouched() {
        let raw = "{ \"a\" : [1, 2.5e3, \"it's None\"] }";
        assert_eq!(repair_json(raw).unwrap(), (raw.to_string(), vec![]));
    }

    #[test]
    fn prose_is_left_alone_until_extraction() {
        let raw = "The patient's age is known, None missing.\nOutput JSON:\n{'Age': 63, 'Sex': None}";
        let (out, actions) = repair_json(raw).unwrap();
        assert_eq!(out, "{\"Age\": 63, \"Sex\": null}");
        assert_eq!(
            kinds(&actions),
            vec![RepairKind::SingleToDoubleQuotes, RepairKind::PyliteralToJson, RepairKind::ExtractJsonSubstring]
        );
    }

    #[test]
    fn apostrophe_inside_double_quotes_survives() {
        let (out, _) = repair_json("{\"note\": \"Estes' criteria\", 'a': 1}").unwrap();
        assert_eq!(out, "{\"note\": \"Estes' criteria\", \"a\": 1}");
    }

    #[test]
    fn bare_keys_and_nan() {
        let (out, actions) = repair_json("{age: NaN, sex_code: \"M\"}").unwrap();
        assert_eq!(out, "{\"age\": null, \"sex_code\": \"M\"}");
        assert_eq!(kinds(&actions), vec![RepairKind::QuoteBareKey, RepairKind::NanToNull]);
    }

    #[test]
    fn spans_point_at_edits() {
        let (_, actions) = repair_json("{\"a\": 1, \"b\": True}").unwrap();
        assert_eq!(actions[0].span, 14..18);
    }
}
