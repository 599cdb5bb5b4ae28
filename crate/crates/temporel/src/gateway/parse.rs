//! Relaxed parsing of multiple-choice answers.
//!
//! Models rarely emit a clean option letter. Three relaxations are applied
//! in order, after trimming whitespace and trailing punctuation:
//!
//! 1. a bare option letter (`"B"`, `"b."`, and unless strict, `"(B)"`),
//! 2. a letter-colon prefix (`"B: traffic light"`),
//! 3. the full text of exactly one displayed option, case-insensitively.
//!
//! Anything else, including prose like `"The answer is A"`, is unparseable
//! and scored incorrect. Parsing never guesses beyond these rules.

use serde::{Deserialize, Serialize};

/// Letter shown for a displayed slot (`0 -> 'A'`); slots >= 26 have none.
pub fn option_letter(slot: usize) -> Option<char> {
    if slot < 26 {
        Some((b'A' + slot as u8) as char)
    } else {
        None
    }
}

/// Displayed slot named by an option letter, case-insensitive.
pub fn letter_slot(c: char) -> Option<usize> {
    if c.is_ascii_alphabetic() {
        Some((c.to_ascii_uppercase() as u8 - b'A') as usize)
    } else {
        None
    }
}

/// Parser switches.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ParseOptions {
    /// When set, parenthesized letters like `"(A)"` are rejected instead of
    /// accepted.
    pub strict: bool,
}

/// Which relaxation rule matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    Letter,
    LetterColonText,
    BareText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slot", rename_all = "snake_case")]
pub enum ParseOutcome {
    /// Displayed slot the response names.
    Slot(usize),
    Unparseable,
}

/// Outcome of parsing one raw response against the displayed options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerParse {
    pub outcome: ParseOutcome,
    pub raw: String,
    pub rule_used: Option<ParseRule>,
}

impl AnswerParse {
    pub fn slot(&self) -> Option<usize> {
        match self.outcome {
            ParseOutcome::Slot(s) => Some(s),
            ParseOutcome::Unparseable => None,
        }
    }
}

/// Maps a raw model response to a displayed slot, or records it as
/// unparseable. `displayed` is the option texts in displayed order.
pub fn parse_option_answer(raw: &str, displayed: &[String], opts: &ParseOptions) -> AnswerParse {
    let k = displayed.len();
    let unparsed = |raw: &str| AnswerParse {
        outcome: ParseOutcome::Unparseable,
        raw: raw.to_string(),
        rule_used: None,
    };
    let parsed = |slot: usize, rule: ParseRule| AnswerParse {
        outcome: ParseOutcome::Slot(slot),
        raw: raw.to_string(),
        rule_used: Some(rule),
    };

    let trimmed = raw.trim();
    // Trailing punctuation is noise ("B." names option B), but a closing
    // paren may belong to a "(B)" wrapper, so it survives this pass.
    let stripped = trimmed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() && c != ')')
        .trim_end();

    // Rule 1: bare letter, optionally wrapped in parentheses.
    let bare = if !opts.strict {
        stripped
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .map(str::trim)
            .unwrap_or(stripped)
    } else {
        stripped
    };
    let mut chars = bare.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(slot) = letter_slot(c) {
            if slot < k {
                return parsed(slot, ParseRule::Letter);
            }
        }
    }

    // Rule 2: "X: <text>", keyed on the letter alone.
    let mut chars = trimmed.chars();
    if let Some(c) = chars.next() {
        if let Some(slot) = letter_slot(c) {
            if slot < k && chars.as_str().trim_start().starts_with(':') {
                return parsed(slot, ParseRule::LetterColonText);
            }
        }
    }

    // Rule 3: the response is the full text of exactly one option.
    let mut hit: Option<usize> = None;
    for (slot, option) in displayed.iter().enumerate() {
        let option = option.trim();
        if trimmed.eq_ignore_ascii_case(option) || stripped.eq_ignore_ascii_case(option) {
            if hit.is_some() {
                return unparsed(raw);
            }
            hit = Some(slot);
        }
    }
    match hit {
        Some(slot) => parsed(slot, ParseRule::BareText),
        None => unparsed(raw),
    }
}
