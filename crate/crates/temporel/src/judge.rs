//! LLM-as-judge scoring of predicted scene descriptions.
//!
//! A judge model sees the prediction text and the frame that actually
//! arrived, and returns an integer score from 1 to 10. Scores that cannot
//! be parsed after the retry budget are recorded as missing and excluded
//! from aggregates, never coerced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, Model, QueryMeta, QueryRequest};
use crate::prompts;

/// Total queries allowed per description before recording a missing score.
pub const JUDGE_MAX_ATTEMPTS: u32 = 3;

pub const JUDGE_PROTOCOL_TAG: &str = "judge";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("gateway failure: {0}")]
    Gateway(#[from] GatewayError),
    #[error("cannot judge an empty description")]
    EmptyDescription,
}

/// One judged description: the score if any attempt produced one, plus
/// enough context to audit the verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeScore {
    /// Idempotency key of the first judge attempt; the resume unit.
    pub key: String,
    pub item_id: String,
    pub delta_t: u8,
    /// None after every attempt came back without a standalone 1..=10.
    pub score: Option<u8>,
    /// Raw text of the last attempt.
    pub raw: String,
    pub judge_model: String,
    pub attempts: u32,
}

/// Extracts the first standalone integer in 1..=10.
///
/// Standalone means not embedded in a word and not part of a decimal
/// number, so "Score: 7" and "10/10" parse while "7.5" does not.
pub fn parse_judge_score(raw: &str) -> Option<u8> {
    let chars: Vec<char> = raw.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let standalone_before = start == 0 || {
            let prev = chars[start - 1];
            !prev.is_alphanumeric() && !(prev == '.' && start >= 2 && chars[start - 2].is_ascii_digit())
        };
        let standalone_after = i == chars.len() || {
            let next = chars[i];
            !next.is_alphanumeric() && !(next == '.' && i + 1 < chars.len() && chars[i + 1].is_ascii_digit())
        };
        if standalone_before && standalone_after && i - start <= 2 {
            let value: u32 = chars[start..i].iter().collect::<String>().parse().ok()?;
            if (1..=10).contains(&value) {
                return Some(value as u8);
            }
        }
    }
    None
}

/// Builds the judge request: the fixed template with the description
/// embedded as an escaped JSON string, plus the reference frame image.
pub fn build_judge_prompt(
    judge_name: &str,
    pred_description: &str,
    frame: &Path,
    item_id: &str,
    attempt: u32,
) -> Result<QueryRequest, JudgeError> {
    if pred_description.trim().is_empty() {
        return Err(JudgeError::EmptyDescription);
    }
    Ok(QueryRequest {
        prompt: prompts::render_judge(pred_description),
        images: vec![frame.to_path_buf()],
        meta: QueryMeta {
            model_name: judge_name.to_string(),
            item_id: item_id.to_string(),
            trial_index: attempt,
            protocol_tag: JUDGE_PROTOCOL_TAG.to_string(),
            correct_displayed_slot: None,
            displayed_options: None,
        },
    })
}

/// Recovers the embedded description from a judge prompt by parsing the
/// JSON string literal after the marker; the inverse of
/// [`build_judge_prompt`]'s escaping.
pub fn extract_description(prompt: &str) -> Option<String> {
    let start = prompt.find(prompts::JUDGE_DESCRIPTION_MARKER)?
        + prompts::JUDGE_DESCRIPTION_MARKER.len();
    serde_json::Deserializer::from_str(&prompt[start..])
        .into_iter::<String>()
        .next()?
        .ok()
}

/// Scores one description against its reference frame, retrying the query
/// with fresh idempotency keys until a score parses or the attempt budget
/// runs out. Terminal gateway failures abort so the record stays
/// incomplete for resume.
pub fn judge_score(
    judge_model: &dyn Model,
    pred_description: &str,
    frame: &Path,
    item_id: &str,
    delta_t: u8,
) -> Result<JudgeScore, JudgeError> {
    let mut first_key = None;
    let mut last_raw = String::new();
    for attempt in 0..JUDGE_MAX_ATTEMPTS {
        let req = build_judge_prompt(
            judge_model.name(),
            pred_description,
            frame,
            item_id,
            attempt,
        )?;
        if first_key.is_none() {
            first_key = Some(req.idempotency_key());
        }
        let response = judge_model.query(&req)?;
        last_raw = response.text;
        if let Some(score) = parse_judge_score(&last_raw) {
            return Ok(JudgeScore {
                key: first_key.expect("set above"),
                item_id: item_id.to_string(),
                delta_t,
                score: Some(score),
                raw: last_raw,
                judge_model: judge_model.name().to_string(),
                attempts: attempt + 1,
            });
        }
    }
    Ok(JudgeScore {
        key: first_key.expect("attempt budget is nonzero"),
        item_id: item_id.to_string(),
        delta_t,
        score: None,
        raw: last_raw,
        judge_model: judge_model.name().to_string(),
        attempts: JUDGE_MAX_ATTEMPTS,
    })
}

/// Mean judge score at one horizon, over present scores only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeAggregate {
    pub delta_t: u8,
    /// None when every score at this horizon is missing.
    pub mean: Option<f64>,
    pub n_scored: usize,
    pub n_missing: usize,
}

/// Groups scores by horizon and averages the present ones; missing counts
/// ride alongside so exclusion is visible.
pub fn s_at_t(scores: &[JudgeScore]) -> Vec<JudgeAggregate> {
    let mut groups: BTreeMap<u8, (u64, usize, usize)> = BTreeMap::new();
    for s in scores {
        let entry = groups.entry(s.delta_t).or_insert((0, 0, 0));
        match s.score {
            Some(v) => {
                entry.0 += u64::from(v);
                entry.1 += 1;
            }
            None => entry.2 += 1,
        }
    }
    groups
        .into_iter()
        .map(|(delta_t, (sum, n_scored, n_missing))| JudgeAggregate {
            delta_t,
            mean: (n_scored > 0).then(|| sum as f64 / n_scored as f64),
            n_scored,
            n_missing,
        })
        .collect()
}
