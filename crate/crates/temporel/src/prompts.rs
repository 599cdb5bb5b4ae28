//! Versioned prompt templates.
//!
//! Templates are fixed text assets compiled into the binary; nothing about
//! an item other than its question, options, and timing parameters reaches
//! the prompt. [`template_hashes`] fingerprints every template so a run's
//! metadata pins exactly which wording produced its results.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

/// Bumped whenever any template text changes incompatibly.
pub const PROMPT_VERSION: &str = "1";

const MC_REGULAR: &str = include_str!("../assets/mc_regular.txt");
const MC_FUTURE: &str = include_str!("../assets/mc_future.txt");
const DESCRIBE_FRAME: &str = include_str!("../assets/describe_frame.txt");
const DESCRIBE_FUTURE: &str = include_str!("../assets/describe_future.txt");
const COT_STEP: &str = include_str!("../assets/cot_step.txt");
const COT_ANSWER: &str = include_str!("../assets/cot_answer.txt");
const JUDGE: &str = include_str!("../assets/judge.txt");
const DISTRACTORS: &str = include_str!("../assets/distractors.txt");

const ALL: [(&str, &str); 8] = [
    ("mc_regular", MC_REGULAR),
    ("mc_future", MC_FUTURE),
    ("describe_frame", DESCRIBE_FRAME),
    ("describe_future", DESCRIBE_FUTURE),
    ("cot_step", COT_STEP),
    ("cot_answer", COT_ANSWER),
    ("judge", JUDGE),
    ("distractors", DISTRACTORS),
];

/// SHA-256 of each template's raw text, keyed by template name.
pub fn template_hashes() -> BTreeMap<String, String> {
    ALL.iter()
        .map(|(name, text)| (name.to_string(), hex::encode(Sha256::digest(text.as_bytes()))))
        .collect()
}

/// Options rendered one per line as `A: <text>`.
pub fn render_options(displayed: &[String]) -> String {
    displayed
        .iter()
        .enumerate()
        .map(|(slot, text)| {
            let letter = crate::gateway::option_letter(slot).expect("option count <= 26");
            format!("{letter}: {text}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Multiple-choice question about a visible frame.
pub fn render_mc_regular(question: &str, displayed: &[String]) -> String {
    MC_REGULAR
        .replace("{question}", question)
        .replace("{options}", &render_options(displayed))
        .trim_end()
        .to_string()
}

/// Multiple-choice question about the scene `delta_t` seconds past the last
/// visible frame.
pub fn render_mc_future(question: &str, displayed: &[String], delta_t: u8) -> String {
    MC_FUTURE
        .replace("{delta_t}", &delta_t.to_string())
        .replace("{question}", question)
        .replace("{options}", &render_options(displayed))
        .trim_end()
        .to_string()
}

/// Factual description of a single visible frame.
pub fn render_describe_frame() -> String {
    DESCRIBE_FRAME.trim_end().to_string()
}

/// One-shot prediction of the scene `delta_t` seconds ahead.
pub fn render_describe_future(delta_t: u8) -> String {
    DESCRIBE_FUTURE
        .replace("{delta_t}", &delta_t.to_string())
        .trim_end()
        .to_string()
}

/// Chained prediction step targeting `target_t` seconds ahead, shown all
/// prior step descriptions as `(seconds, text)` pairs.
pub fn render_cot_step(target_t: u8, prior: &[(u8, String)]) -> String {
    let prior_block = if prior.is_empty() {
        String::new()
    } else {
        let lines = prior
            .iter()
            .map(|(t, d)| format!("After {t} s: {d}"))
            .collect::<Vec<_>>()
            .join("\n");
        format!("\n\nPredictions so far:\n{lines}")
    };
    COT_STEP
        .replace("{prior_block}", &prior_block)
        .replace("{target_t}", &target_t.to_string())
        .trim_end()
        .to_string()
}

/// Final answer call of the chained protocol: the accumulated description
/// plus the question, with no frames attached.
pub fn render_cot_answer(final_description: &str, question: &str, displayed: &[String]) -> String {
    COT_ANSWER
        .replace("{description}", final_description)
        .replace("{question}", question)
        .replace("{options}", &render_options(displayed))
        .trim_end()
        .to_string()
}

/// Judge prompt grading a description against a frame. The description is
/// embedded as a JSON string literal so any delimiter characters round-trip.
pub fn render_judge(description: &str) -> String {
    let literal = serde_json::to_string(description).expect("string serializes");
    JUDGE.replace("{description}", &literal).trim_end().to_string()
}

/// Marker preceding the embedded description in the judge template.
pub const JUDGE_DESCRIPTION_MARKER: &str = "Description (JSON string): ";

/// Distractor-generation prompt.
pub fn render_distractors(question: &str, correct: &str, k: usize) -> String {
    DISTRACTORS
        .replace("{k}", &k.to_string())
        .replace("{question}", question)
        .replace("{correct}", correct)
        .trim_end()
        .to_string()
}
