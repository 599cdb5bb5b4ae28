//! Evaluation procedures run end-to-end against a gateway model: regular
//! VQA, multi-trial consistency, response-distribution estimation,
//! self-aligned future description, and chain-of-thought future reasoning.
//!
//! Every raw model interaction flows through [`crate::gateway::Model`], so
//! the same procedures drive HTTP endpoints, mocks, and replay wrappers.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{align_to_original, shuffle_options, Clip, Permutation, ShuffledItem, VqaItem};
use crate::gateway::{
    parse_option_answer, AnswerParse, GatewayError, Model, ParseOptions, QueryMeta, QueryRequest,
};
use crate::judge::{judge_score, JudgeError};
use crate::metrics;
use crate::prompts;
use crate::visual_prep::{select_window, PrepError, WindowSpec};

pub const PROTOCOL_REGULAR: &str = "regular";
pub const PROTOCOL_MULTITRIAL: &str = "multitrial";
pub const PROTOCOL_DISTRIBUTION: &str = "distribution";
pub const PROTOCOL_SELFALIGN_PRED: &str = "selfalign.pred";
pub const PROTOCOL_SELFALIGN_REF: &str = "selfalign.ref";
pub const PROTOCOL_COT_STEP: &str = "cot.step";
pub const PROTOCOL_COT_ANSWER: &str = "cot.answer";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("gateway failure: {0}")]
    Gateway(#[from] GatewayError),
    #[error("frame preparation failure: {0}")]
    Prep(#[from] PrepError),
    #[error("judge failure: {0}")]
    Judge(#[from] JudgeError),
    #[error("bad request: {reason}")]
    BadRequest { reason: String },
    #[error("empty description from the model for {item_id}, step {step}")]
    EmptyDescription { item_id: String, step: u32 },
    #[error("clip {clip_id} has no frame at t={t}")]
    MissingFrame { clip_id: String, t: i64 },
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One multiple-choice query: what was shown, what came back, and whether
/// the aligned answer was right.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Idempotency key of the underlying query; the resume unit.
    pub key: String,
    pub item_id: String,
    pub model: String,
    pub protocol_tag: String,
    pub trial_index: u32,
    pub horizon: u8,
    pub sigma: Permutation,
    /// None when the query itself failed terminally.
    pub raw_response: Option<String>,
    pub parse: AnswerParse,
    /// Answer mapped back to the original option index; None when
    /// unparseable.
    pub aligned_answer: Option<usize>,
    pub correct: bool,
    pub error: Option<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

/// Outcome of the N-trial shuffled consistency check for one item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiTrialResult {
    pub item_id: String,
    pub model: String,
    pub horizon: u8,
    pub n_trials: u32,
    /// True only if every executed trial answered correctly and none were
    /// skipped.
    pub passed: bool,
    pub trials: Vec<TrialRecord>,
    /// Trial indices not executed because an earlier trial already failed.
    pub skipped_trials: Vec<u32>,
}

/// Aligned answer counts from repeated queries under one fixed permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionEstimate {
    /// Votes per original option index, after alignment.
    pub counts: Vec<u64>,
    pub unparseable: u64,
    pub n_repeats: u32,
}

impl DistributionEstimate {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Most-voted original index, smallest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    /// Per-index vote fractions over all repeats; sums below 1 when some
    /// repeats were unparseable.
    pub fn probabilities(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / f64::from(self.n_repeats))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let total: u64 = self.counts.iter().sum::<u64>() + self.unparseable;
        if total != u64::from(self.n_repeats) {
            return Err(ProtocolError::BadRequest {
                reason: format!(
                    "distribution counts sum to {total}, expected {}",
                    self.n_repeats
                ),
            });
        }
        Ok(())
    }
}

/// Which scalar measures a predicted description against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureTag {
    Bleu3,
    Bleu4,
    RougeL,
    Meteor,
    /// LLM-as-judge integer score against the reference frame.
    Judge,
}

impl MeasureTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeasureTag::Bleu3 => "bleu3",
            MeasureTag::Bleu4 => "bleu4",
            MeasureTag::RougeL => "rouge_l",
            MeasureTag::Meteor => "meteor",
            MeasureTag::Judge => "judge",
        }
    }

    /// Inclusive score range of the measure.
    pub fn range(&self) -> (f64, f64) {
        match self {
            MeasureTag::Judge => (1.0, 10.0),
            _ => (0.0, 1.0),
        }
    }
}

/// A scored pairing of a past-only future description with the description
/// of the frame that actually arrived.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentScore {
    /// Idempotency key of the prediction query; the resume unit.
    pub key: String,
    pub clip_id: String,
    pub anchor_t: i64,
    pub delta_t: u8,
    pub pred: String,
    pub reference: String,
    /// Path of the reference frame, kept so a judge pass can re-score the
    /// prediction against the actual image later.
    pub ref_frame: PathBuf,
    pub measure: MeasureTag,
    /// None only for a judge measure whose attempts all came back
    /// unscorable.
    pub q: Option<f64>,
    pub model: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

/// One intermediate chain-of-thought prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotStep {
    /// Seconds after the window's final frame this step describes.
    pub target_t: u8,
    pub description: String,
}

/// The full reasoning chain for one item: every step description plus the
/// aligned final answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CotTrace {
    pub item_id: String,
    pub model: String,
    pub delta_t: u8,
    pub steps: Vec<CotStep>,
    pub final_answer: Option<usize>,
}

/// How intermediate chain-of-thought target times are placed when the
/// horizon exceeds the four-step cap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotSchedule {
    /// Evenly spaced targets ceil(j Δt / S) for j = 1..S.
    #[default]
    Even,
    /// The first S whole seconds, 1..S.
    Prefix,
}

/// Number of chain-of-thought steps for a horizon: the horizon itself,
/// capped at four.
pub fn cot_step_count(delta_t: u8) -> u8 {
    delta_t.min(4)
}

/// Intermediate target times for a horizon under a schedule, ending at the
/// horizon itself.
pub fn cot_targets(delta_t: u8, schedule: CotSchedule) -> Vec<u8> {
    let s = cot_step_count(delta_t);
    match schedule {
        CotSchedule::Even => (1..=u32::from(s))
            .map(|j| {
                let num = j * u32::from(delta_t) + u32::from(s) - 1;
                (num / u32::from(s)) as u8
            })
            .collect(),
        CotSchedule::Prefix => (1..=s).collect(),
    }
}

/// Applies a caller-chosen permutation to an item's options.
fn apply_sigma<'a>(item: &'a VqaItem, sigma: &Permutation, trial_index: u32) -> ShuffledItem<'a> {
    let mut displayed = vec![String::new(); item.options.len()];
    for (orig, text) in item.options.iter().enumerate() {
        let slot = sigma
            .slot_of(orig)
            .expect("sigma arity checked against item options");
        displayed[slot] = text.clone();
    }
    ShuffledItem {
        base: item,
        sigma: sigma.clone(),
        displayed_options: displayed,
        trial_index,
    }
}

/// The multiple-choice prompt an item gets: plain when the question is
/// about the shown moment, future-phrased when it targets a horizon.
fn mc_prompt(shuffled: &ShuffledItem<'_>) -> String {
    let item = shuffled.base;
    if item.horizon == 0 {
        prompts::render_mc_regular(&item.question, &shuffled.displayed_options)
    } else {
        prompts::render_mc_future(&item.question, &shuffled.displayed_options, item.horizon)
    }
}

fn mc_request(
    model: &dyn Model,
    shuffled: &ShuffledItem<'_>,
    prompt: String,
    images: Vec<PathBuf>,
    protocol_tag: &str,
) -> QueryRequest {
    QueryRequest {
        prompt,
        images,
        meta: QueryMeta {
            model_name: model.name().to_string(),
            item_id: shuffled.base.item_id.clone(),
            trial_index: shuffled.trial_index,
            protocol_tag: protocol_tag.to_string(),
            correct_displayed_slot: Some(shuffled.correct_displayed_slot()),
            displayed_options: Some(shuffled.displayed_options.clone()),
        },
    }
}

fn record_trial(
    shuffled: &ShuffledItem<'_>,
    req: &QueryRequest,
    response: Result<String, String>,
    started_unix_ms: u64,
    opts: &ParseOptions,
) -> TrialRecord {
    let item = shuffled.base;
    let (raw_response, error) = match response {
        Ok(text) => (Some(text), None),
        Err(e) => (None, Some(e)),
    };
    let parse = parse_option_answer(
        raw_response.as_deref().unwrap_or(""),
        &shuffled.displayed_options,
        opts,
    );
    let aligned_answer = parse.slot().map(|slot| {
        align_to_original(&shuffled.sigma, slot).expect("parser bounds slots to the option count")
    });
    TrialRecord {
        key: req.idempotency_key(),
        item_id: item.item_id.clone(),
        model: req.meta.model_name.clone(),
        protocol_tag: req.meta.protocol_tag.clone(),
        trial_index: shuffled.trial_index,
        horizon: item.horizon,
        sigma: shuffled.sigma.clone(),
        raw_response,
        correct: aligned_answer == Some(item.correct),
        aligned_answer,
        parse,
        error,
        started_unix_ms,
        finished_unix_ms: now_ms(),
    }
}

/// Asks the item's question once, options in original order, with the frame
/// the question refers to. A gateway failure is recorded as an unparseable
/// trial rather than an error so a batch run continues.
pub fn run_regular_vqa(
    model: &dyn Model,
    item: &VqaItem,
    frame: PathBuf,
    opts: &ParseOptions,
) -> TrialRecord {
    let shuffled = shuffle_options(item, 0, 0);
    let prompt = prompts::render_mc_regular(&item.question, &shuffled.displayed_options);
    let req = mc_request(model, &shuffled, prompt, vec![frame], PROTOCOL_REGULAR);
    let started = now_ms();
    let response = model
        .query(&req)
        .map(|r| r.text)
        .map_err(|e| e.to_string());
    record_trial(&shuffled, &req, response, started, opts)
}

/// Runs the N-trial shuffled consistency check: trial 0 shows the original
/// option order, trials 1..N use seeded shuffles, and the item passes only
/// if every trial's aligned answer is correct.
///
/// With `early_exit` the remaining trials after a failure are skipped, as
/// the pass verdict is already decided. A gateway failure aborts the item
/// with an error so the caller can mark it incomplete and resume later.
pub fn run_multi_trial(
    model: &dyn Model,
    item: &VqaItem,
    frames: &[PathBuf],
    n_trials: u32,
    global_seed: u64,
    early_exit: bool,
    opts: &ParseOptions,
) -> Result<MultiTrialResult, ProtocolError> {
    if n_trials < 1 {
        return Err(ProtocolError::BadRequest {
            reason: "n_trials must be >= 1".to_string(),
        });
    }
    let mut trials = Vec::new();
    let mut skipped_trials = Vec::new();
    let mut passed = true;
    for trial_index in 0..n_trials {
        if !passed && early_exit {
            skipped_trials.push(trial_index);
            continue;
        }
        let shuffled = shuffle_options(item, global_seed, trial_index);
        let prompt = mc_prompt(&shuffled);
        let req = mc_request(
            model,
            &shuffled,
            prompt,
            frames.to_vec(),
            PROTOCOL_MULTITRIAL,
        );
        let started = now_ms();
        let response = model.query(&req)?;
        let record = record_trial(&shuffled, &req, Ok(response.text), started, opts);
        passed &= record.correct;
        trials.push(record);
    }
    Ok(MultiTrialResult {
        item_id: item.item_id.clone(),
        model: model.name().to_string(),
        horizon: item.horizon,
        n_trials,
        passed,
        trials,
        skipped_trials,
    })
}

/// Queries the same item R times under one fixed permutation and tallies
/// the aligned answers into a vote distribution.
pub fn estimate_distribution(
    model: &dyn Model,
    item: &VqaItem,
    frames: &[PathBuf],
    n_repeats: u32,
    sigma: &Permutation,
    opts: &ParseOptions,
) -> Result<DistributionEstimate, ProtocolError> {
    if n_repeats < 1 {
        return Err(ProtocolError::BadRequest {
            reason: "n_repeats must be >= 1".to_string(),
        });
    }
    if sigma.k() != item.options.len() {
        return Err(ProtocolError::BadRequest {
            reason: format!(
                "sigma arity {} does not match {} options",
                sigma.k(),
                item.options.len()
            ),
        });
    }
    let mut counts = vec![0u64; item.options.len()];
    let mut unparseable = 0u64;
    for repeat in 0..n_repeats {
        let shuffled = apply_sigma(item, sigma, repeat);
        let prompt = mc_prompt(&shuffled);
        let req = mc_request(
            model,
            &shuffled,
            prompt,
            frames.to_vec(),
            PROTOCOL_DISTRIBUTION,
        );
        let started = now_ms();
        let response = model.query(&req)?;
        let record = record_trial(&shuffled, &req, Ok(response.text), started, opts);
        match record.aligned_answer {
            Some(orig) => counts[orig] += 1,
            None => unparseable += 1,
        }
    }
    Ok(DistributionEstimate {
        counts,
        unparseable,
        n_repeats,
    })
}

/// Asks the model to describe the scene `delta_t` seconds past the window,
/// describes the frame that actually arrived, and scores the pair.
///
/// The prediction query sees only the past window; the reference query sees
/// only the single future frame. Either query failing aborts the record so
/// the caller can mark it incomplete.
pub fn self_aligned_future(
    model: &dyn Model,
    judge_model: Option<&dyn Model>,
    clip: &Clip,
    anchor_t: i64,
    delta_t: u8,
    measure: MeasureTag,
) -> Result<AlignmentScore, ProtocolError> {
    if delta_t < 1 {
        return Err(ProtocolError::BadRequest {
            reason: "delta_t must be >= 1".to_string(),
        });
    }
    let started = now_ms();
    let window = select_window(clip, anchor_t, &WindowSpec::default())?;
    let target_t = anchor_t + i64::from(delta_t);
    let ref_frame = clip
        .frame_at(target_t)
        .ok_or_else(|| ProtocolError::MissingFrame {
            clip_id: clip.clip_id.clone(),
            t: target_t,
        })?;
    let record_id = format!("{}:{}:+{}", clip.clip_id, anchor_t, delta_t);

    let pred_req = QueryRequest {
        prompt: prompts::render_describe_future(delta_t),
        images: window.iter().map(|f| f.path.clone()).collect(),
        meta: QueryMeta {
            model_name: model.name().to_string(),
            item_id: record_id.clone(),
            trial_index: 0,
            protocol_tag: PROTOCOL_SELFALIGN_PRED.to_string(),
            correct_displayed_slot: None,
            displayed_options: None,
        },
    };
    let pred = model.query(&pred_req)?.text;

    let ref_req = QueryRequest {
        prompt: prompts::render_describe_frame(),
        images: vec![ref_frame.path.clone()],
        meta: QueryMeta {
            model_name: model.name().to_string(),
            item_id: record_id.clone(),
            trial_index: 0,
            protocol_tag: PROTOCOL_SELFALIGN_REF.to_string(),
            correct_displayed_slot: None,
            displayed_options: None,
        },
    };
    let reference = model.query(&ref_req)?.text;

    let q = match measure {
        MeasureTag::Bleu3 => Some(metrics::bleu(&pred, &reference, 3)),
        MeasureTag::Bleu4 => Some(metrics::bleu(&pred, &reference, 4)),
        MeasureTag::RougeL => Some(metrics::rouge_l(&pred, &reference)),
        MeasureTag::Meteor => Some(metrics::meteor(&pred, &reference)),
        MeasureTag::Judge => {
            let judge = judge_model.ok_or_else(|| ProtocolError::BadRequest {
                reason: "judge measure requires a judge model".to_string(),
            })?;
            judge_score(judge, &pred, &ref_frame.path, &record_id, delta_t)?
                .score
                .map(f64::from)
        }
    };
    if let Some(v) = q {
        let (lo, hi) = measure.range();
        debug_assert!((lo..=hi).contains(&v), "{} out of range for {measure:?}", v);
    }

    Ok(AlignmentScore {
        key: pred_req.idempotency_key(),
        clip_id: clip.clip_id.clone(),
        anchor_t,
        delta_t,
        pred,
        reference,
        ref_frame: ref_frame.path.clone(),
        measure,
        q,
        model: model.name().to_string(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    })
}

/// Chain-of-thought future reasoning: S = min(Δt, 4) sequential future
/// descriptions over the past window, each prompt carrying all prior step
/// descriptions, then a text-only final answer to the multiple-choice
/// question grounded in the last description.
pub fn cot_future_answer(
    model: &dyn Model,
    clip: &Clip,
    item: &VqaItem,
    schedule: CotSchedule,
    opts: &ParseOptions,
) -> Result<(CotTrace, TrialRecord), ProtocolError> {
    let delta_t = item.horizon;
    if delta_t < 1 {
        return Err(ProtocolError::BadRequest {
            reason: format!("item {} has horizon 0; reasoning needs a future", item.item_id),
        });
    }
    let window = select_window(clip, item.anchor_t, &WindowSpec::default())?;
    let images: Vec<PathBuf> = window.iter().map(|f| f.path.clone()).collect();

    let mut prior: Vec<(u8, String)> = Vec::new();
    for (step, target_t) in cot_targets(delta_t, schedule).into_iter().enumerate() {
        let req = QueryRequest {
            prompt: prompts::render_cot_step(target_t, &prior),
            images: images.clone(),
            meta: QueryMeta {
                model_name: model.name().to_string(),
                item_id: item.item_id.clone(),
                trial_index: step as u32 + 1,
                protocol_tag: PROTOCOL_COT_STEP.to_string(),
                correct_displayed_slot: None,
                displayed_options: None,
            },
        };
        let description = model.query(&req)?.text;
        if description.trim().is_empty() {
            return Err(ProtocolError::EmptyDescription {
                item_id: item.item_id.clone(),
                step: step as u32 + 1,
            });
        }
        prior.push((target_t, description));
    }

    let final_description = &prior.last().expect("at least one step ran").1;
    let shuffled = shuffle_options(item, 0, 0);
    let prompt = prompts::render_cot_answer(
        final_description,
        &item.question,
        &shuffled.displayed_options,
    );
    // The final answer is grounded in the written chain alone; no frames
    // ride along.
    let req = mc_request(model, &shuffled, prompt, Vec::new(), PROTOCOL_COT_ANSWER);
    let started = now_ms();
    let response = model.query(&req)?;
    let trial = record_trial(&shuffled, &req, Ok(response.text), started, opts);

    let trace = CotTrace {
        item_id: item.item_id.clone(),
        model: model.name().to_string(),
        delta_t,
        steps: prior
            .into_iter()
            .map(|(target_t, description)| CotStep {
                target_t,
                description,
            })
            .collect(),
        final_answer: trial.aligned_answer,
    };
    Ok((trace, trial))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use crate::corpus::{Category, FrameRef};
    use crate::gateway::{MockBehavior, MockModel};

    use super::*;

    const RELAXED: ParseOptions = ParseOptions { strict: false };

    fn item(id: &str, horizon: u8, correct: usize) -> VqaItem {
        VqaItem {
            item_id: id.to_string(),
            clip_id: "clip".to_string(),
            anchor_t: 10,
            horizon,
            question: "What happens next?".to_string(),
            options: vec![
                "stops".to_string(),
                "turns left".to_string(),
                "turns right".to_string(),
                "accelerates".to_string(),
            ],
            correct,
            categories: BTreeSet::from([Category::General]),
        }
    }

    fn clip(ts: std::ops::RangeInclusive<i64>) -> Clip {
        Clip {
            clip_id: "clip".to_string(),
            fps: 1,
            frames: ts
                .map(|t| FrameRef {
                    t,
                    path: PathBuf::from(format!("frames/{t}.png")),
                })
                .collect(),
        }
    }

    fn mock(behavior: MockBehavior) -> MockModel {
        MockModel::new("mock-model", behavior)
    }

    #[test]
    fn regular_vqa_marks_correct_and_wrong_answers() {
        let it = item("i1", 0, 2);
        let ok = run_regular_vqa(&mock(MockBehavior::AlwaysCorrect), &it, PathBuf::from("f.png"), &RELAXED);
        assert!(ok.correct);
        assert_eq!(ok.aligned_answer, Some(2));
        assert!(ok.sigma.is_identity());
        assert_eq!(ok.protocol_tag, PROTOCOL_REGULAR);

        let wrong = run_regular_vqa(
            &mock(MockBehavior::AlwaysSlot { slot: 0 }),
            &it,
            PathBuf::from("f.png"),
            &RELAXED,
        );
        assert!(!wrong.correct);
        assert_eq!(wrong.aligned_answer, Some(0));
    }

    #[test]
    fn regular_vqa_treats_prose_as_unparseable() {
        let it = item("i1", 0, 0);
        let rec = run_regular_vqa(
            &mock(MockBehavior::FixedText {
                text: "The answer is A".to_string(),
            }),
            &it,
            PathBuf::from("f.png"),
            &RELAXED,
        );
        assert!(!rec.correct);
        assert_eq!(rec.aligned_answer, None);
        assert!(rec.parse.slot().is_none());
    }

    #[test]
    fn regular_vqa_records_gateway_failures_as_unparseable() {
        let it = item("i1", 0, 0);
        let model = mock(MockBehavior::Sequence { responses: vec![] });
        let rec = run_regular_vqa(&model, &it, PathBuf::from("f.png"), &RELAXED);
        assert!(!rec.correct);
        assert!(rec.raw_response.is_none());
        assert!(rec.error.as_deref().unwrap_or("").contains("exhausted"));
    }

    #[test]
    fn multi_trial_passes_a_consistently_correct_model() {
        let it = item("i1", 4, 1);
        let res = run_multi_trial(
            &mock(MockBehavior::AlwaysCorrect),
            &it,
            &[PathBuf::from("f.png")],
            4,
            7,
            true,
            &RELAXED,
        )
        .unwrap();
        assert!(res.passed);
        assert_eq!(res.trials.len(), 4);
        assert!(res.skipped_trials.is_empty());
        assert!(res.trials[0].sigma.is_identity());
        assert!(res.trials.iter().all(|t| t.correct));
    }

    /// A seed where some later trial shuffles original index 0 off slot 0,
    /// so a slot-0-biased model must fail.
    fn seed_with_nonidentity_shuffle(it: &VqaItem) -> u64 {
        (0..)
            .find(|&seed| {
                (1..4).any(|trial| {
                    let s = shuffle_options(it, seed, trial);
                    s.sigma.slot_of(0) != Some(0)
                })
            })
            .unwrap()
    }

    #[test]
    fn multi_trial_fails_a_position_biased_model_and_skips_the_rest() {
        let it = item("i1", 4, 0);
        let seed = seed_with_nonidentity_shuffle(&it);
        let res = run_multi_trial(
            &mock(MockBehavior::AlwaysSlot { slot: 0 }),
            &it,
            &[],
            4,
            seed,
            true,
            &RELAXED,
        )
        .unwrap();
        assert!(!res.passed);
        let failing = res.trials.iter().find(|t| !t.correct).unwrap();
        assert!(failing.trial_index > 0, "trial 0 shows the original order");
        assert_eq!(
            res.trials.len() + res.skipped_trials.len(),
            4,
            "every index is either executed or skipped"
        );
        let full = run_multi_trial(
            &mock(MockBehavior::AlwaysSlot { slot: 0 }),
            &it,
            &[],
            4,
            seed,
            false,
            &RELAXED,
        )
        .unwrap();
        assert!(!full.passed);
        assert_eq!(full.trials.len(), 4);
        assert!(full.skipped_trials.is_empty());
    }

    #[test]
    fn multi_trial_pass_implies_the_unshuffled_trial_was_correct() {
        for correct in 0..4 {
            for slot in 0..4 {
                let it = item(&format!("i{correct}{slot}"), 2, correct);
                let res = run_multi_trial(
                    &mock(MockBehavior::AlwaysSlot { slot }),
                    &it,
                    &[],
                    4,
                    13,
                    true,
                    &RELAXED,
                )
                .unwrap();
                if res.passed {
                    assert!(res.trials[0].correct);
                }
                let single =
                    run_regular_vqa(&mock(MockBehavior::AlwaysSlot { slot }), &it, PathBuf::new(), &RELAXED);
                assert_eq!(res.trials[0].correct, single.correct);
            }
        }
    }

    #[test]
    fn multi_trial_bubbles_gateway_failure_for_resume() {
        let it = item("i1", 2, 0);
        let model = mock(MockBehavior::Sequence {
            responses: vec!["A".to_string()],
        });
        let err = run_multi_trial(&model, &it, &[], 4, 7, true, &RELAXED).unwrap_err();
        assert!(matches!(err, ProtocolError::Gateway(_)));
    }

    #[test]
    fn distribution_estimate_counts_a_deterministic_model() {
        let it = item("i1", 0, 3);
        let est = estimate_distribution(
            &mock(MockBehavior::AlwaysSlot { slot: 1 }),
            &it,
            &[],
            8,
            &Permutation::identity(4),
            &RELAXED,
        )
        .unwrap();
        assert_eq!(est.counts, vec![0, 8, 0, 0]);
        assert_eq!(est.unparseable, 0);
        est.validate().unwrap();
        assert_eq!(est.argmax(), 1);
        assert_eq!(est.probabilities(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    fn alternating(n: u32) -> MockModel {
        let responses = (0..n)
            .map(|i| if i % 2 == 0 { "A".to_string() } else { "B".to_string() })
            .collect();
        mock(MockBehavior::Sequence { responses })
    }

    #[test]
    fn distribution_estimate_aligns_counts_through_sigma() {
        let it = item("i1", 0, 0);
        let est =
            estimate_distribution(&alternating(8), &it, &[], 8, &Permutation::identity(4), &RELAXED).unwrap();
        assert_eq!(est.counts, vec![4, 4, 0, 0]);

        let swap = Permutation::from_slots(vec![2, 1, 0, 3]).unwrap();
        let est = estimate_distribution(&alternating(8), &it, &[], 8, &swap, &RELAXED).unwrap();
        assert_eq!(est.counts, vec![0, 4, 4, 0]);
    }

    #[test]
    fn distribution_estimate_counts_unparseable_repeats() {
        let it = item("i1", 0, 0);
        let est = estimate_distribution(
            &mock(MockBehavior::FixedText {
                text: "no idea".to_string(),
            }),
            &it,
            &[],
            5,
            &Permutation::identity(4),
            &RELAXED,
        )
        .unwrap();
        assert_eq!(est.counts, vec![0, 0, 0, 0]);
        assert_eq!(est.unparseable, 5);
        est.validate().unwrap();
    }

    #[test]
    fn distribution_estimate_rejects_bad_arity() {
        let it = item("i1", 0, 0);
        let err = estimate_distribution(
            &mock(MockBehavior::AlwaysCorrect),
            &it,
            &[],
            4,
            &Permutation::identity(3),
            &RELAXED,
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::BadRequest { .. }));
    }

    #[test]
    fn argmax_breaks_ties_toward_the_smallest_index() {
        let est = DistributionEstimate {
            counts: vec![3, 5, 5, 0],
            unparseable: 0,
            n_repeats: 13,
        };
        assert_eq!(est.argmax(), 1);
    }

    #[test]
    fn self_aligned_identical_descriptions_score_perfect_bleu() {
        let c = clip(0..=20);
        let model = mock(MockBehavior::FixedText {
            text: "a red car waits at the light".to_string(),
        });
        let score = self_aligned_future(&model, None, &c, 10, 3, MeasureTag::Bleu4).unwrap();
        assert_eq!(score.q, Some(1.0));
        assert_eq!(score.delta_t, 3);
        assert_eq!(score.ref_frame, PathBuf::from("frames/13.png"));
        assert_eq!(score.pred, score.reference);
    }

    #[test]
    fn self_aligned_disjoint_descriptions_score_zero_rouge() {
        let c = clip(0..=20);
        let model = mock(MockBehavior::Sequence {
            responses: vec![
                "alpha beta gamma".to_string(),
                "delta epsilon zeta".to_string(),
            ],
        });
        let score = self_aligned_future(&model, None, &c, 10, 2, MeasureTag::RougeL).unwrap();
        assert_eq!(score.q, Some(0.0));
    }

    #[test]
    fn self_aligned_rouge_worked_example() {
        let c = clip(0..=20);
        let model = mock(MockBehavior::Sequence {
            responses: vec![
                "a red car turns left".to_string(),
                "a red car turns right".to_string(),
            ],
        });
        let score = self_aligned_future(&model, None, &c, 10, 1, MeasureTag::RougeL).unwrap();
        let q = score.q.unwrap();
        assert!((q - 0.8).abs() < 1e-12, "got {q}");
    }

    #[test]
    fn self_aligned_requires_covered_frames() {
        let c = clip(0..=12);
        let model = mock(MockBehavior::FixedText { text: "x".to_string() });
        let err = self_aligned_future(&model, None, &c, 10, 5, MeasureTag::Bleu3).unwrap_err();
        assert!(matches!(err, ProtocolError::MissingFrame { t: 15, .. }));
        let err = self_aligned_future(&model, None, &c, 3, 2, MeasureTag::Bleu3).unwrap_err();
        assert!(matches!(err, ProtocolError::Prep(_)));
    }

    #[test]
    fn self_aligned_judge_measure_requires_a_judge() {
        let c = clip(0..=20);
        let model = mock(MockBehavior::FixedText { text: "x".to_string() });
        let err = self_aligned_future(&model, None, &c, 10, 1, MeasureTag::Judge).unwrap_err();
        assert!(matches!(err, ProtocolError::BadRequest { .. }));
    }

    #[test]
    fn self_aligned_judge_measure_scores_through_the_judge() {
        let c = clip(0..=20);
        let model = mock(MockBehavior::FixedText {
            text: "a quiet intersection".to_string(),
        });
        let judge = mock(MockBehavior::FixedText {
            text: "Score: 8".to_string(),
        });
        let score =
            self_aligned_future(&model, Some(&judge), &c, 10, 2, MeasureTag::Judge).unwrap();
        assert_eq!(score.q, Some(8.0));
    }

    #[test]
    fn cot_step_counts_and_targets() {
        assert_eq!(cot_step_count(1), 1);
        assert_eq!(cot_step_count(4), 4);
        assert_eq!(cot_step_count(12), 4);
        assert_eq!(cot_targets(2, CotSchedule::Even), vec![1, 2]);
        assert_eq!(cot_targets(12, CotSchedule::Even), vec![3, 6, 9, 12]);
        assert_eq!(cot_targets(12, CotSchedule::Prefix), vec![1, 2, 3, 4]);
        assert_eq!(cot_targets(7, CotSchedule::Even), vec![2, 4, 6, 7]);
        assert_eq!(cot_targets(4, CotSchedule::Even), vec![1, 2, 3, 4]);
    }

    #[test]
    fn cot_runs_one_call_per_step_plus_the_answer() {
        let c = clip(0..=20);
        let it = item("i1", 2, 1);
        let model = mock(MockBehavior::Sequence {
            responses: vec![
                "the car keeps moving".to_string(),
                "the car is about to turn".to_string(),
                "B".to_string(),
            ],
        });
        let (trace, trial) = cot_future_answer(&model, &c, &it, CotSchedule::Even, &RELAXED).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert_eq!(trace.steps[0].target_t, 1);
        assert_eq!(trace.steps[1].target_t, 2);
        assert_eq!(trace.final_answer, Some(1));
        assert!(trial.correct);
        assert_eq!(trial.protocol_tag, PROTOCOL_COT_ANSWER);
        // The scripted responses are exactly consumed: 2 steps + 1 answer.
        let extra = QueryRequest {
            prompt: "anything".to_string(),
            images: vec![],
            meta: QueryMeta {
                model_name: "mock-model".to_string(),
                item_id: "probe".to_string(),
                trial_index: 0,
                protocol_tag: "probe".to_string(),
                correct_displayed_slot: None,
                displayed_options: None,
            },
        };
        assert!(matches!(
            model.query(&extra),
            Err(GatewayError::SequenceExhausted { served: 3 })
        ));
    }

    #[test]
    fn cot_long_horizon_uses_four_even_steps() {
        let c = clip(0..=30);
        let it = item("i1", 12, 0);
        let model = mock(MockBehavior::Sequence {
            responses: vec![
                "d1".to_string(),
                "d2".to_string(),
                "d3".to_string(),
                "d4".to_string(),
                "A".to_string(),
            ],
        });
        let (trace, trial) = cot_future_answer(&model, &c, &it, CotSchedule::Even, &RELAXED).unwrap();
        let targets: Vec<u8> = trace.steps.iter().map(|s| s.target_t).collect();
        assert_eq!(targets, vec![3, 6, 9, 12]);
        assert!(trial.correct);
    }

    #[test]
    fn cot_rejects_horizon_zero_and_empty_descriptions() {
        let c = clip(0..=20);
        let now = item("i1", 0, 0);
        let model = mock(MockBehavior::AlwaysCorrect);
        assert!(matches!(
            cot_future_answer(&model, &c, &now, CotSchedule::Even, &RELAXED),
            Err(ProtocolError::BadRequest { .. })
        ));

        let it = item("i2", 2, 0);
        let blank = mock(MockBehavior::Sequence {
            responses: vec!["  ".to_string()],
        });
        assert!(matches!(
            cot_future_answer(&blank, &c, &it, CotSchedule::Even, &RELAXED),
            Err(ProtocolError::EmptyDescription { step: 1, .. })
        ));
    }

    #[test]
    fn trial_records_round_trip_through_json() {
        let it = item("i1", 3, 1);
        let rec = run_regular_vqa(&mock(MockBehavior::AlwaysCorrect), &it, PathBuf::from("f.png"), &RELAXED);
        let json = serde_json::to_string(&rec).unwrap();
        let back: TrialRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.key, rec.key);
        assert_eq!(back.aligned_answer, rec.aligned_answer);
        assert_eq!(back.sigma.slots(), rec.sigma.slots());
    }
}
