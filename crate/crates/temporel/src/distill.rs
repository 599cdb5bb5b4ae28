//! Self-supervised training-corpus generation: descriptions of actual
//! future frames become pseudo reference labels for past-only windows,
//! weighted by an exponential horizon decay. No weights are trained here;
//! this module only emits the files a trainer would consume.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Clip, FrameRef};
use crate::gateway::{Model, QueryMeta, QueryRequest};
use crate::protocols::{cot_targets, CotSchedule, CotStep};
use crate::prompts;
use crate::visual_prep::{select_window, PrepError, WindowSpec};

pub const DISTILL_REF_TAG: &str = "distill.ref";
pub const DISTILL_COT_TAG: &str = "distill.cot";

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("frame preparation failure: {0}")]
    Prep(#[from] PrepError),
    #[error("clip {clip_id} has no frame at t={t}")]
    MissingFrame { clip_id: String, t: i64 },
    #[error("horizon 0 has no future to label")]
    BadHorizon,
    #[error("no horizons requested")]
    NoHorizons,
    #[error("refusing to emit an empty training file")]
    NoRecords,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad training record on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad training record on line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

/// Exponential horizon decay 2^(-Δt), exact in binary floating point.
pub fn decay_weight(delta_t: u8) -> f64 {
    2.0f64.powi(-i32::from(delta_t))
}

/// One training sample: a past-only window paired with the description of
/// the frame that actually arrived Δt seconds later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub clip_id: String,
    pub anchor_t: i64,
    pub window_frames: Vec<FrameRef>,
    pub delta_t: u8,
    pub target_text: String,
    /// Raw decay weight; normalization is the trainer's decision.
    pub weight: f64,
    /// Descriptions of the intermediate frames on the reasoning schedule,
    /// for trainers supervising the stepwise variant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot_steps: Option<Vec<CotStep>>,
}

impl PseudoLabelRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.delta_t < 1 {
            return Err("delta_t must be >= 1".to_string());
        }
        if self.weight != decay_weight(self.delta_t) {
            return Err(format!(
                "weight {} is not 2^(-{})",
                self.weight, self.delta_t
            ));
        }
        if self.target_text.is_empty() {
            return Err("empty target_text".to_string());
        }
        let labeled_t = self.anchor_t + i64::from(self.delta_t);
        if self.window_frames.iter().any(|f| f.t >= labeled_t) {
            return Err("window must precede the labeled frame".to_string());
        }
        Ok(())
    }
}

/// A horizon dropped by a gateway failure; the run continues without it.
#[derive(Debug, Clone, Serialize)]
pub struct SkippedHorizon {
    pub clip_id: String,
    pub anchor_t: i64,
    pub delta_t: u8,
    pub error: String,
}

/// Labels produced for one anchor, plus the horizons that failed.
#[derive(Debug, Default)]
pub struct DistillOutcome {
    pub records: Vec<PseudoLabelRecord>,
    pub skipped: Vec<SkippedHorizon>,
}

fn describe_frame_request(
    model: &dyn Model,
    frame: &FrameRef,
    item_id: String,
    protocol_tag: &str,
    trial_index: u32,
) -> QueryRequest {
    QueryRequest {
        prompt: prompts::render_describe_frame(),
        images: vec![frame.path.clone()],
        meta: QueryMeta {
            model_name: model.name().to_string(),
            item_id,
            trial_index,
            protocol_tag: protocol_tag.to_string(),
            correct_displayed_slot: None,
            displayed_options: None,
        },
    }
}

/// Generates one pseudo-label record per horizon by describing the actual
/// frame at `anchor_t + Δt` with the same describe template the
/// self-alignment protocol uses for its reference arm.
///
/// With `with_cot`, the frames at the intermediate reasoning targets are
/// described too and ride along as ordered steps. Missing frames are
/// precondition errors; gateway failures skip just that horizon.
pub fn generate_pseudo_labels(
    model: &dyn Model,
    clip: &Clip,
    anchor_t: i64,
    horizons: &[u8],
    with_cot: bool,
) -> Result<DistillOutcome, DistillError> {
    if horizons.is_empty() {
        return Err(DistillError::NoHorizons);
    }
    if horizons.contains(&0) {
        return Err(DistillError::BadHorizon);
    }
    let window: Vec<FrameRef> = select_window(clip, anchor_t, &WindowSpec::default())?
        .into_iter()
        .cloned()
        .collect();
    let frame_for = |delta_t: u8| {
        let t = anchor_t + i64::from(delta_t);
        clip.frame_at(t).ok_or(DistillError::MissingFrame {
            clip_id: clip.clip_id.clone(),
            t,
        })
    };
    for &delta_t in horizons {
        frame_for(delta_t)?;
        if with_cot {
            for target in cot_targets(delta_t, CotSchedule::Even) {
                frame_for(target)?;
            }
        }
    }

    let mut outcome = DistillOutcome::default();
    'horizons: for &delta_t in horizons {
        let item_id = format!("{}:{}:+{}", clip.clip_id, anchor_t, delta_t);
        let skip = |outcome: &mut DistillOutcome, error: String| {
            outcome.skipped.push(SkippedHorizon {
                clip_id: clip.clip_id.clone(),
                anchor_t,
                delta_t,
                error,
            });
        };

        let mut cot_steps = None;
        if with_cot {
            let mut steps = Vec::new();
            for (i, target) in cot_targets(delta_t, CotSchedule::Even)
                .into_iter()
                .filter(|&t| t < delta_t)
                .enumerate()
            {
                let frame = frame_for(target)?;
                let req = describe_frame_request(
                    model,
                    frame,
                    item_id.clone(),
                    DISTILL_COT_TAG,
                    i as u32 + 1,
                );
                match model.query(&req) {
                    Ok(resp) => steps.push(CotStep {
                        target_t: target,
                        description: resp.text,
                    }),
                    Err(e) => {
                        skip(&mut outcome, e.to_string());
                        continue 'horizons;
                    }
                }
            }
            cot_steps = Some(steps);
        }

        let frame = frame_for(delta_t)?;
        let req = describe_frame_request(model, frame, item_id, DISTILL_REF_TAG, 0);
        let target_text = match model.query(&req) {
            Ok(resp) => resp.text,
            Err(e) => {
                skip(&mut outcome, e.to_string());
                continue;
            }
        };
        outcome.records.push(PseudoLabelRecord {
            clip_id: clip.clip_id.clone(),
            anchor_t,
            window_frames: window.clone(),
            delta_t,
            target_text,
            weight: decay_weight(delta_t),
            cot_steps,
        });
    }
    Ok(outcome)
}

/// Streams records to a JSONL training file, one line each, in the order
/// given. Returns the number of lines written; zero records is an error so
/// an empty run cannot masquerade as a corpus.
pub fn emit_training_file<I>(records: I, path: &Path) -> Result<usize, DistillError>
where
    I: IntoIterator<Item = PseudoLabelRecord>,
{
    let mut writer = BufWriter::new(File::create(path)?);
    let mut written = 0usize;
    for record in records {
        let line = serde_json::to_string(&record)
            .map_err(|e| DistillError::Parse {
                line: written + 1,
                message: e.to_string(),
            })?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        written += 1;
    }
    if written == 0 {
        return Err(DistillError::NoRecords);
    }
    writer.flush()?;
    Ok(written)
}

/// Loads and validates a training file written by [`emit_training_file`].
pub fn load_training_file(path: &Path) -> Result<Vec<PseudoLabelRecord>, DistillError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PseudoLabelRecord =
            serde_json::from_str(&line).map_err(|e| DistillError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        record.validate().map_err(|reason| DistillError::Invalid {
            line: i + 1,
            reason,
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use crate::gateway::{MockBehavior, MockModel};
    use proptest::prelude::*;

    use super::*;

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

    fn fixed(text: &str) -> MockModel {
        MockModel::new(
            "labeler",
            MockBehavior::FixedText {
                text: text.to_string(),
            },
        )
    }

    #[test]
    fn weights_are_exact_powers_of_two() {
        assert_eq!(decay_weight(1), 0.5);
        assert_eq!(decay_weight(2), 0.25);
        assert_eq!(decay_weight(3), 0.125);
        assert_eq!(decay_weight(12), 1.0 / 4096.0);
        for dt in 1..=12u8 {
            assert_eq!(decay_weight(dt), 2.0f64.powi(-i32::from(dt)));
        }
    }

    #[test]
    fn one_record_per_horizon_with_decaying_weights() {
        let c = clip(0..=25);
        let out =
            generate_pseudo_labels(&fixed("a quiet street"), &c, 10, &[1, 2, 3], false).unwrap();
        assert!(out.skipped.is_empty());
        let weights: Vec<f64> = out.records.iter().map(|r| r.weight).collect();
        assert_eq!(weights, vec![0.5, 0.25, 0.125]);
        for r in &out.records {
            assert_eq!(r.target_text, "a quiet street");
            assert_eq!(r.window_frames.len(), 6);
            assert_eq!(r.window_frames.last().unwrap().t, 10);
            r.validate().unwrap();
        }
    }

    #[test]
    fn horizon_zero_and_empty_horizons_are_rejected() {
        let c = clip(0..=25);
        assert!(matches!(
            generate_pseudo_labels(&fixed("x"), &c, 10, &[0, 1], false),
            Err(DistillError::BadHorizon)
        ));
        assert!(matches!(
            generate_pseudo_labels(&fixed("x"), &c, 10, &[], false),
            Err(DistillError::NoHorizons)
        ));
    }

    #[test]
    fn uncovered_frames_are_precondition_errors_not_skips() {
        let c = clip(0..=12);
        assert!(matches!(
            generate_pseudo_labels(&fixed("x"), &c, 10, &[1, 5], false),
            Err(DistillError::MissingFrame { t: 15, .. })
        ));
    }

    #[test]
    fn gateway_failure_skips_only_the_failing_horizon() {
        let c = clip(0..=25);
        let model = MockModel::new(
            "labeler",
            MockBehavior::Sequence {
                responses: vec!["first".to_string()],
            },
        );
        let out = generate_pseudo_labels(&model, &c, 10, &[1, 2], false).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].delta_t, 1);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].delta_t, 2);
        assert!(out.skipped[0].error.contains("exhausted"));
    }

    #[test]
    fn reference_prompt_matches_the_self_align_reference_arm() {
        let c = clip(0..=25);
        let frame = c.frame_at(12).unwrap();
        let req = describe_frame_request(&fixed("x"), frame, "id".to_string(), DISTILL_REF_TAG, 0);
        assert_eq!(req.prompt, prompts::render_describe_frame());
    }

    #[test]
    fn cot_steps_describe_the_intermediate_targets_in_order() {
        let c = clip(0..=25);
        let model = MockModel::new(
            "labeler",
            MockBehavior::Sequence {
                responses: vec![
                    "at three".to_string(),
                    "at six".to_string(),
                    "at nine".to_string(),
                    "at twelve".to_string(),
                ],
            },
        );
        let out = generate_pseudo_labels(&model, &c, 10, &[12], true).unwrap();
        let r = &out.records[0];
        let steps = r.cot_steps.as_ref().unwrap();
        let targets: Vec<u8> = steps.iter().map(|s| s.target_t).collect();
        assert_eq!(targets, vec![3, 6, 9]);
        assert_eq!(steps[0].description, "at three");
        assert_eq!(r.target_text, "at twelve");
        r.validate().unwrap();
    }

    #[test]
    fn training_file_round_trips() {
        let c = clip(0..=25);
        let out = generate_pseudo_labels(&fixed("scene"), &c, 10, &[1, 4], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let n = emit_training_file(out.records.clone(), &path).unwrap();
        assert_eq!(n, 2);
        let loaded = load_training_file(&path).unwrap();
        assert_eq!(loaded, out.records);
    }

    #[test]
    fn emitted_field_order_is_deterministic() {
        let record = PseudoLabelRecord {
            clip_id: "c".to_string(),
            anchor_t: 5,
            window_frames: vec![FrameRef {
                t: 5,
                path: PathBuf::from("f.png"),
            }],
            delta_t: 1,
            target_text: "x".to_string(),
            weight: 0.5,
            cot_steps: None,
        };
        let line = serde_json::to_string(&record).unwrap();
        assert_eq!(
            line,
            "{\"clip_id\":\"c\",\"anchor_t\":5,\"window_frames\":[{\"t\":5,\"path\":\"f.png\"}],\
             \"delta_t\":1,\"target_text\":\"x\",\"weight\":0.5}"
        );
    }

    #[test]
    fn empty_emission_is_refused_and_bad_lines_carry_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        assert!(matches!(
            emit_training_file(Vec::new(), &path),
            Err(DistillError::NoRecords)
        ));

        std::fs::write(&path, "{\"clip_id\":\"c\"\n").unwrap();
        match load_training_file(&path) {
            Err(DistillError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error with line number, got {other:?}"),
        }

        let bad = PseudoLabelRecord {
            clip_id: "c".to_string(),
            anchor_t: 5,
            window_frames: vec![],
            delta_t: 2,
            target_text: "x".to_string(),
            weight: 0.4,
            cot_steps: None,
        };
        std::fs::write(&path, format!("{}\n", serde_json::to_string(&bad).unwrap())).unwrap();
        assert!(matches!(
            load_training_file(&path),
            Err(DistillError::Invalid { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn weight_sums_over_distinct_horizons_stay_below_one(
            mut horizons in proptest::collection::btree_set(1u8..=12, 1..12)
        ) {
            let sum: f64 = horizons.iter().map(|&dt| decay_weight(dt)).sum();
            prop_assert!(sum < 1.0, "sum {sum}");
            horizons.insert(1);
            let sum: f64 = horizons.iter().map(|&dt| decay_weight(dt)).sum();
            prop_assert!(sum < 1.0);
        }
    }
}
