//! Corpus loading, option shuffling, and dataset diagnostics.
//!
//! A corpus file is JSONL with two record kinds:
//!
//! ```text
//! {"kind":"clip","clip_id":"c01","fps":1,"frames":[{"t":0,"path":"f0.png"},{"t":1,"path":"f1.png"}]}
//! {"kind":"item","item_id":"q01","clip_id":"c01","anchor_t":5,"horizon":3,
//!  "question":"...","options":["A text","B text"],"correct":0,"categories":["General"]}
//! ```
//!
//! Items reference clips by id, carry a future horizon in seconds (0 means the
//! question is about a visible frame), and a set of overlapping categories.
//! Option shuffling is fully deterministic in `(global_seed, item_id,
//! trial_index)`, with trial 0 pinned to the identity permutation so that
//! single-trial accuracy is always recoverable from a multi-trial run.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{Model, QueryMeta, QueryRequest};
use crate::prompts;

/// Maximum option count renderable as letters A..Z.
pub const MAX_OPTIONS: usize = 26;

/// Highest supported future horizon in seconds.
pub const MAX_HORIZON: u8 = 12;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate clip_id {clip_id:?}")]
    DuplicateClip { clip_id: String, line: usize },
    #[error("line {line}: duplicate item_id {item_id:?}")]
    DuplicateItem { item_id: String, line: usize },
    #[error("item {item_id:?} references unknown clip {clip_id:?}")]
    DanglingClip { item_id: String, clip_id: String },
    #[error("clip {clip_id:?}: {reason}")]
    BadClip { clip_id: String, reason: String },
    #[error("item {item_id:?}: {reason}")]
    BadItem { item_id: String, reason: String },
    #[error("displayed slot {slot} out of range for {k} options")]
    SlotOutOfRange { slot: usize, k: usize },
    #[error("permutation {slots:?} is not a bijection on 0..{k}")]
    NotBijective { slots: Vec<usize>, k: usize },
    #[error("diversity stats need at least one question with at least one token")]
    EmptyStats,
    #[error("distractor generation produced {got} usable candidates, need {want}")]
    TooFewDistractors { got: usize, want: usize },
    #[error("distractor query failed: {0}")]
    DistractorQuery(#[from] crate::gateway::GatewayError),
}

/// Question category; an item may belong to several.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Category {
    Hallucination,
    General,
    TrafficUnderstanding,
    AbsoluteLocation,
    RelativePosition,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Hallucination,
        Category::General,
        Category::TrafficUnderstanding,
        Category::AbsoluteLocation,
        Category::RelativePosition,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Hallucination => "Hallucination",
            Category::General => "General",
            Category::TrafficUnderstanding => "TrafficUnderstanding",
            Category::AbsoluteLocation => "AbsoluteLocation",
            Category::RelativePosition => "RelativePosition",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One frame of a clip: integer timestamp in seconds plus an image path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub t: i64,
    pub path: PathBuf,
}

/// A driving clip sampled at a nominal rate (default 1 frame per second).
///
/// Frame timestamps are strictly increasing; every frame has a non-empty path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: String,
    #[serde(default = "default_fps")]
    pub fps: u32,
    pub frames: Vec<FrameRef>,
}

fn default_fps() -> u32 {
    1
}

impl Clip {
    /// Looks up the frame at exactly timestamp `t`.
    pub fn frame_at(&self, t: i64) -> Option<&FrameRef> {
        self.frames
            .binary_search_by_key(&t, |f| f.t)
            .ok()
            .map(|i| &self.frames[i])
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |reason: &str| CorpusError::BadClip {
            clip_id: self.clip_id.clone(),
            reason: reason.to_string(),
        };
        if self.frames.is_empty() {
            return Err(bad("no frames"));
        }
        if self.fps == 0 {
            return Err(bad("fps must be >= 1"));
        }
        for w in self.frames.windows(2) {
            if w[1].t <= w[0].t {
                return Err(bad(&format!(
                    "frame timestamps not strictly increasing ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        if self.frames.iter().any(|f| f.path.as_os_str().is_empty()) {
            return Err(bad("empty frame path"));
        }
        Ok(())
    }
}

/// One multiple-choice question anchored to a clip timestamp.
///
/// `horizon` is how many seconds past `anchor_t` the queried scene lies;
/// 0 means the question is about the anchor frame itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaItem {
    pub item_id: String,
    pub clip_id: String,
    pub anchor_t: i64,
    pub horizon: u8,
    pub question: String,
    pub options: Vec<String>,
    pub correct: usize,
    pub categories: BTreeSet<Category>,
}

impl VqaItem {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |reason: String| CorpusError::BadItem {
            item_id: self.item_id.clone(),
            reason,
        };
        if self.options.len() < 2 {
            return Err(bad("fewer than 2 options".into()));
        }
        if self.options.len() > MAX_OPTIONS {
            return Err(bad(format!("more than {MAX_OPTIONS} options")));
        }
        if self.correct >= self.options.len() {
            return Err(bad(format!(
                "correct index {} out of range for {} options",
                self.correct,
                self.options.len()
            )));
        }
        let mut seen = HashSet::new();
        for opt in &self.options {
            if !seen.insert(opt.as_str()) {
                return Err(bad(format!("duplicate option text {opt:?}")));
            }
        }
        if self.horizon > MAX_HORIZON {
            return Err(bad(format!(
                "horizon {} exceeds maximum {MAX_HORIZON}",
                self.horizon
            )));
        }
        if self.categories.is_empty() {
            return Err(bad("no categories".into()));
        }
        Ok(())
    }
}

/// A bijection from original option indices to displayed slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    slot_of: Vec<usize>,
}

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Permutation {
            slot_of: (0..k).collect(),
        }
    }

    /// Builds a permutation from `slots[original] = displayed slot`,
    /// rejecting non-bijections.
    pub fn from_slots(slots: Vec<usize>) -> Result<Self, CorpusError> {
        let k = slots.len();
        let mut seen = vec![false; k];
        for &s in &slots {
            if s >= k || seen[s] {
                return Err(CorpusError::NotBijective { slots, k });
            }
            seen[s] = true;
        }
        Ok(Permutation { slot_of: slots })
    }

    pub fn k(&self) -> usize {
        self.slot_of.len()
    }

    /// Displayed slot of an original option index.
    pub fn slot_of(&self, original: usize) -> Option<usize> {
        self.slot_of.get(original).copied()
    }

    /// Original option index shown at a displayed slot.
    pub fn original_of(&self, slot: usize) -> Option<usize> {
        self.slot_of.iter().position(|&s| s == slot)
    }

    pub fn is_identity(&self) -> bool {
        self.slot_of.iter().enumerate().all(|(i, &s)| i == s)
    }

    pub fn slots(&self) -> &[usize] {
        &self.slot_of
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = CorpusError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Permutation::from_slots(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Vec<usize> {
        p.slot_of
    }
}

/// An item with its options reordered for one trial.
#[derive(Debug, Clone)]
pub struct ShuffledItem<'a> {
    pub base: &'a VqaItem,
    pub sigma: Permutation,
    pub displayed_options: Vec<String>,
    pub trial_index: u32,
}

impl ShuffledItem<'_> {
    /// Displayed slot currently holding the correct option.
    pub fn correct_displayed_slot(&self) -> usize {
        self.sigma
            .slot_of(self.base.correct)
            .expect("sigma arity matches option count")
    }
}

/// Reorders an item's options for the given trial.
///
/// Trial 0 always uses the identity permutation; trials >= 1 draw a uniform
/// permutation from a ChaCha stream keyed by `(global_seed, item_id,
/// trial_index)`, so schedules are reproducible across runs and machines.
pub fn shuffle_options(item: &VqaItem, global_seed: u64, trial_index: u32) -> ShuffledItem<'_> {
    let k = item.options.len();
    let sigma = if trial_index == 0 {
        Permutation::identity(k)
    } else {
        let mut rng = ChaCha8Rng::from_seed(shuffle_seed(global_seed, &item.item_id, trial_index));
        // shown[slot] = original index displayed at that slot
        let mut shown: Vec<usize> = (0..k).collect();
        shown.shuffle(&mut rng);
        let mut slot_of = vec![0usize; k];
        for (slot, &orig) in shown.iter().enumerate() {
            slot_of[orig] = slot;
        }
        Permutation { slot_of }
    };
    let mut displayed = vec![String::new(); k];
    for (orig, text) in item.options.iter().enumerate() {
        displayed[sigma.slot_of(orig).expect("orig < k")] = text.clone();
    }
    ShuffledItem {
        base: item,
        sigma,
        displayed_options: displayed,
        trial_index,
    }
}

fn shuffle_seed(global_seed: u64, item_id: &str, trial_index: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"temporel.shuffle.v1");
    h.update(global_seed.to_le_bytes());
    h.update((item_id.len() as u64).to_le_bytes());
    h.update(item_id.as_bytes());
    h.update(trial_index.to_le_bytes());
    h.finalize().into()
}

/// Maps a displayed slot back to the original option index under `sigma`.
pub fn align_to_original(sigma: &Permutation, displayed_slot: usize) -> Result<usize, CorpusError> {
    sigma
        .original_of(displayed_slot)
        .ok_or(CorpusError::SlotOutOfRange {
            slot: displayed_slot,
            k: sigma.k(),
        })
}

/// Loaded corpus with an id index over clips.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clips: Vec<Clip>,
    pub items: Vec<VqaItem>,
    clip_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(clips: Vec<Clip>, items: Vec<VqaItem>) -> Result<Self, CorpusError> {
        for c in &clips {
            c.validate()?;
        }
        for it in &items {
            it.validate()?;
        }
        let mut clip_index = HashMap::new();
        for (i, c) in clips.iter().enumerate() {
            if clip_index.insert(c.clip_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateClip {
                    clip_id: c.clip_id.clone(),
                    line: 0,
                });
            }
        }
        for it in &items {
            if !clip_index.contains_key(&it.clip_id) {
                return Err(CorpusError::DanglingClip {
                    item_id: it.item_id.clone(),
                    clip_id: it.clip_id.clone(),
                });
            }
        }
        Ok(Corpus {
            clips,
            items,
            clip_index,
        })
    }

    pub fn clip(&self, clip_id: &str) -> Option<&Clip> {
        self.clip_index.get(clip_id).map(|&i| &self.clips[i])
    }

    /// Item counts per horizon 0..=12.
    pub fn horizon_histogram(&self) -> [usize; MAX_HORIZON as usize + 1] {
        let mut hist = [0usize; MAX_HORIZON as usize + 1];
        for it in &self.items {
            hist[it.horizon as usize] += 1;
        }
        hist
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RawRecord {
    Clip(Clip),
    Item(VqaItem),
}

/// Loads a JSONL corpus, validating every record and referential integrity.
///
/// Errors carry the 1-based line number for parse failures and duplicate ids.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut clips = Vec::new();
    let mut items = Vec::new();
    let mut clip_lines: HashMap<String, usize> = HashMap::new();
    let mut item_lines: HashMap<String, usize> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        match record {
            RawRecord::Clip(clip) => {
                clip.validate()?;
                if clip_lines.insert(clip.clip_id.clone(), line_no).is_some() {
                    return Err(CorpusError::DuplicateClip {
                        clip_id: clip.clip_id,
                        line: line_no,
                    });
                }
                clips.push(clip);
            }
            RawRecord::Item(item) => {
                item.validate()?;
                if item_lines.insert(item.item_id.clone(), line_no).is_some() {
                    return Err(CorpusError::DuplicateItem {
                        item_id: item.item_id,
                        line: line_no,
                    });
                }
                items.push(item);
            }
        }
    }

    for it in &items {
        if !clip_lines.contains_key(&it.clip_id) {
            return Err(CorpusError::DanglingClip {
                item_id: it.item_id.clone(),
                clip_id: it.clip_id.clone(),
            });
        }
    }

    let mut clip_index = HashMap::new();
    for (i, c) in clips.iter().enumerate() {
        clip_index.insert(c.clip_id.clone(), i);
    }
    Ok(Corpus {
        clips,
        items,
        clip_index,
    })
}

/// Lexical diversity summary of a question set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityStats {
    pub n_questions: usize,
    pub n_unique_questions: usize,
    pub vocab_size: usize,
    /// Type-token ratio: vocabulary size over total token count.
    pub ttr: f64,
}

/// Tokens used for diversity stats: lowercase, punctuation removed in place,
/// split on whitespace.
pub fn question_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let tok: String = w
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if tok.is_empty() {
                None
            } else {
                Some(tok)
            }
        })
        .collect()
}

/// Computes question-set diversity: question counts, uniqueness after
/// whitespace normalization, vocabulary size, and type-token ratio.
pub fn corpus_stats(items: &[VqaItem]) -> Result<DiversityStats, CorpusError> {
    if items.is_empty() {
        return Err(CorpusError::EmptyStats);
    }
    let mut unique = HashSet::new();
    let mut vocab = HashSet::new();
    let mut total_tokens = 0usize;
    for it in items {
        let normalized = it.question.split_whitespace().collect::<Vec<_>>().join(" ");
        unique.insert(normalized);
        for tok in question_tokens(&it.question) {
            vocab.insert(tok);
            total_tokens += 1;
        }
    }
    if total_tokens == 0 {
        return Err(CorpusError::EmptyStats);
    }
    Ok(DiversityStats {
        n_questions: items.len(),
        n_unique_questions: unique.len(),
        vocab_size: vocab.len(),
        ttr: vocab.len() as f64 / total_tokens as f64,
    })
}

/// Model-proposed wrong answers for a question. Generated text is never
/// trusted blindly; the flag is always set so downstream tooling can route
/// these for human review.
#[derive(Debug, Clone, Serialize)]
pub struct DistractorSet {
    pub distractors: Vec<String>,
    pub needs_human_review: bool,
}

/// Asks `model` for `k` plausible but wrong options for a question.
///
/// Candidates are read one per line, deduplicated case-insensitively, and any
/// candidate equal to the correct answer (ignoring case) is dropped. Fails
/// when fewer than `k` usable candidates remain.
pub fn gen_distractors(
    model: &dyn Model,
    question: &str,
    correct_answer: &str,
    k: usize,
) -> Result<DistractorSet, CorpusError> {
    let prompt = prompts::render_distractors(question, correct_answer, k);
    let req = QueryRequest {
        prompt,
        images: Vec::new(),
        meta: QueryMeta {
            model_name: model.name().to_string(),
            item_id: format!("distractors:{question}"),
            trial_index: 0,
            protocol_tag: "distractors".to_string(),
            correct_displayed_slot: None,
            displayed_options: None,
        },
    };
    let response = model.query(&req)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in response.text.lines() {
        let cand = line
            .trim()
            .trim_start_matches(['-', '*', '•'])
            .trim()
            .to_string();
        if cand.is_empty() {
            continue;
        }
        let folded = cand.to_lowercase();
        if folded == correct_answer.to_lowercase() {
            continue;
        }
        if seen.insert(folded) {
            out.push(cand);
        }
    }
    if out.len() < k {
        return Err(CorpusError::TooFewDistractors {
            got: out.len(),
            want: k,
        });
    }
    out.truncate(k);
    Ok(DistractorSet {
        distractors: out,
        needs_human_review: true,
    })
}
