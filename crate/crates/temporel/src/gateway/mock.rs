//! Deterministic mock models.
//!
//! Mocks stand in for live endpoints in tests, offline smoke runs, and the
//! acceptance suite. They answer from request metadata alone and never do
//! I/O. Scripted variants fail loudly when asked something they have no
//! answer for, so a test exercising them covers exactly the requests it
//! scripted.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{option_letter, GatewayError, Model, ModelResponse, QueryRequest};

/// What a mock answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Always answers the letter of a fixed displayed slot.
    AlwaysSlot { slot: usize },
    /// Always answers the letter of whichever displayed slot holds the
    /// correct option (requires `correct_displayed_slot` in metadata).
    AlwaysCorrect,
    /// Always returns the same text.
    FixedText { text: String },
    /// Responses keyed by idempotency key, each key holding a queue consumed
    /// in order. Missing keys and exhausted queues are hard errors.
    Scripted { script: HashMap<String, Vec<String>> },
    /// Responses consumed in call order regardless of request; exhaustion is
    /// a hard error.
    Sequence { responses: Vec<String> },
    /// Uniformly random option letter over `k` slots from a seeded stream;
    /// models a pure guesser for diagnostics tests.
    UniformSlot { k: usize, seed: u64 },
}

enum State {
    Stateless,
    Scripted(HashMap<String, VecDeque<String>>),
    Sequence { responses: Vec<String>, next: usize },
    Uniform { k: usize, rng: Box<ChaCha8Rng> },
}

/// A mock model with a name and one [`MockBehavior`].
pub struct MockModel {
    name: String,
    behavior: MockBehavior,
    state: Mutex<State>,
}

impl MockModel {
    pub fn new(name: impl Into<String>, behavior: MockBehavior) -> Self {
        let state = match &behavior {
            MockBehavior::Scripted { script } => State::Scripted(
                script
                    .iter()
                    .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
                    .collect(),
            ),
            MockBehavior::Sequence { responses } => State::Sequence {
                responses: responses.clone(),
                next: 0,
            },
            MockBehavior::UniformSlot { k, seed } => State::Uniform {
                k: *k,
                rng: Box::new(ChaCha8Rng::seed_from_u64(*seed)),
            },
            _ => State::Stateless,
        };
        MockModel {
            name: name.into(),
            behavior,
            state: Mutex::new(state),
        }
    }
}

impl Model for MockModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn query(&self, req: &QueryRequest) -> Result<ModelResponse, GatewayError> {
        let text = match &self.behavior {
            MockBehavior::AlwaysSlot { slot } => option_letter(*slot)
                .expect("mock slot < 26")
                .to_string(),
            MockBehavior::AlwaysCorrect => {
                let slot = req
                    .meta
                    .correct_displayed_slot
                    .ok_or(GatewayError::MissingCorrectSlot)?;
                option_letter(slot).expect("slot < 26").to_string()
            }
            MockBehavior::FixedText { text } => text.clone(),
            MockBehavior::Scripted { .. } => {
                let key = req.idempotency_key();
                let mut state = self.state.lock().expect("mock state poisoned");
                let State::Scripted(script) = &mut *state else {
                    unreachable!("scripted behavior has scripted state");
                };
                let queue = script
                    .get_mut(&key)
                    .ok_or_else(|| GatewayError::ScriptMissing { key: key.clone() })?;
                queue
                    .pop_front()
                    .ok_or(GatewayError::ScriptExhausted { key })?
            }
            MockBehavior::Sequence { .. } => {
                let mut state = self.state.lock().expect("mock state poisoned");
                let State::Sequence { responses, next } = &mut *state else {
                    unreachable!("sequence behavior has sequence state");
                };
                if *next >= responses.len() {
                    return Err(GatewayError::SequenceExhausted { served: *next });
                }
                let text = responses[*next].clone();
                *next += 1;
                text
            }
            MockBehavior::UniformSlot { .. } => {
                let mut state = self.state.lock().expect("mock state poisoned");
                let State::Uniform { k, rng } = &mut *state else {
                    unreachable!("uniform behavior has uniform state");
                };
                let slot = rng.random_range(0..*k);
                option_letter(slot).expect("k <= 26").to_string()
            }
        };
        Ok(ModelResponse { text, retries: 0 })
    }
}
