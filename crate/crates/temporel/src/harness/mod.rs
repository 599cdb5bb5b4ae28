//! Run orchestration: a validated config picks a protocol, a corpus, and a
//! set of model endpoints; a worker pool executes the protocol per item;
//! one writer thread appends results and a query replay journal to the
//! output directory. Killing a run loses at most the unsynced tail, and
//! resuming issues only the queries that never completed.

mod replay;
mod runner;
mod writer;

pub use replay::{load_query_cache, QueryCacheLine, QueryCounters, ReplayingModel};
pub use runner::{run, RunSummary};
pub use writer::{LogWriter, WriterHandle};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, MAX_HORIZON};
use crate::gateway::{GatewayError, HttpModel, MockBehavior, MockModel, Model, ModelEndpoint};
use crate::prompts;
use crate::protocols::{CotSchedule, MeasureTag};
use crate::report::ReportError;
use crate::visual_prep::WindowSpec;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const META_FILE: &str = "run_meta.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {message}")]
    Config { message: String },
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
}

impl HarnessError {
    /// Process exit code: 2 for configuration and corpus mistakes the user
    /// must fix, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Corpus(_) => 2,
            _ => 1,
        }
    }
}

fn config_err(message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        message: message.into(),
    }
}

/// Which evaluation protocol a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolChoice {
    /// One unshuffled trial per item.
    Regular,
    /// N option-shuffled trials per item; pass requires all correct.
    Multitrial,
    /// R repeats under a fixed permutation, tallied into a distribution.
    Distribution,
    /// Predicted future description scored against the model's own
    /// description of the real future frame.
    SelfAlign,
    /// Stepwise future descriptions, then a text-only final answer.
    Cot,
}

impl ProtocolChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolChoice::Regular => "regular",
            ProtocolChoice::Multitrial => "multitrial",
            ProtocolChoice::Distribution => "distribution",
            ProtocolChoice::SelfAlign => "self-align",
            ProtocolChoice::Cot => "cot",
        }
    }
}

impl std::str::FromStr for ProtocolChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(ProtocolChoice::Regular),
            "multitrial" => Ok(ProtocolChoice::Multitrial),
            "distribution" => Ok(ProtocolChoice::Distribution),
            "self-align" => Ok(ProtocolChoice::SelfAlign),
            "cot" => Ok(ProtocolChoice::Cot),
            other => Err(format!(
                "unknown protocol {other:?} (expected regular, multitrial, distribution, self-align, or cot)"
            )),
        }
    }
}

/// One model under test: either a live HTTP endpoint or a deterministic
/// mock for offline runs and tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mock {
        name: String,
        behavior: MockBehavior,
        /// Worker threads driving this model; stateful mock behaviors need
        /// 1 to stay deterministic.
        #[serde(default = "default_mock_in_flight")]
        max_in_flight: usize,
    },
    Http(ModelEndpoint),
}

fn default_mock_in_flight() -> usize {
    1
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            ModelSpec::Mock { name, .. } => name,
            ModelSpec::Http(endpoint) => &endpoint.model_name,
        }
    }

    pub fn max_in_flight(&self) -> usize {
        match self {
            ModelSpec::Mock { max_in_flight, .. } => (*max_in_flight).max(1),
            ModelSpec::Http(endpoint) => endpoint.max_in_flight.max(1),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Model>, GatewayError> {
        match self {
            ModelSpec::Mock { name, behavior, .. } => {
                Ok(Box::new(MockModel::new(name.clone(), behavior.clone())))
            }
            ModelSpec::Http(endpoint) => Ok(Box::new(HttpModel::new(endpoint.clone())?)),
        }
    }
}

/// Everything one run needs, loadable from a TOML file. Unknown keys are
/// rejected so typos surface as config errors before any query is sent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL corpus of clips and items.
    pub corpus: PathBuf,
    /// Directory receiving the result log, query journal, and metadata.
    pub out_dir: PathBuf,
    pub protocol: ProtocolChoice,
    /// Trials per item under the multi-trial protocol.
    #[serde(default = "default_n_trials")]
    pub n_trials: u32,
    /// Repeats per item under the distribution protocol.
    #[serde(default = "default_n_repeats")]
    pub n_repeats: u32,
    /// Keep only items with these horizons; empty keeps everything.
    #[serde(default)]
    pub horizons: Vec<u8>,
    /// Root of every per-trial shuffle seed.
    #[serde(default)]
    pub global_seed: u64,
    /// Skip remaining trials of an item once one has failed.
    #[serde(default = "default_true")]
    pub early_exit: bool,
    /// Reject parenthesized answer letters like "(A)".
    #[serde(default)]
    pub strict_parse: bool,
    #[serde(default)]
    pub cot_schedule: CotSchedule,
    /// Similarity measure for the self-alignment protocol.
    #[serde(default = "default_measure")]
    pub measure: MeasureTag,
    /// Result-log lines per fsync.
    #[serde(default = "default_fsync_batch")]
    pub fsync_batch: usize,
    /// Past-frame window for horizon protocols.
    #[serde(default)]
    pub window: WindowSpec,
    pub models: Vec<ModelSpec>,
    /// Judge endpoint, required when `measure = "judge"`.
    #[serde(default)]
    pub judge: Option<ModelSpec>,
}

fn default_n_trials() -> u32 {
    4
}

fn default_n_repeats() -> u32 {
    16
}

fn default_true() -> bool {
    true
}

fn default_measure() -> MeasureTag {
    MeasureTag::RougeL
}

fn default_fsync_batch() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.models.is_empty() {
            return Err(config_err("at least one model is required"));
        }
        let mut names = BTreeSet::new();
        for spec in &self.models {
            if spec.name().is_empty() {
                return Err(config_err("model names must be non-empty"));
            }
            if !names.insert(spec.name()) {
                return Err(config_err(format!(
                    "duplicate model name {:?}",
                    spec.name()
                )));
            }
        }
        if self.n_trials < 1 {
            return Err(config_err("n_trials must be >= 1"));
        }
        if self.n_repeats < 1 {
            return Err(config_err("n_repeats must be >= 1"));
        }
        if self.fsync_batch < 1 {
            return Err(config_err("fsync_batch must be >= 1"));
        }
        if let Some(&h) = self.horizons.iter().find(|&&h| h > MAX_HORIZON) {
            return Err(config_err(format!(
                "horizon {h} exceeds the maximum of {MAX_HORIZON}"
            )));
        }
        self.window
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if self.protocol == ProtocolChoice::SelfAlign
            && self.measure == MeasureTag::Judge
            && self.judge.is_none()
        {
            return Err(config_err(
                "measure = \"judge\" requires a [judge] model",
            ));
        }
        Ok(())
    }
}

/// Parses and validates a TOML run config.
pub fn load_run_config(path: &Path) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// The measurement-defining subset of a config. Two configs with the same
/// fingerprint produce the same query keys, so a resume may swap endpoints
/// or mock behaviors but nothing listed here.
#[derive(Serialize)]
struct ConfigFingerprint<'a> {
    corpus: &'a Path,
    protocol: ProtocolChoice,
    n_trials: u32,
    n_repeats: u32,
    horizons: &'a [u8],
    global_seed: u64,
    early_exit: bool,
    strict_parse: bool,
    cot_schedule: CotSchedule,
    measure: MeasureTag,
    window: &'a WindowSpec,
    model_names: Vec<&'a str>,
    judge_name: Option<&'a str>,
}

pub fn config_fingerprint(config: &RunConfig) -> String {
    let mut model_names: Vec<&str> = config.models.iter().map(|m| m.name()).collect();
    model_names.sort_unstable();
    let fp = ConfigFingerprint {
        corpus: &config.corpus,
        protocol: config.protocol,
        n_trials: config.n_trials,
        n_repeats: config.n_repeats,
        horizons: &config.horizons,
        global_seed: config.global_seed,
        early_exit: config.early_exit,
        strict_parse: config.strict_parse,
        cot_schedule: config.cot_schedule,
        measure: config.measure,
        window: &config.window,
        model_names,
        judge_name: config.judge.as_ref().map(|j| j.name()),
    };
    let bytes = serde_json::to_vec(&fp).expect("fingerprint serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Pinned facts about a run directory, written once and checked on resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_fingerprint: String,
    /// The config as given, for the record.
    pub config: RunConfig,
    pub template_hashes: BTreeMap<String, String>,
    pub crate_version: String,
    pub created_unix_ms: u64,
}

impl RunMeta {
    pub fn for_config(config: &RunConfig) -> RunMeta {
        RunMeta {
            config_fingerprint: config_fingerprint(config),
            config: config.clone(),
            template_hashes: prompts::template_hashes(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix_ms: crate::protocols::now_ms(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(dir.join(META_FILE), bytes)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<RunMeta, HarnessError> {
        let bytes = std::fs::read(dir.join(META_FILE))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// A resume must measure the same thing with the same prompts.
    pub fn check_resume(&self, config: &RunConfig) -> Result<(), HarnessError> {
        let fingerprint = config_fingerprint(config);
        if fingerprint != self.config_fingerprint {
            return Err(config_err(
                "config does not match the original run (corpus, protocol, trials, seeds, \
                 window, or model names changed); start a fresh output directory",
            ));
        }
        if prompts::template_hashes() != self.template_hashes {
            return Err(config_err(
                "prompt templates changed since the original run; start a fresh output directory",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
corpus = "corpus.jsonl"
out_dir = "out"
protocol = "multitrial"

[[models]]
kind = "mock"
name = "m"
behavior = { type = "always_correct" }
"#
        .to_string()
    }

    fn parse(toml_text: &str) -> Result<RunConfig, HarnessError> {
        let config: RunConfig =
            toml::from_str(toml_text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    #[test]
    fn minimal_config_gets_the_documented_defaults() {
        let config = parse(&minimal_toml()).unwrap();
        assert_eq!(config.n_trials, 4);
        assert_eq!(config.n_repeats, 16);
        assert!(config.early_exit);
        assert!(!config.strict_parse);
        assert_eq!(config.fsync_batch, 1);
        assert_eq!(config.measure, MeasureTag::RougeL);
        assert_eq!(config.window.k, 5);
        assert!(config.horizons.is_empty());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let with_typo = minimal_toml().replace("protocol", "protocl");
        assert!(parse(&with_typo).is_err());

        let zero_trials = format!("n_trials = 0\n{}", minimal_toml());
        assert!(matches!(
            parse(&zero_trials),
            Err(HarnessError::Config { .. })
        ));

        let big_horizon = format!("horizons = [13]\n{}", minimal_toml());
        assert!(parse(&big_horizon).is_err());

        let no_models: String = minimal_toml().lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(parse(&no_models).is_err());
    }

    #[test]
    fn duplicate_model_names_are_rejected() {
        let doubled = format!(
            "{}\n[[models]]\nkind = \"mock\"\nname = \"m\"\nbehavior = {{ type = \"always_correct\" }}\n",
            minimal_toml()
        );
        assert!(matches!(parse(&doubled), Err(HarnessError::Config { .. })));
    }

    #[test]
    fn http_model_spec_parses_endpoint_fields_inline() {
        let toml_text = r#"
corpus = "corpus.jsonl"
out_dir = "out"
protocol = "regular"

[[models]]
kind = "http"
base_url = "http://localhost:9000/v1"
model_name = "remote"
max_in_flight = 2
"#;
        let config = parse(toml_text).unwrap();
        assert_eq!(config.models[0].name(), "remote");
        assert_eq!(config.models[0].max_in_flight(), 2);
    }

    #[test]
    fn judge_measure_requires_a_judge_model() {
        let toml_text = minimal_toml()
            .replace("protocol = \"multitrial\"", "protocol = \"self-align\"\nmeasure = \"judge\"");
        assert!(matches!(parse(&toml_text), Err(HarnessError::Config { .. })));
    }

    #[test]
    fn fingerprint_ignores_behavior_but_pins_the_measurement() {
        let base = parse(&minimal_toml()).unwrap();

        let mut swapped = base.clone();
        swapped.models = vec![ModelSpec::Mock {
            name: "m".to_string(),
            behavior: MockBehavior::AlwaysSlot { slot: 0 },
            max_in_flight: 1,
        }];
        assert_eq!(config_fingerprint(&base), config_fingerprint(&swapped));

        let mut reseeded = base.clone();
        reseeded.global_seed = 99;
        assert_ne!(config_fingerprint(&base), config_fingerprint(&reseeded));

        let mut renamed = base.clone();
        renamed.models = vec![ModelSpec::Mock {
            name: "other".to_string(),
            behavior: MockBehavior::AlwaysCorrect,
            max_in_flight: 1,
        }];
        assert_ne!(config_fingerprint(&base), config_fingerprint(&renamed));
    }

    #[test]
    fn meta_round_trips_and_rejects_a_changed_config() {
        let config = parse(&minimal_toml()).unwrap();
        let meta = RunMeta::for_config(&config);
        let dir = tempfile::tempdir().unwrap();
        meta.write(dir.path()).unwrap();
        let loaded = RunMeta::read(dir.path()).unwrap();
        loaded.check_resume(&config).unwrap();

        let mut changed = config.clone();
        changed.n_trials = 8;
        assert!(matches!(
            loaded.check_resume(&changed),
            Err(HarnessError::Config { .. })
        ));
    }

    #[test]
    fn exit_codes_separate_config_from_runtime_errors() {
        assert_eq!(config_err("x").exit_code(), 2);
        assert_eq!(
            HarnessError::Io(std::io::Error::other("x")).exit_code(),
            1
        );
    }
}
