//! Executes one run: builds the worklist from the corpus, skips work the
//! result log already covers, and drives the rest through a worker pool
//! whose every model call flows through the replay cache.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::corpus::{load_corpus, Clip, Corpus, Permutation, VqaItem};
use crate::gateway::{Model, ParseOptions};
use crate::protocols::{
    cot_future_answer, estimate_distribution, run_multi_trial, run_regular_vqa,
    self_aligned_future,
};
use crate::report::LogRecord;
use crate::visual_prep::select_window;

use super::replay::{load_query_cache, QueryCounters, ReplayingModel};
use super::writer::LogWriter;
use super::{
    config_err, HarnessError, ProtocolChoice, RunConfig, RunMeta, META_FILE, QUERIES_FILE,
    RESULTS_FILE,
};

/// What one run did, and how it should exit.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub result_log: PathBuf,
    /// Work units the config selects, including already-complete ones.
    pub items_total: usize,
    /// Work units with a completed record, old and new together.
    pub items_completed: usize,
    /// Work units that failed terminally this run and will be retried on
    /// resume.
    pub items_failed: usize,
    /// Queries that reached a model this run.
    pub queries_issued: usize,
    /// Queries answered from the replay journal this run.
    pub queries_replayed: usize,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.items_failed > 0 {
            1
        } else {
            0
        }
    }
}

/// One unit of work: a VQA item, or a (clip, anchor, horizon) triple for
/// the self-alignment protocol.
enum Work<'a> {
    Item(&'a VqaItem),
    Align {
        clip_id: &'a str,
        anchor_t: i64,
        delta_t: u8,
    },
}

impl Work<'_> {
    /// Mirrors `completion_key` so pending work can be matched against
    /// logged records.
    fn completion_key(&self, protocol: ProtocolChoice, model: &str) -> String {
        match self {
            Work::Item(item) => format!("{}|{model}|{}", protocol.as_str(), item.item_id),
            Work::Align {
                clip_id,
                anchor_t,
                delta_t,
            } => format!("self-align|{model}|{clip_id}:{anchor_t}:+{delta_t}"),
        }
    }
}

/// Stable identity of the work unit a completed record covers; None for
/// records that do not complete anything (incomplete markers, judge
/// sub-records).
fn completion_key(record: &LogRecord) -> Option<String> {
    match record {
        LogRecord::Regular(t) => Some(format!("regular|{}|{}", t.model, t.item_id)),
        LogRecord::Multitrial(m) => Some(format!("multitrial|{}|{}", m.model, m.item_id)),
        LogRecord::Distribution { model, item_id, .. } => {
            Some(format!("distribution|{model}|{item_id}"))
        }
        LogRecord::Selfalign(a) => Some(format!(
            "self-align|{}|{}:{}:+{}",
            a.model, a.clip_id, a.anchor_t, a.delta_t
        )),
        LogRecord::Cot { trial, .. } => Some(format!("cot|{}|{}", trial.model, trial.item_id)),
        LogRecord::Judge(_) | LogRecord::Incomplete { .. } => None,
    }
}

/// Reads completed work keys from a result log, tolerating a torn final
/// line. Returns the keys and the clean byte length for truncation.
fn load_completions(path: &Path) -> Result<(HashSet<String>, u64), HarnessError> {
    let mut keys = HashSet::new();
    if !path.exists() {
        return Ok((keys, 0));
    }
    let mut reader = BufReader::new(File::open(path)?);
    let mut clean_len = 0u64;
    let mut buf = String::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        match serde_json::from_str::<LogRecord>(buf.trim_end()) {
            Ok(record) => {
                if let Some(key) = completion_key(&record) {
                    keys.insert(key);
                }
                clean_len += n as u64;
            }
            Err(e) => {
                let mut probe = String::new();
                if reader.read_line(&mut probe)? == 0 {
                    break;
                }
                return Err(config_err(format!(
                    "result log line {line_no} is corrupt: {e}"
                )));
            }
        }
    }
    Ok((keys, clean_len))
}

/// Drops the torn tail a crash can leave behind a synced prefix.
fn truncate_to(path: &Path, clean_len: u64) -> Result<(), HarnessError> {
    if path.exists() && std::fs::metadata(path)?.len() > clean_len {
        OpenOptions::new().write(true).open(path)?.set_len(clean_len)?;
    }
    Ok(())
}

fn incomplete(protocol: ProtocolChoice, model: &str, item_id: &str, error: String) -> LogRecord {
    LogRecord::Incomplete {
        item_id: item_id.to_string(),
        model: model.to_string(),
        protocol: protocol.as_str().to_string(),
        error,
    }
}

/// Frames shown with a multiple-choice question: the anchor frame for
/// same-moment items, the past window for horizon items.
fn mc_frames(
    clip: &Clip,
    item: &VqaItem,
    config: &RunConfig,
) -> Result<Vec<PathBuf>, String> {
    if item.horizon == 0 {
        let frame = clip
            .frame_at(item.anchor_t)
            .ok_or_else(|| format!("clip {} has no frame at t={}", clip.clip_id, item.anchor_t))?;
        Ok(vec![frame.path.clone()])
    } else {
        let window = select_window(clip, item.anchor_t, &config.window).map_err(|e| e.to_string())?;
        Ok(window.into_iter().map(|f| f.path.clone()).collect())
    }
}

fn run_work(
    work: &Work<'_>,
    protocol: ProtocolChoice,
    model: &ReplayingModel<'_>,
    judge: Option<&ReplayingModel<'_>>,
    corpus: &Corpus,
    config: &RunConfig,
    opts: &ParseOptions,
) -> LogRecord {
    let model_name = model.name().to_string();
    match (protocol, work) {
        (ProtocolChoice::Regular, Work::Item(item)) => {
            let clip = corpus.clip(&item.clip_id).expect("corpus is cross-checked");
            match clip.frame_at(item.anchor_t) {
                Some(frame) => {
                    LogRecord::Regular(run_regular_vqa(model, item, frame.path.clone(), opts))
                }
                None => incomplete(
                    protocol,
                    &model_name,
                    &item.item_id,
                    format!("clip {} has no frame at t={}", clip.clip_id, item.anchor_t),
                ),
            }
        }
        (ProtocolChoice::Multitrial, Work::Item(item)) => {
            let clip = corpus.clip(&item.clip_id).expect("corpus is cross-checked");
            let frames = match mc_frames(clip, item, config) {
                Ok(frames) => frames,
                Err(e) => return incomplete(protocol, &model_name, &item.item_id, e),
            };
            match run_multi_trial(
                model,
                item,
                &frames,
                config.n_trials,
                config.global_seed,
                config.early_exit,
                opts,
            ) {
                Ok(result) => LogRecord::Multitrial(result),
                Err(e) => incomplete(protocol, &model_name, &item.item_id, e.to_string()),
            }
        }
        (ProtocolChoice::Distribution, Work::Item(item)) => {
            let clip = corpus.clip(&item.clip_id).expect("corpus is cross-checked");
            let frames = match mc_frames(clip, item, config) {
                Ok(frames) => frames,
                Err(e) => return incomplete(protocol, &model_name, &item.item_id, e),
            };
            let sigma = Permutation::identity(item.options.len());
            match estimate_distribution(model, item, &frames, config.n_repeats, &sigma, opts) {
                Ok(estimate) => LogRecord::Distribution {
                    item_id: item.item_id.clone(),
                    model: model_name,
                    horizon: item.horizon,
                    estimate,
                },
                Err(e) => incomplete(protocol, &model_name, &item.item_id, e.to_string()),
            }
        }
        (ProtocolChoice::Cot, Work::Item(item)) => {
            let clip = corpus.clip(&item.clip_id).expect("corpus is cross-checked");
            match cot_future_answer(model, clip, item, config.cot_schedule, opts) {
                Ok((trace, trial)) => LogRecord::Cot { trace, trial },
                Err(e) => incomplete(protocol, &model_name, &item.item_id, e.to_string()),
            }
        }
        (
            ProtocolChoice::SelfAlign,
            Work::Align {
                clip_id,
                anchor_t,
                delta_t,
            },
        ) => {
            let clip = corpus.clip(clip_id).expect("corpus is cross-checked");
            let judge_model = judge.map(|j| j as &dyn Model);
            match self_aligned_future(model, judge_model, clip, *anchor_t, *delta_t, config.measure)
            {
                Ok(score) => LogRecord::Selfalign(score),
                Err(e) => incomplete(
                    protocol,
                    &model_name,
                    &format!("{clip_id}:{anchor_t}:+{delta_t}"),
                    e.to_string(),
                ),
            }
        }
        _ => unreachable!("worklist construction matches work to protocol"),
    }
}

/// Work units for one protocol over the filtered corpus.
fn build_worklist<'a>(corpus: &'a Corpus, config: &RunConfig) -> Vec<Work<'a>> {
    let keep = |item: &VqaItem| {
        config.horizons.is_empty() || config.horizons.contains(&item.horizon)
    };
    match config.protocol {
        ProtocolChoice::Regular | ProtocolChoice::Multitrial | ProtocolChoice::Distribution => {
            corpus.items.iter().filter(|i| keep(i)).map(Work::Item).collect()
        }
        ProtocolChoice::Cot => corpus
            .items
            .iter()
            .filter(|i| keep(i) && i.horizon >= 1)
            .map(Work::Item)
            .collect(),
        ProtocolChoice::SelfAlign => {
            let triples: BTreeSet<(&str, i64, u8)> = corpus
                .items
                .iter()
                .filter(|i| keep(i) && i.horizon >= 1)
                .map(|i| (i.clip_id.as_str(), i.anchor_t, i.horizon))
                .collect();
            triples
                .into_iter()
                .map(|(clip_id, anchor_t, delta_t)| Work::Align {
                    clip_id,
                    anchor_t,
                    delta_t,
                })
                .collect()
        }
    }
}

/// Runs the configured protocol over the corpus. With `resume` the output
/// directory must hold a matching earlier run; completed work is skipped
/// and journaled queries are replayed instead of re-issued.
pub fn run(config: &RunConfig, resume: bool) -> Result<RunSummary, HarnessError> {
    config.validate()?;
    let corpus = load_corpus(&config.corpus)?;
    std::fs::create_dir_all(&config.out_dir)?;

    let meta_path = config.out_dir.join(META_FILE);
    if resume {
        if !meta_path.exists() {
            return Err(config_err(format!(
                "nothing to resume: {} has no {META_FILE}",
                config.out_dir.display()
            )));
        }
        RunMeta::read(&config.out_dir)?.check_resume(config)?;
    } else {
        if meta_path.exists() {
            return Err(config_err(format!(
                "{} already holds a run; resume it or pick a fresh output directory",
                config.out_dir.display()
            )));
        }
        RunMeta::for_config(config).write(&config.out_dir)?;
    }

    let results_path = config.out_dir.join(RESULTS_FILE);
    let queries_path = config.out_dir.join(QUERIES_FILE);
    let (completed, results_clean) = load_completions(&results_path)?;
    truncate_to(&results_path, results_clean)?;
    let (cache, queries_clean) = load_query_cache(&queries_path)?;
    truncate_to(&queries_path, queries_clean)?;

    let worklist = build_worklist(&corpus, config);
    let models: Vec<Box<dyn Model>> = config
        .models
        .iter()
        .map(|m| m.build())
        .collect::<Result<_, _>>()?;
    let judge: Option<Box<dyn Model>> = match &config.judge {
        Some(spec) => Some(spec.build()?),
        None => None,
    };

    let mut tasks: Vec<(usize, &Work<'_>)> = Vec::new();
    let mut already_complete = 0usize;
    for work in &worklist {
        for (mi, spec) in config.models.iter().enumerate() {
            if completed.contains(&work.completion_key(config.protocol, spec.name())) {
                already_complete += 1;
            } else {
                tasks.push((mi, work));
            }
        }
    }
    let items_total = worklist.len() * config.models.len();

    let writer = LogWriter::open(&config.out_dir, config.fsync_batch)?;
    let cache = Mutex::new(cache);
    let counters = QueryCounters::default();
    let wrapped: Vec<ReplayingModel<'_>> = models
        .iter()
        .map(|m| ReplayingModel::new(&**m, &cache, writer.handle(), &counters))
        .collect();
    let wrapped_judge = judge
        .as_ref()
        .map(|j| ReplayingModel::new(&**j, &cache, writer.handle(), &counters));

    let opts = ParseOptions {
        strict: config.strict_parse,
    };
    let next = AtomicUsize::new(0);
    let failed = AtomicUsize::new(0);
    let n_workers = config
        .models
        .iter()
        .map(|m| m.max_in_flight())
        .sum::<usize>()
        .clamp(1, tasks.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            let handle = writer.handle();
            let next = &next;
            let failed = &failed;
            let tasks = &tasks;
            let wrapped = &wrapped;
            let wrapped_judge = wrapped_judge.as_ref();
            let corpus = &corpus;
            let opts = &opts;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(mi, work)) = tasks.get(i) else {
                    break;
                };
                let record = run_work(
                    work,
                    config.protocol,
                    &wrapped[mi],
                    wrapped_judge,
                    corpus,
                    config,
                    opts,
                );
                if matches!(record, LogRecord::Incomplete { .. }) {
                    failed.fetch_add(1, Ordering::Relaxed);
                }
                if handle.append_result(record).is_err() {
                    break;
                }
            });
        }
    });

    writer.finish()?;

    let items_failed = failed.load(Ordering::Relaxed);
    Ok(RunSummary {
        out_dir: config.out_dir.clone(),
        result_log: results_path,
        items_total,
        items_completed: already_complete + tasks.len() - items_failed,
        items_failed,
        queries_issued: counters.issued.load(Ordering::Relaxed),
        queries_replayed: counters.replayed.load(Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use crate::gateway::MockBehavior;
    use crate::harness::ModelSpec;
    use crate::report::read_result_log;

    use super::*;

    fn write_corpus(dir: &Path, n_items: usize, horizon: u8) -> PathBuf {
        let path = dir.join("corpus.jsonl");
        let frames: Vec<String> = (0..=20)
            .map(|t| format!(r#"{{"t":{t},"path":"frames/{t}.png"}}"#))
            .collect();
        let mut lines = vec![format!(
            r#"{{"kind":"clip","clip_id":"c0","fps":1,"frames":[{}]}}"#,
            frames.join(",")
        )];
        for i in 0..n_items {
            lines.push(format!(
                r#"{{"kind":"item","item_id":"q{i}","clip_id":"c0","anchor_t":6,"horizon":{horizon},"question":"Q {i}?","options":["yes","no"],"correct":0,"categories":["General"]}}"#
            ));
        }
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn mock_config(dir: &Path, behavior: MockBehavior, out: &str) -> RunConfig {
        RunConfig {
            corpus: write_corpus(dir, 10, 0),
            out_dir: dir.join(out),
            protocol: ProtocolChoice::Multitrial,
            n_trials: 4,
            n_repeats: 4,
            horizons: vec![],
            global_seed: 7,
            // Every item costs exactly n_trials queries, which keeps the
            // resume arithmetic in these tests exact.
            early_exit: false,
            strict_parse: false,
            cot_schedule: Default::default(),
            measure: crate::protocols::MeasureTag::RougeL,
            fsync_batch: 1,
            window: Default::default(),
            models: vec![ModelSpec::Mock {
                name: "m".to_string(),
                behavior,
                max_in_flight: 1,
            }],
            judge: None,
        }
    }

    #[test]
    fn always_correct_mock_completes_every_item() {
        let dir = tempfile::tempdir().unwrap();
        let config = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "out");
        let summary = run(&config, false).unwrap();
        assert_eq!(summary.items_total, 10);
        assert_eq!(summary.items_completed, 10);
        assert_eq!(summary.items_failed, 0);
        assert_eq!(summary.exit_code(), 0);
        assert_eq!(summary.queries_issued, 40, "4 trials x 10 items");

        let records = read_result_log(&summary.result_log).unwrap();
        let trials: usize = records
            .iter()
            .map(|r| match r {
                LogRecord::Multitrial(m) => m.trials.len(),
                _ => 0,
            })
            .sum();
        assert_eq!(trials, 40);
    }

    #[test]
    fn rerunning_without_resume_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "out");
        run(&config, false).unwrap();
        assert!(matches!(
            run(&config, false),
            Err(HarnessError::Config { .. })
        ));
        assert!(matches!(
            run(&mock_config(dir.path(), MockBehavior::AlwaysCorrect, "other"), true),
            Err(HarnessError::Config { .. })
        ));
    }

    #[test]
    fn resume_skips_completed_items_and_replays_cached_queries() {
        let dir = tempfile::tempdir().unwrap();
        // Enough responses for one full item plus half of a second.
        let budget = mock_config(
            dir.path(),
            MockBehavior::Sequence {
                responses: vec!["A".to_string(); 6],
            },
            "out",
        );
        let first = run(&budget, false).unwrap();
        assert_eq!(first.items_completed, 1);
        assert_eq!(first.items_failed, 9);
        assert_eq!(first.exit_code(), 1);
        assert_eq!(first.queries_issued, 6);

        // Same fingerprint, working model: only the missing queries go out.
        let mut refilled = budget.clone();
        refilled.models = vec![ModelSpec::Mock {
            name: "m".to_string(),
            behavior: MockBehavior::AlwaysSlot { slot: 0 },
            max_in_flight: 1,
        }];
        let second = run(&refilled, true).unwrap();
        assert_eq!(second.items_failed, 0);
        assert_eq!(second.items_completed, 10);
        assert_eq!(second.queries_replayed, 2, "the half-done item replays");
        assert_eq!(
            first.queries_issued + second.queries_issued,
            40,
            "both runs together issue exactly a clean run's queries"
        );

        let journal = std::fs::read_to_string(budget.out_dir.join(QUERIES_FILE)).unwrap();
        assert_eq!(journal.lines().count(), 40);

        let records = read_result_log(&second.result_log).unwrap();
        let complete = records
            .iter()
            .filter(|r| matches!(r, LogRecord::Multitrial(_)))
            .count();
        assert_eq!(complete, 10, "every item ends with a full result");
    }

    #[test]
    fn resume_rejects_a_reseeded_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "out");
        run(&config, false).unwrap();
        let mut reseeded = config.clone();
        reseeded.global_seed = 8;
        assert!(matches!(
            run(&reseeded, true),
            Err(HarnessError::Config { .. })
        ));
    }

    #[test]
    fn seeds_change_shuffles_but_not_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "a");
        let mut b = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "b");
        a.global_seed = 1;
        b.global_seed = 2;
        // Four options so trial shuffles almost surely differ.
        let path = dir.path().join("corpus4.jsonl");
        let mut lines = vec![
            r#"{"kind":"clip","clip_id":"c0","fps":1,"frames":[{"t":6,"path":"frames/6.png"}]}"#
                .to_string(),
        ];
        for i in 0..5 {
            lines.push(format!(
                r#"{{"kind":"item","item_id":"q{i}","clip_id":"c0","anchor_t":6,"horizon":0,"question":"Q {i}?","options":["a","b","c","d"],"correct":0,"categories":["General"]}}"#
            ));
        }
        std::fs::write(&path, lines.join("\n")).unwrap();
        a.corpus = path.clone();
        b.corpus = path;

        let ra = run(&a, false).unwrap();
        let rb = run(&b, false).unwrap();
        assert_eq!(ra.items_completed, 5);
        assert_eq!(rb.items_completed, 5);

        let keys = |summary: &RunSummary| {
            let (cache, _) =
                load_query_cache(&summary.out_dir.join(QUERIES_FILE)).unwrap();
            cache.into_keys().collect::<std::collections::BTreeSet<_>>()
        };
        assert_ne!(keys(&ra), keys(&rb), "different seeds shuffle differently");
    }

    #[test]
    fn horizon_filter_limits_the_worklist() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "out");
        config.corpus = write_corpus(dir.path(), 6, 4);
        config.horizons = vec![1];
        let summary = run(&config, false).unwrap();
        assert_eq!(summary.items_total, 0);

        let mut matching = mock_config(dir.path(), MockBehavior::AlwaysCorrect, "out2");
        matching.corpus = write_corpus(dir.path(), 6, 4);
        matching.horizons = vec![4];
        let summary = run(&matching, false).unwrap();
        assert_eq!(summary.items_total, 6);
        assert_eq!(summary.items_completed, 6);
    }

    #[test]
    fn torn_result_tail_is_healed_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let config = mock_config(
            dir.path(),
            MockBehavior::Sequence {
                responses: vec!["A".to_string(); 4],
            },
            "out",
        );
        let first = run(&config, false).unwrap();
        assert_eq!(first.items_completed, 1);

        let results_path = config.out_dir.join(RESULTS_FILE);
        let mut bytes = std::fs::read(&results_path).unwrap();
        bytes.extend_from_slice(b"{\"record\":\"multitrial\",\"item");
        std::fs::write(&results_path, &bytes).unwrap();

        let mut refilled = config.clone();
        refilled.models = vec![ModelSpec::Mock {
            name: "m".to_string(),
            behavior: MockBehavior::AlwaysSlot { slot: 0 },
            max_in_flight: 1,
        }];
        let second = run(&refilled, true).unwrap();
        assert_eq!(second.items_failed, 0);
        let records = read_result_log(&results_path).unwrap();
        let completed: HashMap<&str, usize> =
            records
                .iter()
                .fold(HashMap::new(), |mut acc, r| {
                    if let LogRecord::Multitrial(m) = r {
                        *acc.entry(m.item_id.as_str()).or_default() += 1;
                    }
                    acc
                });
        assert_eq!(completed.len(), 10);
        assert!(completed.values().all(|&n| n == 1));
    }
}
