//! Query replay cache. Every successful model response is journaled as
//! `{key, text}` keyed by the query's idempotency key; on resume the cache
//! answers those keys locally, so only queries that never finished reach
//! the model again.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayError, Model, ModelResponse, QueryRequest};

use super::writer::WriterHandle;
use super::HarnessError;

/// One journaled response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryCacheLine {
    pub key: String,
    pub text: String,
}

/// Loads a query journal into a key -> response map. A torn final line
/// (the tail of a crashed write) is ignored; damage anywhere else is an
/// error. Returns the map and the clean byte length, so the caller can
/// truncate the torn tail before appending.
pub fn load_query_cache(path: &Path) -> Result<(HashMap<String, String>, u64), HarnessError> {
    let mut cache = HashMap::new();
    if !path.exists() {
        return Ok((cache, 0));
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
        match serde_json::from_str::<QueryCacheLine>(buf.trim_end()) {
            Ok(line) => {
                cache.insert(line.key, line.text);
                clean_len += n as u64;
            }
            Err(e) => {
                let mut probe = String::new();
                if reader.read_line(&mut probe)? == 0 {
                    break;
                }
                return Err(HarnessError::Config {
                    message: format!("query journal line {line_no} is corrupt: {e}"),
                });
            }
        }
    }
    Ok((cache, clean_len))
}

/// Counts of real versus replayed queries across a run.
#[derive(Debug, Default)]
pub struct QueryCounters {
    pub issued: AtomicUsize,
    pub replayed: AtomicUsize,
}

/// Wraps a model with the replay cache: cache hits answer locally, misses
/// go to the inner model and are journaled before the response is
/// returned, so a completed query is never executed twice.
pub struct ReplayingModel<'a> {
    inner: &'a dyn Model,
    cache: &'a Mutex<HashMap<String, String>>,
    writer: WriterHandle,
    counters: &'a QueryCounters,
}

impl<'a> ReplayingModel<'a> {
    pub fn new(
        inner: &'a dyn Model,
        cache: &'a Mutex<HashMap<String, String>>,
        writer: WriterHandle,
        counters: &'a QueryCounters,
    ) -> Self {
        ReplayingModel {
            inner,
            cache,
            writer,
            counters,
        }
    }
}

impl Model for ReplayingModel<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn query(&self, req: &QueryRequest) -> Result<ModelResponse, GatewayError> {
        let key = req.idempotency_key();
        let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
        if let Some(text) = cached {
            self.counters.replayed.fetch_add(1, Ordering::Relaxed);
            return Ok(ModelResponse { text, retries: 0 });
        }
        let response = self.inner.query(req)?;
        self.writer
            .append_query(QueryCacheLine {
                key: key.clone(),
                text: response.text.clone(),
            })
            .map_err(|e| GatewayError::LogUnavailable {
                message: e.to_string(),
            })?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, response.text.clone());
        self.counters.issued.fetch_add(1, Ordering::Relaxed);
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use crate::gateway::{MockBehavior, MockModel, QueryMeta};
    use crate::harness::writer::LogWriter;

    use super::*;

    fn request(item_id: &str, trial: u32) -> QueryRequest {
        QueryRequest {
            prompt: format!("question for {item_id}"),
            images: vec![PathBuf::from("f.png")],
            meta: QueryMeta {
                model_name: "m".to_string(),
                item_id: item_id.to_string(),
                trial_index: trial,
                protocol_tag: "regular".to_string(),
                correct_displayed_slot: None,
                displayed_options: None,
            },
        }
    }

    #[test]
    fn cache_misses_hit_the_model_once_and_journal_the_response() {
        let dir = tempfile::tempdir().unwrap();
        let writer = LogWriter::open(dir.path(), 1).unwrap();
        let inner = MockModel::new("m", MockBehavior::FixedText {
            text: "B".to_string(),
        });
        let cache = Mutex::new(HashMap::new());
        let counters = QueryCounters::default();
        let model = ReplayingModel::new(&inner, &cache, writer.handle(), &counters);

        let req = request("i1", 0);
        assert_eq!(model.query(&req).unwrap().text, "B");
        assert_eq!(model.query(&req).unwrap().text, "B");
        assert_eq!(counters.issued.load(Ordering::Relaxed), 1);
        assert_eq!(counters.replayed.load(Ordering::Relaxed), 1);
        writer.finish().unwrap();

        let (loaded, _) = load_query_cache(&dir.path().join(super::super::QUERIES_FILE)).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded.values().next().map(String::as_str), Some("B"));
    }

    #[test]
    fn a_preloaded_cache_never_touches_the_inner_model() {
        let dir = tempfile::tempdir().unwrap();
        let writer = LogWriter::open(dir.path(), 1).unwrap();
        let inner = MockModel::new("m", MockBehavior::Sequence { responses: vec![] });
        let req = request("i1", 0);
        let cache = Mutex::new(HashMap::from([(
            req.idempotency_key(),
            "cached".to_string(),
        )]));
        let counters = QueryCounters::default();
        let model = ReplayingModel::new(&inner, &cache, writer.handle(), &counters);
        assert_eq!(model.query(&req).unwrap().text, "cached");
        assert_eq!(counters.issued.load(Ordering::Relaxed), 0);
        writer.finish().unwrap();
    }

    #[test]
    fn torn_final_journal_line_is_dropped_with_its_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        let good = serde_json::to_string(&QueryCacheLine {
            key: "k1".to_string(),
            text: "t".to_string(),
        })
        .unwrap();
        std::fs::write(&path, format!("{good}\n{{\"key\":\"k2\",\"te")).unwrap();
        let (cache, clean_len) = load_query_cache(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(clean_len, good.len() as u64 + 1);
    }

    #[test]
    fn corrupt_middle_journal_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        let good = serde_json::to_string(&QueryCacheLine {
            key: "k1".to_string(),
            text: "t".to_string(),
        })
        .unwrap();
        std::fs::write(&path, format!("garbage\n{good}\n")).unwrap();
        assert!(load_query_cache(&path).is_err());
    }
}
