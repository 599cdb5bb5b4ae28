//! The single log-writer thread. Workers send finished records and cached
//! query responses over a channel; one thread appends them as JSONL and
//! fsyncs every `fsync_batch` lines, so at most the last unsynced batch is
//! at risk on a crash.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::thread::JoinHandle;

use serde::Serialize;

use crate::report::LogRecord;

use super::replay::QueryCacheLine;
use super::{QUERIES_FILE, RESULTS_FILE};

enum WriteMsg {
    Result(Box<LogRecord>),
    Query(QueryCacheLine),
    Barrier(SyncSender<()>),
    Shutdown,
}

/// Sending side handed to every worker; all writes funnel through the one
/// writer thread, keeping the logs free of interleaved lines.
#[derive(Clone)]
pub struct WriterHandle {
    tx: Sender<WriteMsg>,
}

impl WriterHandle {
    pub fn append_result(&self, record: LogRecord) -> io::Result<()> {
        self.tx
            .send(WriteMsg::Result(Box::new(record)))
            .map_err(|_| writer_gone())
    }

    pub fn append_query(&self, line: QueryCacheLine) -> io::Result<()> {
        self.tx
            .send(WriteMsg::Query(line))
            .map_err(|_| writer_gone())
    }

    /// Blocks until everything sent before the call is flushed and synced.
    pub fn barrier(&self) -> io::Result<()> {
        let (ack_tx, ack_rx) = mpsc::sync_channel(0);
        self.tx
            .send(WriteMsg::Barrier(ack_tx))
            .map_err(|_| writer_gone())?;
        ack_rx.recv().map_err(|_| writer_gone())
    }
}

fn writer_gone() -> io::Error {
    io::Error::other("log writer thread stopped")
}

/// Owns the writer thread; call `finish` to flush, sync, and surface any
/// write error. Anything sent on a surviving handle after `finish` starts
/// is not written, so finish only after the workers have stopped.
pub struct LogWriter {
    tx: Option<Sender<WriteMsg>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl LogWriter {
    pub fn open(dir: &Path, fsync_batch: usize) -> io::Result<LogWriter> {
        let results = open_append(&dir.join(RESULTS_FILE))?;
        let queries = open_append(&dir.join(QUERIES_FILE))?;
        let (tx, rx) = mpsc::channel();
        let thread = std::thread::Builder::new()
            .name("log-writer".to_string())
            .spawn(move || writer_loop(rx, results, queries, fsync_batch.max(1)))?;
        Ok(LogWriter {
            tx: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn handle(&self) -> WriterHandle {
        WriterHandle {
            tx: self.tx.clone().expect("writer not finished"),
        }
    }

    /// Drains everything sent so far, joins the thread, and returns the
    /// first write error if there was one. Works even while handle clones
    /// are still alive; their later sends fail instead of blocking.
    pub fn finish(mut self) -> io::Result<()> {
        self.shutdown();
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| writer_gone())?,
            None => Ok(()),
        }
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.tx.take() {
            let _ = tx.send(WriteMsg::Shutdown);
        }
    }
}

impl Drop for LogWriter {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn open_append(path: &Path) -> io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

struct SyncedFile {
    writer: BufWriter<File>,
    pending: usize,
}

impl SyncedFile {
    fn new(file: File) -> Self {
        SyncedFile {
            writer: BufWriter::new(file),
            pending: 0,
        }
    }

    fn append_line<T: Serialize>(&mut self, value: &T, fsync_batch: usize) -> io::Result<()> {
        serde_json::to_writer(&mut self.writer, value).map_err(io::Error::other)?;
        self.writer.write_all(b"\n")?;
        self.pending += 1;
        if self.pending >= fsync_batch {
            self.sync()?;
        }
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        if self.pending > 0 {
            self.writer.flush()?;
            self.writer.get_ref().sync_data()?;
            self.pending = 0;
        }
        Ok(())
    }
}

fn writer_loop(
    rx: Receiver<WriteMsg>,
    results: File,
    queries: File,
    fsync_batch: usize,
) -> io::Result<()> {
    let mut results = SyncedFile::new(results);
    let mut queries = SyncedFile::new(queries);
    for msg in rx {
        match msg {
            WriteMsg::Result(record) => results.append_line(&record, fsync_batch)?,
            WriteMsg::Query(line) => queries.append_line(&line, fsync_batch)?,
            WriteMsg::Barrier(ack) => {
                results.sync()?;
                queries.sync()?;
                let _ = ack.send(());
            }
            WriteMsg::Shutdown => break,
        }
    }
    results.sync()?;
    queries.sync()
}
