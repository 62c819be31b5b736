//! Model backends and the batch runner that turns tiles into journaled,
//! validated assessments.

mod backend;
mod oracle;

pub use backend::{
    build_backend, BackendConfig, BackendError, BackendKind, MockBackend, ModelBackend,
    RemoteBackend, ReplayBackend, DEFAULT_CREDENTIAL_ENV,
};
pub use oracle::{assess_raster, mock_oracle_assess, MIN_AREA_FRACTION};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{encode_image_payload, Tile};
use crate::model::{parse_model_response, ParseMode, ParseOutcome, ParseStatus};
use crate::prompting::{
    assemble_prompt_with, render_messages, FewShotExample, PromptBundle, PromptOptions,
    PromptTemplate,
};
use crate::retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("no replay fixture for bundle {0}")]
    ReplayMiss(String),
    #[error("batch has no tiles")]
    EmptyBatch,
    #[error("journal: {0}")]
    Journal(#[from] std::io::Error),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Everything known about one model call, including failed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub tile_id: String,
    pub bundle_hash: String,
    pub backend_kind: BackendKind,
    pub raw_response: String,
    pub outcome: ParseOutcome,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub created_at: DateTime<Utc>,
    /// Set when no response was obtained at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl InferenceRecord {
    /// Record for a tile whose request never produced a response.
    pub fn failed(
        tile_id: &str,
        bundle_hash: &str,
        kind: BackendKind,
        attempts: u32,
        reason: String,
    ) -> Self {
        let mut outcome = parse_model_response("", ParseMode::Lenient);
        outcome.diagnostic = Some(reason.clone());
        Self {
            tile_id: tile_id.to_string(),
            bundle_hash: bundle_hash.to_string(),
            backend_kind: kind,
            raw_response: String::new(),
            outcome,
            latency_ms: 0,
            attempt_count: attempts.max(1),
            created_at: Utc::now(),
            failure: Some(reason),
        }
    }

    /// Same record with the run-dependent fields zeroed, for comparisons
    /// across runs.
    pub fn normalized(&self) -> Self {
        Self {
            latency_ms: 0,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
            ..self.clone()
        }
    }
}

/// Sends the bundle, retrying transient failures, and parses the reply
/// leniently. Rejected parses still produce a record.
pub fn run_inference(
    backend: &dyn ModelBackend,
    policy: &RetryPolicy,
    bundle: &PromptBundle,
    tile_id: &str,
) -> Result<InferenceRecord, InferenceError> {
    let messages = render_messages(bundle);
    let started = Instant::now();
    let mut attempt = 0;
    let raw = loop {
        attempt += 1;
        match backend.complete(bundle, &messages) {
            Ok(raw) => break raw,
            Err(BackendError::ReplayMiss(hash)) => return Err(InferenceError::ReplayMiss(hash)),
            Err(BackendError::Fatal(msg)) => {
                return Err(InferenceError::BackendUnavailable {
                    attempts: attempt,
                    last: msg,
                })
            }
            Err(BackendError::Transient {
                message,
                retry_after,
            }) => {
                if attempt >= policy.max_attempts.max(1) {
                    return Err(InferenceError::BackendUnavailable {
                        attempts: attempt,
                        last: message,
                    });
                }
                let delay = policy.delay_after(attempt, retry_after);
                log::warn!(
                    "tile {tile_id}: attempt {attempt} failed ({message}); retrying in {delay:?}"
                );
                std::thread::sleep(delay);
            }
        }
    };
    let outcome = parse_model_response(&raw, ParseMode::Lenient);
    Ok(InferenceRecord {
        tile_id: tile_id.to_string(),
        bundle_hash: bundle.bundle_hash.clone(),
        backend_kind: backend.kind(),
        raw_response: raw,
        outcome,
        latency_ms: started.elapsed().as_millis() as u64,
        attempt_count: attempt,
        created_at: Utc::now(),
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOptions {
    pub parallelism: usize,
    pub k: usize,
    pub prompt: PromptOptions,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            k: crate::prompting::DEFAULT_SHOTS,
            prompt: PromptOptions::default(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub ok: usize,
    pub repaired: usize,
    pub rejected: usize,
    /// Records with no response at all (backend unavailable, replay miss,
    /// prompt assembly failure).
    pub failed: usize,
}

impl BatchSummary {
    pub fn from_records(records: &[InferenceRecord]) -> Self {
        let mut s = Self {
            total: records.len(),
            ..Self::default()
        };
        for r in records {
            if r.failure.is_some() {
                s.failed += 1;
            }
            match r.outcome.status {
                ParseStatus::Ok => s.ok += 1,
                ParseStatus::Repaired => s.repaired += 1,
                ParseStatus::Rejected => s.rejected += 1,
            }
        }
        s
    }
}

fn bundle_for(
    tile: &Tile,
    template: &PromptTemplate,
    examples: &[FewShotExample],
    opts: &BatchOptions,
) -> Result<PromptBundle, String> {
    let payload = encode_image_payload(tile).map_err(|e| e.to_string())?;
    assemble_prompt_with(template, examples, opts.k, &payload, &opts.prompt)
        .map_err(|e| e.to_string())
}

fn process_tile(
    backend: &dyn ModelBackend,
    tile: &Tile,
    template: &PromptTemplate,
    examples: &[FewShotExample],
    opts: &BatchOptions,
) -> InferenceRecord {
    let bundle = match bundle_for(tile, template, examples, opts) {
        Ok(b) => b,
        Err(e) => {
            return InferenceRecord::failed(
                &tile.tile_id,
                "",
                backend.kind(),
                1,
                format!("prompt: {e}"),
            )
        }
    };
    match run_inference(backend, &opts.retry, &bundle, &tile.tile_id) {
        Ok(r) => r,
        Err(InferenceError::BackendUnavailable { attempts, last }) => InferenceRecord::failed(
            &tile.tile_id,
            &bundle.bundle_hash,
            backend.kind(),
            attempts,
            format!("backend unavailable: {last}"),
        ),
        Err(e) => InferenceRecord::failed(
            &tile.tile_id,
            &bundle.bundle_hash,
            backend.kind(),
            1,
            e.to_string(),
        ),
    }
}

/// Appends records to the journal in input order as soon as each prefix is
/// complete, so a crash loses at most the in-flight items.
struct OrderedJournal {
    out: Option<BufWriter<File>>,
    next: usize,
    pending: BTreeMap<usize, InferenceRecord>,
    done: Vec<Option<InferenceRecord>>,
}

impl OrderedJournal {
    fn push(&mut self, index: usize, record: InferenceRecord) -> std::io::Result<()> {
        self.pending.insert(index, record);
        while let Some(record) = self.pending.remove(&self.next) {
            if let Some(out) = self.out.as_mut() {
                serde_json::to_writer(&mut *out, &record)?;
                out.write_all(b"\n")?;
                out.flush()?;
            }
            self.done[self.next] = Some(record);
            self.next += 1;
        }
        Ok(())
    }
}

/// Runs every tile through the backend with at most `parallelism` requests in
/// flight. Output order equals input order; per-tile failures become records
/// and never abort the batch.
pub fn run_batch(
    backend: &dyn ModelBackend,
    tiles: &[Tile],
    template: &PromptTemplate,
    examples: &[FewShotExample],
    opts: &BatchOptions,
    journal: Option<&Path>,
) -> Result<(Vec<InferenceRecord>, BatchSummary), InferenceError> {
    if tiles.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    if opts.k > examples.len() {
        return Err(InferenceError::Config(format!(
            "k = {} but only {} examples",
            opts.k,
            examples.len()
        )));
    }
    let out = match journal {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(path)?,
            ))
        }
        None => None,
    };
    let mut writer = OrderedJournal {
        out,
        next: 0,
        pending: BTreeMap::new(),
        done: vec![None; tiles.len()],
    };

    let workers = opts.parallelism.clamp(1, tiles.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, InferenceRecord)>();
    let write_result = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(tile) = tiles.get(i) else { break };
                let record = process_tile(backend, tile, template, examples, opts);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: this thread owns the journal.
        let mut result = Ok(());
        for (i, record) in rx {
            if result.is_ok() {
                result = writer.push(i, record);
            } else {
                writer.done[i] = Some(record);
            }
        }
        result
    });
    write_result?;

    let records: Vec<InferenceRecord> = writer
        .done
        .into_iter()
        .map(|r| r.expect("every tile produces a record"))
        .collect();
    let summary = BatchSummary::from_records(&records);
    Ok((records, summary))
}
