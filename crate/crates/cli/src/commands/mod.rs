//! One function per CLI subcommand. Each prints a single JSON summary line
//! on stdout and records a run in the run log.

pub mod acquire;
pub mod evaluate;
pub mod export;
pub mod labels;
pub mod predict;
pub mod synth;
pub mod triage;

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use anyhow::Context;
use pvscan_core::ndjson;
use pvscan_core::prompting::{
    default_examples, default_template, parse_example_bank, FewShotExample, PromptTemplate,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::cli::ServeArgs;
use crate::config::Config;
use crate::workspace::{DataDir, RunRecord};

/// Prints the machine-readable summary of a finished run.
pub(crate) fn emit(run: &RunRecord, extra: serde_json::Value) {
    let mut out = serde_json::json!({
        "stage": run.stage,
        "run_id": run.run_id,
        "counts": run.counts,
    });
    if let (Some(o), serde_json::Value::Object(extra)) = (out.as_object_mut(), extra) {
        o.extend(extra);
    }
    println!("{out}");
}

/// Inserts or replaces records by key, keeping the existing order and
/// appending new keys at the end. Returns how many records changed.
pub(crate) fn upsert<T, K>(
    path: &Path,
    fresh: Vec<T>,
    key: impl Fn(&T) -> K,
) -> anyhow::Result<usize>
where
    T: Serialize + DeserializeOwned + PartialEq,
    K: Eq + Hash,
{
    let mut records: Vec<T> = ndjson::read(path)?;
    let mut index: HashMap<K, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (key(r), i))
        .collect();
    let mut changed = 0;
    for r in fresh {
        match index.get(&key(&r)) {
            Some(&i) if records[i] == r => {}
            Some(&i) => {
                records[i] = r;
                changed += 1;
            }
            None => {
                index.insert(key(&r), records.len());
                records.push(r);
                changed += 1;
            }
        }
    }
    if changed > 0 || !path.exists() {
        ndjson::write_all(path, &records)?;
    }
    Ok(changed)
}

pub(crate) fn load_prompt(
    config: &Config,
) -> anyhow::Result<(PromptTemplate, Vec<FewShotExample>)> {
    let template = match &config.prompt.template {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read template {}", p.display()))?;
            PromptTemplate::from_json(&text)
                .with_context(|| format!("invalid template {}", p.display()))?
        }
        None => default_template(),
    };
    let examples = match &config.prompt.examples {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read examples {}", p.display()))?;
            parse_example_bank(&text)
                .with_context(|| format!("invalid example bank {}", p.display()))?
        }
        None => default_examples(),
    };
    Ok((template, examples))
}

pub fn serve(data: &DataDir, mut config: Config, args: ServeArgs) -> anyhow::Result<()> {
    if let Some(p) = args.port {
        config.serve.port = p;
    }
    if let Some(b) = args.bind {
        config.serve.bind = b;
    }
    if args.static_dir.is_some() {
        config.serve.static_dir = args.static_dir;
    }
    config.validate()?;
    let state = crate::server::AppState::open(data.clone(), &config)?;
    let addr = format!("{}:{}", config.serve.bind, config.serve.port);
    let runtime = tokio::runtime::Runtime::new().context("cannot start async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("cannot bind {addr}"))?;
        let local = listener.local_addr()?;
        println!(
            "{}",
            serde_json::json!({"stage": "serve", "listening": format!("http://{local}")})
        );
        axum::serve(listener, crate::server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server failed")
    })
}
