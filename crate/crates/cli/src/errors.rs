use pvscan_core::autolabel::{AutolabelError, ReviewError};
use pvscan_core::evaluation::EvalError;
use pvscan_core::finetune::FinetuneError;
use pvscan_core::geo::GeoError;
use pvscan_core::imagery::fetch::FetchError;
use pvscan_core::imagery::ImageryError;
use pvscan_core::inference::{BackendError, InferenceError};
use pvscan_core::ndjson::NdjsonError;
use pvscan_core::prompting::PromptError;

use crate::config::ConfigError;
use crate::workspace::LockedError;

/// Short category name for an operational error, taken from the first
/// recognized error in its chain.
pub fn categorize(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        let category = if cause.is::<LockedError>() {
            "lock"
        } else if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            "config"
        } else if cause.is::<FetchError>() {
            "imagery-fetch"
        } else if cause.is::<InferenceError>() || cause.is::<BackendError>() {
            "inference"
        } else if cause.is::<EvalError>() {
            "evaluation"
        } else if cause.is::<AutolabelError>() || cause.is::<ReviewError>() {
            "triage"
        } else if cause.is::<FinetuneError>() {
            "export"
        } else if cause.is::<GeoError>() {
            "ingest"
        } else if cause.is::<PromptError>() {
            "prompt"
        } else if cause.is::<ImageryError>() {
            "imagery"
        } else if cause.is::<NdjsonError>() || cause.is::<serde_json::Error>() {
            "data"
        } else if cause.is::<ureq::Error>() {
            "network"
        } else if cause.is::<std::io::Error>() {
            "io"
        } else {
            continue;
        };
        return category;
    }
    "operational"
}
