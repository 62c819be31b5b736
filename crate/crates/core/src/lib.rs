//! Rooftop solar panel assessment from satellite tiles with a vision-capable
//! language model: imagery ingestion and tiling, prompt assembly, inference
//! with strict output parsing, evaluation, confidence-based triage and
//! fine-tuning dataset export.

pub mod autolabel;
pub mod evaluation;
pub mod finetune;
pub mod geo;
pub mod imagery;
pub mod inference;
pub mod model;
pub mod ndjson;
pub mod prompting;
pub mod retry;
