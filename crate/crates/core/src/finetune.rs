//! Train/test splitting and chat-format JSONL export for fine-tuning.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagery::{decode_image_payload, encode_image_payload, Tile, PNG_MEDIA_TYPE};
use crate::model::{
    parse_model_response, serialize_assessment, GroundTruthLabel, ParseMode, ParseStatus,
    PvAssessment,
};
use crate::ndjson::write_atomic;
use crate::prompting::{
    assemble_prompt_with, render_messages, FewShotExample, PromptOptions, PromptTemplate, Role,
};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("need at least 2 distinct labeled tiles, got {0}")]
    TooFewLabels(usize),
    #[error("ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("no tile for {0}")]
    MissingTile(String),
    #[error("no label for {0}")]
    MissingLabel(String),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
    pub stratified: bool,
}

/// Latest label per tile; later entries in `labels` win.
pub fn latest_labels(labels: &[GroundTruthLabel]) -> BTreeMap<String, GroundTruthLabel> {
    labels
        .iter()
        .map(|l| (l.tile_id.clone(), l.clone()))
        .collect()
}

fn take_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Deterministic split in `seed`. Stratified mode splits each presence class
/// separately so both sides keep the class mix. The training side always
/// gets at least one item and leaves at least one for test.
pub fn split_dataset(
    labels: &[GroundTruthLabel],
    ratio: f64,
    seed: u64,
    stratified: bool,
) -> Result<DatasetSplit, FinetuneError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FinetuneError::InvalidRatio(ratio));
    }
    let latest = latest_labels(labels);
    let n = latest.len();
    if n < 2 {
        return Err(FinetuneError::TooFewLabels(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let groups: Vec<Vec<String>> = if stratified {
        let (pos, neg): (Vec<_>, Vec<_>) = latest.values().partition(|l| l.present);
        [pos, neg]
            .into_iter()
            .map(|g| g.into_iter().map(|l| l.tile_id.clone()).collect())
            .collect()
    } else {
        vec![latest.keys().cloned().collect()]
    };
    for mut ids in groups {
        ids.shuffle(&mut rng);
        let k = take_count(ids.len(), ratio);
        test.extend(ids.split_off(k));
        train.extend(ids);
    }
    // Keep both sides non-empty.
    if train.is_empty() {
        train.push(test.pop().expect("n >= 2"));
    } else if test.is_empty() {
        test.push(train.pop().expect("n >= 2"));
    }
    train.sort();
    test.sort();
    Ok(DatasetSplit {
        train_ids: train,
        test_ids: test,
        seed,
        ratio,
        stratified,
    })
}

/// Field spellings of the target fine-tuning service.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportProfile {
    /// `image_url` parts with data URLs, plain-string system/assistant content.
    #[default]
    OpenaiChat,
    /// Typed parts everywhere, images as `{type: image, media_type, data}`.
    Generic,
}

impl std::str::FromStr for ExportProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "openai-chat" => Ok(Self::OpenaiChat),
            "generic" => Ok(Self::Generic),
            other => Err(format!(
                "unknown export profile {other:?} (expected openai-chat or generic)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineTuneRecord {
    pub system_text: String,
    pub user_text: String,
    pub media_type: String,
    pub image_payload: String,
    pub assistant_text: String,
}

impl FineTuneRecord {
    pub fn to_json(&self, profile: ExportProfile) -> Value {
        match profile {
            ExportProfile::OpenaiChat => json!({"messages": [
                {"role": "system", "content": self.system_text},
                {"role": "user", "content": [
                    {"type": "text", "text": self.user_text},
                    {"type": "image_url", "image_url": {
                        "url": format!("data:{};base64,{}", self.media_type, self.image_payload)
                    }}
                ]},
                {"role": "assistant", "content": self.assistant_text}
            ]}),
            ExportProfile::Generic => json!({"messages": [
                {"role": "system", "content": [{"type": "text", "text": self.system_text}]},
                {"role": "user", "content": [
                    {"type": "text", "text": self.user_text},
                    {"type": "image", "media_type": self.media_type, "data": self.image_payload}
                ]},
                {"role": "assistant", "content": [{"type": "text", "text": self.assistant_text}]}
            ]}),
        }
    }

    /// Structural decoding only; content checks happen in [`validate_record`].
    pub fn from_json(v: &Value, profile: ExportProfile) -> Result<Self, String> {
        let msgs = v
            .get("messages")
            .and_then(Value::as_array)
            .ok_or("missing messages array")?;
        let [system, user, assistant] = msgs.as_slice() else {
            return Err(format!("expected 3 messages, found {}", msgs.len()));
        };
        for (m, role) in [(system, "system"), (user, "user"), (assistant, "assistant")] {
            if m.get("role").and_then(Value::as_str) != Some(role) {
                return Err(format!("expected a {role} message"));
            }
        }
        let text_of = |m: &Value| -> Result<String, String> {
            match m.get("content") {
                Some(Value::String(s)) if profile == ExportProfile::OpenaiChat => Ok(s.clone()),
                Some(Value::Array(parts)) if profile == ExportProfile::Generic => {
                    match parts.as_slice() {
                        [p] if p.get("type").and_then(Value::as_str) == Some("text") => p
                            .get("text")
                            .and_then(Value::as_str)
                            .map(str::to_string)
                            .ok_or_else(|| "text part without text".to_string()),
                        _ => Err("expected a single text part".into()),
                    }
                }
                _ => Err("unexpected content shape".into()),
            }
        };
        let parts = user
            .get("content")
            .and_then(Value::as_array)
            .ok_or("user content is not an array")?;
        let [text_part, image_part] = parts.as_slice() else {
            return Err("user content needs a text part and an image part".into());
        };
        let user_text = text_part
            .get("text")
            .and_then(Value::as_str)
            .ok_or("user text part without text")?
            .to_string();
        let (media_type, image_payload) = match profile {
            ExportProfile::OpenaiChat => {
                let url = image_part
                    .pointer("/image_url/url")
                    .and_then(Value::as_str)
                    .ok_or("image part without url")?;
                let rest = url
                    .strip_prefix("data:")
                    .ok_or("image url is not a data url")?;
                let (media, data) = rest
                    .split_once(";base64,")
                    .ok_or("image url is not base64")?;
                (media.to_string(), data.to_string())
            }
            ExportProfile::Generic => (
                image_part
                    .get("media_type")
                    .and_then(Value::as_str)
                    .ok_or("image part without media_type")?
                    .to_string(),
                image_part
                    .get("data")
                    .and_then(Value::as_str)
                    .ok_or("image part without data")?
                    .to_string(),
            ),
        };
        Ok(Self {
            system_text: text_of(system)?,
            user_text,
            media_type,
            image_payload,
            assistant_text: text_of(assistant)?,
        })
    }
}

/// Prompt configuration shared by every exported record.
#[derive(Debug, Clone)]
pub struct ExportPrompt<'a> {
    pub template: &'a PromptTemplate,
    pub examples: &'a [FewShotExample],
    pub k: usize,
}

pub fn build_record(
    tile: &Tile,
    label: &GroundTruthLabel,
    prompt: &ExportPrompt<'_>,
) -> Result<FineTuneRecord, FinetuneError> {
    let payload = encode_image_payload(tile).map_err(|e| FinetuneError::Prompt(e.to_string()))?;
    let bundle = assemble_prompt_with(
        prompt.template,
        prompt.examples,
        prompt.k,
        &payload,
        &PromptOptions::default(),
    )
    .map_err(|e| FinetuneError::Prompt(e.to_string()))?;
    let messages = render_messages(&bundle);
    let text_for = |role| {
        messages
            .iter()
            .find(|m| m.role == role)
            .map(|m| m.joined_text())
            .unwrap_or_default()
    };
    // Targets carry full certainty in the human label.
    let target = PvAssessment {
        present: label.present,
        location: label.location,
        quantity: label.quantity,
        likelihood: if label.present { 1.0 } else { 0.0 },
        confidence: 1.0,
    };
    Ok(FineTuneRecord {
        system_text: text_for(Role::System),
        user_text: text_for(Role::User),
        media_type: PNG_MEDIA_TYPE.to_string(),
        image_payload: payload,
        assistant_text: serialize_assessment(&target),
    })
}

/// Writes one JSON object per id, in the order given. The output depends
/// only on the inputs, so re-exporting produces identical bytes.
pub fn export_jsonl(
    ids: &[String],
    load_tile: &dyn Fn(&str) -> Option<Tile>,
    truths: &HashMap<String, GroundTruthLabel>,
    prompt: &ExportPrompt<'_>,
    profile: ExportProfile,
    path: &Path,
) -> Result<usize, FinetuneError> {
    let mut out = Vec::new();
    for id in ids {
        let label = truths
            .get(id)
            .ok_or_else(|| FinetuneError::MissingLabel(id.clone()))?;
        let tile = load_tile(id).ok_or_else(|| FinetuneError::MissingTile(id.clone()))?;
        let record = build_record(&tile, label, prompt)?;
        serde_json::to_writer(&mut out, &record.to_json(profile)).expect("json value serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(ids.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineErrorKind {
    /// Not a JSON object.
    Json,
    /// Wrong message structure.
    Shape,
    /// Image payload missing, not base64, or not a decodable PNG.
    Image,
    /// Assistant text is not a canonical, valid assessment.
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub kind: LineErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub lines: usize,
    pub valid: usize,
    pub errors_by_kind: BTreeMap<LineErrorKind, usize>,
    pub errors: Vec<LineError>,
}

impl ValidationReport {
    pub fn all_valid(&self) -> bool {
        self.lines == self.valid
    }
}

pub fn validate_record(line: &str, profile: ExportProfile) -> Result<(), (LineErrorKind, String)> {
    let v: Value = serde_json::from_str(line).map_err(|e| (LineErrorKind::Json, e.to_string()))?;
    if !v.is_object() {
        return Err((LineErrorKind::Json, "line is not an object".into()));
    }
    let record = FineTuneRecord::from_json(&v, profile).map_err(|e| (LineErrorKind::Shape, e))?;
    if record.media_type != PNG_MEDIA_TYPE {
        return Err((
            LineErrorKind::Image,
            format!("unsupported media type {}", record.media_type),
        ));
    }
    decode_image_payload(&record.image_payload)
        .map_err(|e| (LineErrorKind::Image, e.to_string()))?;
    let outcome = parse_model_response(&record.assistant_text, ParseMode::Strict);
    if outcome.status != ParseStatus::Ok {
        return Err((
            LineErrorKind::Assistant,
            outcome
                .diagnostic
                .unwrap_or_else(|| "assistant text rejected".into()),
        ));
    }
    Ok(())
}

/// Checks every line; bad lines are reported, never fatal.
pub fn validate_jsonl_text(text: &str, profile: ExportProfile) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, line) in text.lines().enumerate() {
        report.lines += 1;
        match validate_record(line, profile) {
            Ok(()) => report.valid += 1,
            Err((kind, message)) => {
                *report.errors_by_kind.entry(kind).or_default() += 1;
                report.errors.push(LineError {
                    line: i + 1,
                    kind,
                    message,
                });
            }
        }
    }
    report
}

pub fn validate_jsonl(
    path: &Path,
    profile: ExportProfile,
) -> Result<ValidationReport, FinetuneError> {
    Ok(validate_jsonl_text(
        &std::fs::read_to_string(path)?,
        profile,
    ))
}

/// What an export run produced and how to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub seed: u64,
    pub ratio: f64,
    pub stratified: bool,
    pub profile: ExportProfile,
    pub k: usize,
    pub template_version: String,
    pub train_count: usize,
    pub test_count: usize,
    pub train_file: String,
    pub test_file: String,
    pub train_sha256: String,
    pub test_sha256: String,
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LocationLabel, QuantityBucket};
    use chrono::DateTime;

    fn labels(n: usize, positives: usize) -> Vec<GroundTruthLabel> {
        (0..n)
            .map(|i| {
                let present = i < positives;
                GroundTruthLabel {
                    tile_id: format!("t{i:03}"),
                    present,
                    location: if present {
                        LocationLabel::Center
                    } else {
                        LocationLabel::NotApplicable
                    },
                    quantity: if present {
                        QuantityBucket::OneToFive
                    } else {
                        QuantityBucket::NotApplicable
                    },
                    annotator: "test".into(),
                    annotated_at: DateTime::UNIX_EPOCH,
                }
            })
            .collect()
    }

    #[test]
    fn ten_labels_split_eight_two() {
        let s = split_dataset(&labels(10, 5), 0.8, 1, false).unwrap();
        assert_eq!((s.train_ids.len(), s.test_ids.len()), (8, 2));
        assert_eq!(s, split_dataset(&labels(10, 5), 0.8, 1, false).unwrap());
    }

    #[test]
    fn stratified_keeps_class_mix() {
        let l = labels(100, 90);
        let s = split_dataset(&l, 0.8, 3, true).unwrap();
        let pos: usize = s.train_ids.iter().filter(|id| id.as_str() < "t090").count();
        assert!((pos as i64 - 72).abs() <= 1);
        assert!((s.train_ids.len() as i64 - pos as i64 - 8).abs() <= 1);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_dataset(&labels(1, 1), 0.5, 0, false),
            Err(FinetuneError::TooFewLabels(1))
        ));
        assert!(matches!(
            split_dataset(&labels(4, 1), 1.0, 0, false),
            Err(FinetuneError::InvalidRatio(_))
        ));
    }

    #[test]
    fn tiny_ratio_still_trains_on_one() {
        let s = split_dataset(&labels(3, 1), 0.01, 0, true).unwrap();
        assert_eq!(s.train_ids.len(), 1);
        assert_eq!(s.test_ids.len(), 2);
    }
}
