//! Prompt assembly: task description with numbered steps, the output schema,
//! and k worked examples, rendered into one system and one user message.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagery::{self, synth, PanelRect, PNG_MEDIA_TYPE};
use crate::model::{serialize_assessment, PvAssessment};

/// The shipped few-shot bank, one JSON record per line.
pub const DEFAULT_EXAMPLES: &str = include_str!("../assets/examples.ndjson");

pub const DEFAULT_SHOTS: usize = 5;

pub const USER_INSTRUCTION: &str =
    "Analyze the following rooftop image and respond with the JSON object only.";

const TASK_TEXT: &str = "Identify the presence of solar panels in images of residential rooftops, \
and determine their locations and quantity within the images. You will be provided with images \
that may contain residential rooftop solar systems. Analyze each image to detect solar panels.";

const STEPS_TEXT: &str = "Steps:
1. **Image Analysis**: Examine the entire image to identify any objects that appear to be solar panels.
2. **Panel Location**: Determine the coordinates or area within the image where the solar panels are located.
3. **Panel Quantification**: Calculate or estimate the number of solar panels based on their appearance and arrangement.";

const SCHEMA_TEXT: &str = "The output should be in JSON format, structured as follows, with each field \
restricted to specific possible values for consistency and accuracy:
\"solar_panels_present\": A boolean value indicating if solar panels are detected. Possible values: [true, false]
\"location\": A description or coordinates indicating where the panels are located within the image. Possible values: [left, right, bottom, top, top-left, top-right, bottom-right, bottom-left, center, NA]
\"quantity\": The number of solar panels detected in the image. Possible values: [0 to 1, 1 to 5, 5 to 10, 10 to inf, NA]
\"likelihood_of_solar_panels_present\": A value indicating the probability of solar panels being present. Possible values: A decimal range from 0.00 to 1.00
\"confidence_of_solar_panels_present\": A value indicating the model's confidence in its prediction. Possible values: A decimal range from 0.00 to 1.00";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template section {0} is empty")]
    EmptySection(&'static str),
    #[error("requested {k} examples but only {available} available")]
    NotEnoughExamples { k: usize, available: usize },
    #[error("example {label:?}: {reason}")]
    InvalidExample { label: String, reason: String },
    #[error("example bank line {line}: {source}")]
    Bank {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("template file: {0}")]
    TemplateFile(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task_text: String,
    pub steps_text: String,
    pub schema_text: String,
    pub version: String,
}

fn template_version(task: &str, steps: &str, schema: &str) -> String {
    let mut h = Sha256::new();
    for part in [task, steps, schema] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..6])
}

impl PromptTemplate {
    pub fn new(
        task_text: impl Into<String>,
        steps_text: impl Into<String>,
        schema_text: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let (task_text, steps_text, schema_text) =
            (task_text.into(), steps_text.into(), schema_text.into());
        for (name, text) in [
            ("task", &task_text),
            ("steps", &steps_text),
            ("schema", &schema_text),
        ] {
            if text.trim().is_empty() {
                return Err(PromptError::EmptySection(name));
            }
        }
        let version = template_version(&task_text, &steps_text, &schema_text);
        Ok(Self {
            task_text,
            steps_text,
            schema_text,
            version,
        })
    }

    /// Override file: a JSON object with `task_text`, `steps_text` and
    /// `schema_text`. Any `version` in the file is recomputed.
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        #[derive(Deserialize)]
        struct Sections {
            task_text: String,
            steps_text: String,
            schema_text: String,
        }
        let s: Sections = serde_json::from_str(text)?;
        Self::new(s.task_text, s.steps_text, s.schema_text)
    }

    /// Task, steps and schema joined; the system text without examples.
    pub fn system_text(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.task_text, self.steps_text, self.schema_text
        )
    }
}

pub fn default_template() -> PromptTemplate {
    PromptTemplate::new(TASK_TEXT, STEPS_TEXT, SCHEMA_TEXT).expect("built-in template is non-empty")
}

/// Image attached to a few-shot example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExampleImage {
    /// Rendered on demand by the scene synthesizer.
    Synth {
        seed: u64,
        size: u32,
        panels: Vec<PanelRect>,
    },
    Base64 {
        media_type: String,
        data: String,
    },
}

impl ExampleImage {
    pub fn payload(&self) -> Result<(String, String), String> {
        match self {
            ExampleImage::Synth { seed, size, panels } => {
                let (raster, _) =
                    synth::synthesize_tile(panels, *size, *seed).map_err(|e| e.to_string())?;
                let png = imagery::encode_png(&raster).map_err(|e| e.to_string())?;
                Ok((PNG_MEDIA_TYPE.to_string(), base64_encode(&png)))
            }
            ExampleImage::Base64 { media_type, data } => Ok((media_type.clone(), data.clone())),
        }
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub label: String,
    pub assessment: PvAssessment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ExampleImage>,
}

/// Parses an example bank (one record per line), validating every example.
pub fn parse_example_bank(text: &str) -> Result<Vec<FewShotExample>, PromptError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: FewShotExample =
            serde_json::from_str(line).map_err(|source| PromptError::Bank {
                line: i + 1,
                source,
            })?;
        ex.assessment
            .validate()
            .map_err(|e| PromptError::InvalidExample {
                label: ex.label.clone(),
                reason: e.to_string(),
            })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn default_examples() -> Vec<FewShotExample> {
    parse_example_bank(DEFAULT_EXAMPLES).expect("bundled example bank is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub temperature: f64,
    /// Attach example images (when the example has one) to the user message.
    pub example_images: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            example_images: false,
        }
    }
}

/// An example as it appears in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedExample {
    pub label: String,
    pub assessment_json: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template: PromptTemplate,
    pub examples: Vec<RenderedExample>,
    pub image_media_type: String,
    pub image_payload: String,
    pub temperature: f64,
    pub bundle_hash: String,
}

#[derive(Serialize)]
struct HashInput<'a> {
    template: &'a PromptTemplate,
    examples: &'a [RenderedExample],
    image_media_type: &'a str,
    image_payload: &'a str,
    temperature_bits: u64,
}

fn bundle_hash(input: &HashInput<'_>) -> String {
    let bytes = serde_json::to_vec(input).expect("hash input serializes");
    hex::encode(&Sha256::digest(&bytes)[..16])
}

/// Default-option assembly: temperature 0, text-only examples.
pub fn assemble_prompt(
    template: &PromptTemplate,
    examples: &[FewShotExample],
    k: usize,
    image_payload: &str,
) -> Result<PromptBundle, PromptError> {
    assemble_prompt_with(
        template,
        examples,
        k,
        image_payload,
        &PromptOptions::default(),
    )
}

/// Takes the first `k` examples in order and fixes everything the request
/// depends on; `bundle_hash` covers all of it.
pub fn assemble_prompt_with(
    template: &PromptTemplate,
    examples: &[FewShotExample],
    k: usize,
    image_payload: &str,
    opts: &PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if k > examples.len() {
        return Err(PromptError::NotEnoughExamples {
            k,
            available: examples.len(),
        });
    }
    let rendered = examples[..k]
        .iter()
        .map(|ex| {
            let image = match (&ex.image, opts.example_images) {
                (Some(img), true) => {
                    Some(
                        img.payload()
                            .map_err(|reason| PromptError::InvalidExample {
                                label: ex.label.clone(),
                                reason,
                            })?,
                    )
                }
                _ => None,
            };
            Ok(RenderedExample {
                label: ex.label.clone(),
                assessment_json: serialize_assessment(&ex.assessment),
                image,
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;

    let hash = bundle_hash(&HashInput {
        template,
        examples: &rendered,
        image_media_type: PNG_MEDIA_TYPE,
        image_payload,
        temperature_bits: opts.temperature.to_bits(),
    });
    Ok(PromptBundle {
        template: template.clone(),
        examples: rendered,
        image_media_type: PNG_MEDIA_TYPE.to_string(),
        image_payload: image_payload.to_string(),
        temperature: opts.temperature,
        bundle_hash: hash,
    })
}

impl PromptBundle {
    /// Recomputes the hash from the other fields.
    pub fn verify_hash(&self) -> bool {
        self.bundle_hash
            == bundle_hash(&HashInput {
                template: &self.template,
                examples: &self.examples,
                image_media_type: &self.image_media_type,
                image_payload: &self.image_payload,
                temperature_bits: self.temperature.to_bits(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { media_type: String, data: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenated text parts.
    pub fn joined_text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The last image part, which for a rendered user message is the tile.
    pub fn last_image(&self) -> Option<(&str, &str)> {
        self.content.iter().rev().find_map(|p| match p {
            ContentPart::Image { media_type, data } => Some((media_type.as_str(), data.as_str())),
            ContentPart::Text { .. } => None,
        })
    }
}

/// System message: template text then the examples. User message: example
/// images (if any), the instruction, then the tile image last.
pub fn render_messages(bundle: &PromptBundle) -> Vec<ChatMessage> {
    let mut system = bundle.template.system_text();
    if !bundle.examples.is_empty() {
        system.push_str("\n\nExamples:");
        for ex in &bundle.examples {
            system.push_str(&format!("\n# {}:\n{}", ex.label, ex.assessment_json));
        }
    }

    let mut user = Vec::new();
    for ex in &bundle.examples {
        if let Some((media_type, data)) = &ex.image {
            user.push(ContentPart::Text {
                text: format!("Image for {}:", ex.label),
            });
            user.push(ContentPart::Image {
                media_type: media_type.clone(),
                data: data.clone(),
            });
        }
    }
    user.push(ContentPart::Text {
        text: USER_INSTRUCTION.to_string(),
    });
    user.push(ContentPart::Image {
        media_type: bundle.image_media_type.clone(),
        data: bundle.image_payload.clone(),
    });

    vec![
        ChatMessage::text(Role::System, system),
        ChatMessage {
            role: Role::User,
            content: user,
        },
    ]
}
