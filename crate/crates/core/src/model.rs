//! Domain types for one tile's assessment and the strict output contract the
//! model has to honor: parsing, validation, lenient repair and canonical
//! serialization.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const FIELD_PRESENT: &str = "solar_panels_present";
pub const FIELD_LOCATION: &str = "location";
pub const FIELD_QUANTITY: &str = "quantity";
pub const FIELD_LIKELIHOOD: &str = "likelihood_of_solar_panels_present";
pub const FIELD_CONFIDENCE: &str = "confidence_of_solar_panels_present";

/// Field names in the order the output schema lists them.
pub const FIELD_ORDER: [&str; 5] = [
    FIELD_PRESENT,
    FIELD_LOCATION,
    FIELD_QUANTITY,
    FIELD_LIKELIHOOD,
    FIELD_CONFIDENCE,
];

const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no such location label: {0:?}")]
    NoSuchLabel(String),
    #[error("no such quantity bucket: {0:?}")]
    NoSuchBucket(String),
    #[error("{field} must lie in [0, 1], got {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("inconsistent assessment: {0}")]
    Inconsistent(String),
}

/// Where panels sit inside a tile: a thirds grid plus `NA` for "no panels".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LocationLabel {
    #[serde(rename = "top")]
    Top,
    #[serde(rename = "bottom")]
    Bottom,
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "center")]
    Center,
    #[serde(rename = "top-left")]
    TopLeft,
    #[serde(rename = "top-right")]
    TopRight,
    #[serde(rename = "bottom-left")]
    BottomLeft,
    #[serde(rename = "bottom-right")]
    BottomRight,
    #[serde(rename = "NA")]
    NotApplicable,
}

impl LocationLabel {
    pub const ALL: [LocationLabel; 10] = [
        LocationLabel::Top,
        LocationLabel::Bottom,
        LocationLabel::Left,
        LocationLabel::Right,
        LocationLabel::Center,
        LocationLabel::TopLeft,
        LocationLabel::TopRight,
        LocationLabel::BottomLeft,
        LocationLabel::BottomRight,
        LocationLabel::NotApplicable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LocationLabel::Top => "top",
            LocationLabel::Bottom => "bottom",
            LocationLabel::Left => "left",
            LocationLabel::Right => "right",
            LocationLabel::Center => "center",
            LocationLabel::TopLeft => "top-left",
            LocationLabel::TopRight => "top-right",
            LocationLabel::BottomLeft => "bottom-left",
            LocationLabel::BottomRight => "bottom-right",
            LocationLabel::NotApplicable => "NA",
        }
    }

    /// Exact match against the canonical spelling only.
    pub fn from_canonical(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }

    pub fn is_na(self) -> bool {
        self == LocationLabel::NotApplicable
    }
}

impl fmt::Display for LocationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocationLabel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        canonicalize_location(s)
    }
}

/// Normalizes free-form spelling (case, surrounding whitespace, `_` or space
/// separators) onto one of the ten taxonomy values.
pub fn canonicalize_location(raw: &str) -> Result<LocationLabel, ModelError> {
    let mut normalized = String::with_capacity(raw.len());
    for ch in raw.trim().chars() {
        let ch = match ch {
            ' ' | '_' | '\t' => '-',
            c => c.to_ascii_lowercase(),
        };
        if ch == '-' && normalized.ends_with('-') {
            continue;
        }
        normalized.push(ch);
    }
    if normalized == "na" {
        return Ok(LocationLabel::NotApplicable);
    }
    LocationLabel::ALL
        .into_iter()
        .find(|l| !l.is_na() && l.as_str() == normalized)
        .ok_or_else(|| ModelError::NoSuchLabel(raw.to_string()))
}

/// Panel count range for a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuantityBucket {
    #[serde(rename = "0 to 1")]
    ZeroToOne,
    #[serde(rename = "1 to 5")]
    OneToFive,
    #[serde(rename = "5 to 10")]
    FiveToTen,
    #[serde(rename = "10 to inf")]
    TenPlus,
    #[serde(rename = "NA")]
    NotApplicable,
}

impl QuantityBucket {
    pub const ALL: [QuantityBucket; 5] = [
        QuantityBucket::ZeroToOne,
        QuantityBucket::OneToFive,
        QuantityBucket::FiveToTen,
        QuantityBucket::TenPlus,
        QuantityBucket::NotApplicable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantityBucket::ZeroToOne => "0 to 1",
            QuantityBucket::OneToFive => "1 to 5",
            QuantityBucket::FiveToTen => "5 to 10",
            QuantityBucket::TenPlus => "10 to inf",
            QuantityBucket::NotApplicable => "NA",
        }
    }

    pub fn from_canonical(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.as_str() == s)
    }

    pub fn is_na(self) -> bool {
        self == QuantityBucket::NotApplicable
    }
}

impl fmt::Display for QuantityBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantityBucket {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
        if collapsed.eq_ignore_ascii_case("na") {
            return Ok(QuantityBucket::NotApplicable);
        }
        let lowered = collapsed.to_ascii_lowercase();
        QuantityBucket::from_canonical(&lowered)
            .ok_or_else(|| ModelError::NoSuchBucket(s.to_string()))
    }
}

/// Maps a panel count onto its bucket. Ranges are upper-inclusive, so the
/// shared endpoints 1, 5 and 10 fall into the lower bucket.
pub fn bucket_for_count(n: u64) -> QuantityBucket {
    match n {
        0..=1 => QuantityBucket::ZeroToOne,
        2..=5 => QuantityBucket::OneToFive,
        6..=10 => QuantityBucket::FiveToTen,
        _ => QuantityBucket::TenPlus,
    }
}

fn check_unit(field: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { field, value })
    }
}

fn check_consistency(
    present: bool,
    location: LocationLabel,
    quantity: QuantityBucket,
) -> Result<(), ModelError> {
    match (present, location.is_na(), quantity.is_na()) {
        (false, true, true) | (true, false, false) => Ok(()),
        (false, _, _) => Err(ModelError::Inconsistent(format!(
            "panels absent but location={location}, quantity={quantity}"
        ))),
        (true, _, _) => Err(ModelError::Inconsistent(format!(
            "panels present but location={location}, quantity={quantity}"
        ))),
    }
}

/// The model's structured verdict for one tile.
///
/// Serde uses the wire field names, so records written with this derive are
/// readable by anything that speaks the canonical assessment JSON. Reals are
/// kept at full precision here; [`serialize_assessment`] rounds them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvAssessment {
    #[serde(rename = "solar_panels_present")]
    pub present: bool,
    pub location: LocationLabel,
    pub quantity: QuantityBucket,
    #[serde(rename = "likelihood_of_solar_panels_present")]
    pub likelihood: f64,
    #[serde(rename = "confidence_of_solar_panels_present")]
    pub confidence: f64,
}

impl PvAssessment {
    pub fn new(
        present: bool,
        location: LocationLabel,
        quantity: QuantityBucket,
        likelihood: f64,
        confidence: f64,
    ) -> Result<Self, ModelError> {
        let a = Self {
            present,
            location,
            quantity,
            likelihood,
            confidence,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_unit(FIELD_LIKELIHOOD, self.likelihood)?;
        check_unit(FIELD_CONFIDENCE, self.confidence)?;
        check_consistency(self.present, self.location, self.quantity)
    }

    /// The categorical part of the verdict, comparable with a label.
    pub fn label_projection(&self) -> (bool, LocationLabel, QuantityBucket) {
        (self.present, self.location, self.quantity)
    }
}

/// A human (or auto-accepted) label for one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub tile_id: String,
    pub present: bool,
    pub location: LocationLabel,
    pub quantity: QuantityBucket,
    pub annotator: String,
    pub annotated_at: DateTime<Utc>,
}

impl GroundTruthLabel {
    pub fn new(
        tile_id: impl Into<String>,
        present: bool,
        location: LocationLabel,
        quantity: QuantityBucket,
        annotator: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let label = Self {
            tile_id: tile_id.into(),
            present,
            location,
            quantity,
            annotator: annotator.into(),
            annotated_at: Utc::now(),
        };
        label.validate()?;
        Ok(label)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_consistency(self.present, self.location, self.quantity)
    }

    pub fn label_projection(&self) -> (bool, LocationLabel, QuantityBucket) {
        (self.present, self.location, self.quantity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Repaired,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub status: ParseStatus,
    pub assessment: Option<PvAssessment>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Why the response was rejected; `None` unless status is `rejected`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub raw_excerpt: String,
}

impl ParseOutcome {
    fn rejected(raw: &str, diagnostic: impl Into<String>, warnings: Vec<String>) -> Self {
        Self {
            status: ParseStatus::Rejected,
            assessment: None,
            warnings,
            diagnostic: Some(diagnostic.into()),
            raw_excerpt: excerpt(raw),
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self.status, ParseStatus::Ok | ParseStatus::Repaired)
    }
}

fn excerpt(raw: &str) -> String {
    raw.chars().take(EXCERPT_CHARS).collect()
}

/// Byte range of the balanced `{...}` starting at `start`, honoring strings.
fn balanced_object_end(s: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in s[start..].char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` in `raw` that parses as a JSON object. Prose and
/// code fences around it are ignored.
pub fn extract_first_object(raw: &str) -> Option<Map<String, Value>> {
    raw.char_indices()
        .filter(|&(_, c)| c == '{')
        .find_map(|(start, _)| {
            let end = balanced_object_end(raw, start)?;
            serde_json::from_str::<Map<String, Value>>(&raw[start..end]).ok()
        })
}

struct FieldReader<'a> {
    object: &'a Map<String, Value>,
    mode: ParseMode,
    warnings: Vec<String>,
}

impl FieldReader<'_> {
    fn get(&self, field: &str) -> Result<&Value, String> {
        self.object
            .get(field)
            .ok_or_else(|| format!("missing field {field:?}"))
    }

    fn present(&mut self) -> Result<bool, String> {
        match self.get(FIELD_PRESENT)? {
            Value::Bool(b) => Ok(*b),
            Value::String(s) if self.mode == ParseMode::Lenient => {
                let b = match s.trim().to_ascii_lowercase().as_str() {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("{FIELD_PRESENT} is not a boolean: {s:?}")),
                };
                self.warnings
                    .push(format!("{FIELD_PRESENT} given as string {s:?}"));
                Ok(b)
            }
            other => Err(format!("{FIELD_PRESENT} is not a boolean: {other}")),
        }
    }

    fn location(&mut self) -> Result<LocationLabel, String> {
        let Value::String(s) = self.get(FIELD_LOCATION)? else {
            return Err(format!("{FIELD_LOCATION} is not a string"));
        };
        if let Some(l) = LocationLabel::from_canonical(s) {
            return Ok(l);
        }
        if self.mode == ParseMode::Strict {
            return Err(format!("{FIELD_LOCATION} out of vocabulary: {s:?}"));
        }
        let l = canonicalize_location(s).map_err(|e| e.to_string())?;
        self.warnings.push(format!(
            "{FIELD_LOCATION} {s:?} normalized to {l:?}",
            l = l.as_str()
        ));
        Ok(l)
    }

    fn quantity(&mut self) -> Result<QuantityBucket, String> {
        let Value::String(s) = self.get(FIELD_QUANTITY)? else {
            return Err(format!("{FIELD_QUANTITY} is not a string"));
        };
        if let Some(q) = QuantityBucket::from_canonical(s) {
            return Ok(q);
        }
        if self.mode == ParseMode::Strict {
            return Err(format!("{FIELD_QUANTITY} out of vocabulary: {s:?}"));
        }
        let q: QuantityBucket = s.parse().map_err(|e: ModelError| e.to_string())?;
        self.warnings.push(format!(
            "{FIELD_QUANTITY} {s:?} normalized to {q:?}",
            q = q.as_str()
        ));
        Ok(q)
    }

    fn unit(&mut self, field: &'static str) -> Result<f64, String> {
        let value = match self.get(field)? {
            Value::Number(n) => n
                .as_f64()
                .ok_or_else(|| format!("{field} is not a number"))?,
            Value::String(s) if self.mode == ParseMode::Lenient => {
                let v: f64 = s
                    .trim()
                    .parse()
                    .map_err(|_| format!("{field} is not a number: {s:?}"))?;
                self.warnings.push(format!("{field} given as string {s:?}"));
                v
            }
            other => return Err(format!("{field} is not a number: {other}")),
        };
        check_unit(field, value).map_err(|e| e.to_string())?;
        Ok(value)
    }
}

/// Parses raw model output into an assessment.
///
/// Strict mode rejects anything that is not exactly the canonical contract.
/// Lenient mode normalizes spelling and, when `solar_panels_present` is
/// false, coerces location and quantity to `NA`; every repair is recorded as
/// a warning.
pub fn parse_model_response(raw: &str, mode: ParseMode) -> ParseOutcome {
    let Some(object) = extract_first_object(raw) else {
        return ParseOutcome::rejected(raw, "no JSON object found", Vec::new());
    };
    let mut reader = FieldReader {
        object: &object,
        mode,
        warnings: Vec::new(),
    };

    let unknown: Vec<&String> = object
        .keys()
        .filter(|k| !FIELD_ORDER.contains(&k.as_str()))
        .collect();
    if !unknown.is_empty() {
        let msg = format!("unexpected fields {unknown:?}");
        if mode == ParseMode::Strict {
            return ParseOutcome::rejected(raw, msg, Vec::new());
        }
        reader.warnings.push(msg);
    }

    let fields = (|| {
        Ok::<_, String>((
            reader.present()?,
            reader.location()?,
            reader.quantity()?,
            reader.unit(FIELD_LIKELIHOOD)?,
            reader.unit(FIELD_CONFIDENCE)?,
        ))
    })();
    let (present, mut location, mut quantity, likelihood, confidence) = match fields {
        Ok(f) => f,
        Err(diag) => return ParseOutcome::rejected(raw, diag, reader.warnings),
    };
    let mut warnings = reader.warnings;

    if !present && (!location.is_na() || !quantity.is_na()) && mode == ParseMode::Lenient {
        warnings.push(format!(
            "panels absent: location {location:?} and quantity {quantity:?} coerced to NA",
            location = location.as_str(),
            quantity = quantity.as_str()
        ));
        location = LocationLabel::NotApplicable;
        quantity = QuantityBucket::NotApplicable;
    }

    match PvAssessment::new(present, location, quantity, likelihood, confidence) {
        Ok(a) => ParseOutcome {
            status: if warnings.is_empty() {
                ParseStatus::Ok
            } else {
                ParseStatus::Repaired
            },
            assessment: Some(a),
            warnings,
            diagnostic: None,
            raw_excerpt: excerpt(raw),
        },
        Err(e) => ParseOutcome::rejected(raw, e.to_string(), warnings),
    }
}

/// Canonical single-line JSON: schema field order, reals at two decimals.
pub fn serialize_assessment(a: &PvAssessment) -> String {
    format!(
        "{{\"{FIELD_PRESENT}\": {}, \"{FIELD_LOCATION}\": \"{}\", \"{FIELD_QUANTITY}\": \"{}\", \"{FIELD_LIKELIHOOD}\": {:.2}, \"{FIELD_CONFIDENCE}\": {:.2}}}",
        a.present,
        a.location.as_str(),
        a.quantity.as_str(),
        a.likelihood,
        a.confidence
    )
}
