//! Event taxonomy, field values, validation and redaction.
//!
//! Everything here is a plain value type. Server-assigned data (session id,
//! sequence number, server clock) lives on [`StoredEvent`], never on the
//! envelope a learning tool sends.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::ids::SessionId;
use crate::time::Timestamp;

pub const DEFAULT_MAX_BLOB_BYTES: usize = 2 * 1024 * 1024;
pub const DEFAULT_MAX_EVENT_BYTES: usize = 4 * 1024 * 1024;

pub const VERDICT_SUCCESS: &str = "success";
pub const VERDICT_FAILURE: &str = "failure";
pub const VERDICT_PARTIAL: &str = "partial";

/// Field carrying the learner's reply address on help requests.
pub const LEARNER_EMAIL_FIELD: &str = "learner_email";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    String,
    Number,
    Date,
    Blob,
    KvList,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::String => "string",
            FieldKind::Number => "number",
            FieldKind::Date => "date",
            FieldKind::Blob => "blob",
            FieldKind::KvList => "kvlist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "string" => FieldKind::String,
            "number" => FieldKind::Number,
            "date" => FieldKind::Date,
            "blob" => FieldKind::Blob,
            "kvlist" => FieldKind::KvList,
            _ => return None,
        })
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub media_type: String,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    String(String),
    Number(f64),
    Date(Timestamp),
    Blob(Blob),
    KvList(Vec<Field>),
}

impl FieldValue {
    pub fn kind(&self) -> FieldKind {
        match self {
            FieldValue::String(_) => FieldKind::String,
            FieldValue::Number(_) => FieldKind::Number,
            FieldValue::Date(_) => FieldKind::Date,
            FieldValue::Blob(_) => FieldKind::Blob,
            FieldValue::KvList(_) => FieldKind::KvList,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            FieldValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn blob(media_type: impl Into<String>, data: impl Into<Vec<u8>>) -> Self {
        FieldValue::Blob(Blob {
            media_type: media_type.into(),
            data: data.into(),
        })
    }
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        FieldValue::String(s.to_owned())
    }
}

impl From<String> for FieldValue {
    fn from(s: String) -> Self {
        FieldValue::String(s)
    }
}

impl From<f64> for FieldValue {
    fn from(n: f64) -> Self {
        FieldValue::Number(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub value: FieldValue,
}

impl Field {
    pub fn new(name: impl Into<String>, value: impl Into<FieldValue>) -> Self {
        Field {
            name: name.into(),
            value: value.into(),
        }
    }
}

/// One semantic event as sent by a learning tool.
#[derive(Debug, Clone, PartialEq)]
pub struct EventEnvelope {
    pub event_type: String,
    pub client_timestamp: Timestamp,
    /// Empty for events not tied to an exercise.
    pub exercise: String,
    pub fields: Vec<Field>,
}

impl EventEnvelope {
    pub fn new(event_type: impl Into<String>, client_timestamp: Timestamp) -> Self {
        EventEnvelope {
            event_type: event_type.into(),
            client_timestamp,
            exercise: String::new(),
            fields: Vec::new(),
        }
    }

    pub fn with_exercise(mut self, exercise: impl Into<String>) -> Self {
        self.exercise = exercise.into();
        self
    }

    pub fn with_field(mut self, name: impl Into<String>, value: impl Into<FieldValue>) -> Self {
        self.fields.push(Field::new(name, value));
        self
    }

    pub fn field(&self, name: &str) -> Option<&FieldValue> {
        self.fields.iter().find(|f| f.name == name).map(|f| &f.value)
    }

    pub fn str_field(&self, name: &str) -> Option<&str> {
        self.field(name).and_then(FieldValue::as_str)
    }
}

/// An envelope after it has been persisted under a session.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredEvent {
    pub envelope: EventEnvelope,
    pub session_id: SessionId,
    /// 1-based, gap-free within a session.
    pub seq: u64,
    pub server_timestamp: Timestamp,
    /// Field names removed after storage, in the order they were redacted.
    pub redactions: Vec<String>,
}

impl StoredEvent {
    pub fn event_type(&self) -> &str {
        &self.envelope.event_type
    }

    /// Feedback verdict, when this is a `feedback` event that still carries one.
    pub fn verdict(&self) -> Option<&str> {
        if self.envelope.event_type == "feedback" {
            self.envelope.str_field("verdict")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequiredField {
    pub name: String,
    pub kind: FieldKind,
    /// Closed vocabulary for string fields, if any.
    pub allowed_values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventKindSchema {
    pub event_type: String,
    pub required_fields: Vec<RequiredField>,
    pub description: String,
}

impl EventKindSchema {
    fn new(event_type: &str, description: &str, required: &[(&str, FieldKind)]) -> Self {
        EventKindSchema {
            event_type: event_type.to_owned(),
            required_fields: required
                .iter()
                .map(|(name, kind)| RequiredField {
                    name: (*name).to_owned(),
                    kind: *kind,
                    allowed_values: None,
                })
                .collect(),
            description: description.to_owned(),
        }
    }
}

/// The five built-in event kinds. `helprequest` may additionally carry a
/// `snapshot` blob; optional fields are not part of the schema.
pub fn builtin_schemas() -> Vec<EventKindSchema> {
    let mut feedback = EventKindSchema::new(
        "feedback",
        "automatic assessment outcome for one submission",
        &[("verdict", FieldKind::String), ("message", FieldKind::String)],
    );
    feedback.required_fields[0].allowed_values = Some(
        [VERDICT_SUCCESS, VERDICT_FAILURE, VERDICT_PARTIAL]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    );
    vec![
        EventKindSchema::new(
            "action",
            "a user interaction in the tool",
            &[("action_name", FieldKind::String)],
        ),
        EventKindSchema::new("image", "a rendering of the tool state", &[("image", FieldKind::Blob)]),
        EventKindSchema::new(
            "question",
            "a question posed to the learner",
            &[("question_text", FieldKind::String)],
        ),
        feedback,
        EventKindSchema::new(
            "helprequest",
            "a learner asking a tutor for help",
            &[
                ("question_text", FieldKind::String),
                (LEARNER_EMAIL_FIELD, FieldKind::String),
            ],
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_blob_bytes: usize,
    pub max_event_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_blob_bytes: DEFAULT_MAX_BLOB_BYTES,
            max_event_bytes: DEFAULT_MAX_EVENT_BYTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("event type {0:?} is not a valid token")]
    BadTypeToken(String),
    #[error("required field {0:?} is missing")]
    MissingField(String),
    #[error("field {0:?} has the wrong kind")]
    WrongKind(String),
    #[error("field {0:?} has a value outside its vocabulary")]
    BadValue(String),
    #[error("{0:?} contains characters that cannot be carried in XML")]
    InvalidText(String),
    #[error("event exceeds the configured size limits")]
    Oversize,
    #[error("field {0:?} appears more than once")]
    DuplicateField(String),
}

impl ValidationError {
    pub fn code(&self) -> &'static str {
        match self {
            ValidationError::BadTypeToken(_) => "bad_type_token",
            ValidationError::MissingField(_) => "missing_field",
            ValidationError::WrongKind(_) => "wrong_kind",
            ValidationError::BadValue(_) => "bad_value",
            ValidationError::InvalidText(_) => "invalid_text",
            ValidationError::Oversize => "oversize",
            ValidationError::DuplicateField(_) => "duplicate_field",
        }
    }
}

/// An envelope that passed [`validate`]. Only obtainable through validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedEvent(EventEnvelope);

impl ValidatedEvent {
    pub fn envelope(&self) -> &EventEnvelope {
        &self.0
    }

    pub fn into_envelope(self) -> EventEnvelope {
        self.0
    }
}

pub fn is_valid_token(s: &str) -> bool {
    !s.is_empty() && s.split('.').all(is_valid_segment)
}

fn is_valid_segment(seg: &str) -> bool {
    let mut chars = seg.chars();
    matches!(chars.next(), Some('a'..='z')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// A token, optionally followed by `.*`.
pub fn is_valid_pattern(pattern: &str) -> bool {
    match pattern.strip_suffix(".*") {
        Some(prefix) => is_valid_token(prefix),
        None => is_valid_token(pattern),
    }
}

/// Exact match, or prefix match on whole segments when `pattern` ends in `.*`.
pub fn match_type(event_type: &str, pattern: &str) -> bool {
    match pattern.strip_suffix(".*") {
        Some(prefix) => event_type
            .strip_prefix(prefix)
            .is_some_and(|rest| rest.len() > 1 && rest.starts_with('.')),
        None => event_type == pattern,
    }
}

/// Characters XML 1.0 can carry (as literals or character references).
pub fn is_xml_text(s: &str) -> bool {
    s.chars()
        .all(|c| matches!(c, '\t' | '\n' | '\r' | '\u{20}'..='\u{D7FF}' | '\u{E000}'..='\u{FFFD}' | '\u{10000}'..))
}

pub fn validate(
    envelope: EventEnvelope,
    schemas: &[EventKindSchema],
    limits: &Limits,
) -> Result<ValidatedEvent, ValidationError> {
    if !is_valid_token(&envelope.event_type) {
        return Err(ValidationError::BadTypeToken(envelope.event_type));
    }
    if !is_xml_text(&envelope.exercise) {
        return Err(ValidationError::InvalidText("exercise".into()));
    }
    check_fields(&envelope.fields, limits)?;

    if let Some(schema) = schemas.iter().find(|s| s.event_type == envelope.event_type) {
        for req in &schema.required_fields {
            let value = envelope
                .field(&req.name)
                .ok_or_else(|| ValidationError::MissingField(req.name.clone()))?;
            if value.kind() != req.kind {
                return Err(ValidationError::WrongKind(req.name.clone()));
            }
            if let (Some(allowed), FieldValue::String(s)) = (&req.allowed_values, value) {
                if !allowed.iter().any(|a| a == s) {
                    return Err(ValidationError::BadValue(req.name.clone()));
                }
            }
        }
    }

    if codec::encode(&envelope).len() > limits.max_event_bytes {
        return Err(ValidationError::Oversize);
    }
    Ok(ValidatedEvent(envelope))
}

fn check_fields(fields: &[Field], limits: &Limits) -> Result<(), ValidationError> {
    let mut seen = HashSet::with_capacity(fields.len());
    for field in fields {
        if !seen.insert(field.name.as_str()) {
            return Err(ValidationError::DuplicateField(field.name.clone()));
        }
        if !is_xml_text(&field.name) {
            return Err(ValidationError::InvalidText(field.name.clone()));
        }
        match &field.value {
            FieldValue::String(s) if !is_xml_text(s) => return Err(ValidationError::InvalidText(field.name.clone())),
            FieldValue::Number(n) if !n.is_finite() => return Err(ValidationError::BadValue(field.name.clone())),
            FieldValue::Blob(blob) => {
                if blob.data.len() > limits.max_blob_bytes {
                    return Err(ValidationError::Oversize);
                }
                if blob.media_type.is_empty() {
                    return Err(ValidationError::BadValue(field.name.clone()));
                }
                if !is_xml_text(&blob.media_type) {
                    return Err(ValidationError::InvalidText(field.name.clone()));
                }
            }
            FieldValue::KvList(items) => check_fields(items, limits)?,
            _ => {}
        }
    }
    Ok(())
}

/// Removes the named top-level fields. Idempotent; redacting an absent field
/// only records its name.
pub fn redact(stored: &StoredEvent, field_names: &[&str]) -> StoredEvent {
    let mut out = stored.clone();
    out.envelope.fields.retain(|f| !field_names.contains(&f.name.as_str()));
    for name in field_names {
        if !out.redactions.iter().any(|r| r == name) {
            out.redactions.push((*name).to_owned());
        }
    }
    out
}
