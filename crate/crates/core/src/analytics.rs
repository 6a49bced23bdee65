//! Teacher-facing view models assembled from store queries.

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::activity::ActivityConfig;
use crate::auth::Pseudonym;
use crate::codec::format_number;
use crate::ids::SessionId;
use crate::model::{match_type, Field, FieldValue, StoredEvent, LEARNER_EMAIL_FIELD};
use crate::store::{
    ActivityTotals, Bucket, EventStore, ExerciseProgressMatrix, ExerciseStats, Page, SessionSummary, StoreError,
    TimeRange, TimelineBucket,
};
use crate::time::Timestamp;

pub const REDACTED: &str = "(redacted)";
pub const RECENT_SESSIONS: usize = 20;

const DAY_MILLIS: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RendererShape {
    TextLine,
    QuestionCard,
    ImageCard,
    FeedbackCard,
    HelpRequestCard,
    GenericFieldTable,
}

impl RendererShape {
    pub fn as_str(self) -> &'static str {
        match self {
            RendererShape::TextLine => "text_line",
            RendererShape::QuestionCard => "question_card",
            RendererShape::ImageCard => "image_card",
            RendererShape::FeedbackCard => "feedback_card",
            RendererShape::HelpRequestCard => "help_request_card",
            RendererShape::GenericFieldTable => "generic_field_table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RendererDescriptor {
    pub renderer_id: String,
    pub applies_to: String,
    pub shape: RendererShape,
}

impl RendererDescriptor {
    pub fn new(renderer_id: impl Into<String>, applies_to: impl Into<String>, shape: RendererShape) -> Self {
        RendererDescriptor {
            renderer_id: renderer_id.into(),
            applies_to: applies_to.into(),
            shape,
        }
    }
}

/// Maps event types to renderers. The longest matching pattern wins; ties go
/// to the earlier registration; unmatched types use the generic field table.
#[derive(Debug, Clone)]
pub struct RendererRegistry {
    descriptors: Vec<RendererDescriptor>,
    fallback: RendererDescriptor,
}

impl Default for RendererRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl RendererRegistry {
    pub fn empty() -> Self {
        let shape = RendererShape::GenericFieldTable;
        RendererRegistry {
            descriptors: Vec::new(),
            fallback: RendererDescriptor::new(shape.as_str(), "*", shape),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        for (pattern, shape) in [
            ("action", RendererShape::TextLine),
            ("question", RendererShape::QuestionCard),
            ("image", RendererShape::ImageCard),
            ("feedback", RendererShape::FeedbackCard),
            ("helprequest", RendererShape::HelpRequestCard),
        ] {
            reg.register(RendererDescriptor::new(shape.as_str(), pattern, shape));
        }
        reg
    }

    pub fn register(&mut self, descriptor: RendererDescriptor) {
        self.descriptors.push(descriptor);
    }

    pub fn descriptors(&self) -> &[RendererDescriptor] {
        &self.descriptors
    }

    pub fn resolve(&self, event_type: &str) -> &RendererDescriptor {
        let mut best: Option<&RendererDescriptor> = None;
        for d in &self.descriptors {
            if match_type(event_type, &d.applies_to) && best.is_none_or(|b| d.applies_to.len() > b.applies_to.len()) {
                best = Some(d);
            }
        }
        best.unwrap_or(&self.fallback)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedItem {
    pub seq: u64,
    pub server_timestamp: Timestamp,
    pub client_timestamp: Timestamp,
    pub event_type: String,
    pub exercise: String,
    pub renderer_id: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionViewModel {
    pub session_id: SessionId,
    pub activity_id: String,
    pub pseudonym: Pseudonym,
    pub started_at: Timestamp,
    /// Events in the whole session, regardless of `until`.
    pub event_count: u64,
    pub until: Option<u64>,
    pub items: Vec<RenderedItem>,
}

/// `blob_base` is the URL prefix under which `<seq>/<field>` serves a blob.
pub fn build_session_view(
    store: &EventStore,
    session_id: &SessionId,
    until: Option<u64>,
    registry: &RendererRegistry,
    blob_base: &str,
) -> Result<SessionViewModel, StoreError> {
    let session = store.session(session_id).ok_or(StoreError::UnknownSession)?;
    let event_count = store.session_event_count(session_id)?;
    let items = store
        .session_events(session_id, until)?
        .iter()
        .map(|e| render_item(e, registry, blob_base))
        .collect();
    Ok(SessionViewModel {
        session_id: session.session_id,
        activity_id: session.activity_id,
        pseudonym: session.pseudonym,
        started_at: session.started_at,
        event_count,
        until,
        items,
    })
}

pub fn render_item(event: &StoredEvent, registry: &RendererRegistry, blob_base: &str) -> RenderedItem {
    let descriptor = registry.resolve(event.event_type());
    let env = &event.envelope;
    let blob_href = |name: &str| format!("{}/{}/{}", blob_base.trim_end_matches('/'), event.seq, name);
    let text = |name: &str| match env.field(name) {
        Some(FieldValue::String(s)) if name != LEARNER_EMAIL_FIELD => json!(s),
        Some(_) => json!(REDACTED),
        None if event.redactions.iter().any(|r| r == name) => json!(REDACTED),
        None => Value::Null,
    };

    let mut payload = Map::new();
    match descriptor.shape {
        RendererShape::TextLine => {
            let line = env.str_field("action_name").unwrap_or(&env.event_type);
            payload.insert("text".into(), json!(line));
        }
        RendererShape::QuestionCard => {
            payload.insert("question_text".into(), text("question_text"));
        }
        RendererShape::ImageCard => {
            let images: Vec<Value> = env
                .fields
                .iter()
                .filter_map(|f| match &f.value {
                    FieldValue::Blob(b) if b.media_type.starts_with("image/") => Some(json!({
                        "field": f.name,
                        "media_type": b.media_type,
                        "bytes": b.data.len(),
                        "href": blob_href(&f.name),
                    })),
                    _ => None,
                })
                .collect();
            payload.insert("images".into(), Value::Array(images));
        }
        RendererShape::FeedbackCard => {
            let verdict = text("verdict");
            payload.insert("badge".into(), verdict.clone());
            payload.insert("verdict".into(), verdict);
            payload.insert("message".into(), text("message"));
        }
        RendererShape::HelpRequestCard => {
            payload.insert("question_text".into(), text("question_text"));
            payload.insert(LEARNER_EMAIL_FIELD.into(), json!(REDACTED));
            if let Some(FieldValue::Blob(_)) = env.field("snapshot") {
                payload.insert("snapshot_href".into(), json!(blob_href("snapshot")));
            }
        }
        RendererShape::GenericFieldTable => {}
    }
    payload.insert("fields".into(), field_table(event, &blob_href));

    RenderedItem {
        seq: event.seq,
        server_timestamp: event.server_timestamp,
        client_timestamp: env.client_timestamp,
        event_type: env.event_type.clone(),
        exercise: env.exercise.clone(),
        renderer_id: descriptor.renderer_id.clone(),
        payload: Value::Object(payload),
    }
}

/// Every field as `{name, kind, value}` rows, redactions appended.
fn field_table(event: &StoredEvent, blob_href: &dyn Fn(&str) -> String) -> Value {
    let mut rows: Vec<Value> = event
        .envelope
        .fields
        .iter()
        .map(|f| field_row(f, Some(blob_href)))
        .collect();
    for name in &event.redactions {
        if event.envelope.field(name).is_none() {
            rows.push(json!({ "name": name, "kind": "redacted", "value": REDACTED }));
        }
    }
    Value::Array(rows)
}

fn field_row(field: &Field, blob_href: Option<&dyn Fn(&str) -> String>) -> Value {
    let value = if field.name == LEARNER_EMAIL_FIELD {
        json!(REDACTED)
    } else {
        match &field.value {
            FieldValue::String(s) => json!(s),
            FieldValue::Number(n) => json!(format_number(*n)),
            FieldValue::Date(t) => json!(t.to_iso()),
            FieldValue::Blob(b) => {
                let mut v = json!({ "media_type": b.media_type, "bytes": b.data.len() });
                if let Some(href) = blob_href {
                    v["href"] = json!(href(&field.name));
                }
                v
            }
            FieldValue::KvList(items) => Value::Array(items.iter().map(|f| field_row(f, None)).collect()),
        }
    };
    json!({ "name": field.name, "kind": field.value.kind().as_str(), "value": value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    NoAttempt,
    Attempted,
    Succeeded,
    Failed,
}

impl CellStatus {
    /// Success dominates failure, which dominates a bare attempt.
    pub fn from_stats(stats: Option<&ExerciseStats>) -> Self {
        match stats {
            Some(s) if s.successes >= 1 => CellStatus::Succeeded,
            Some(s) if s.failures >= 1 => CellStatus::Failed,
            Some(s) if s.attempts >= 1 => CellStatus::Attempted,
            _ => CellStatus::NoAttempt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExerciseCell {
    pub status: CellStatus,
    pub attempts: u64,
    pub successes: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExerciseRow {
    pub pseudonym: Pseudonym,
    pub cells: Vec<ExerciseCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExerciseTable {
    pub activity_id: String,
    pub columns: Vec<String>,
    pub rows: Vec<ExerciseRow>,
}

pub fn build_exercise_table(store: &EventStore, cfg: &ActivityConfig) -> Result<ExerciseTable, StoreError> {
    let matrix = store.exercise_stats(&cfg.activity_id)?;
    let mut pseudonyms: Vec<Pseudonym> = store
        .list_users(&cfg.activity_id)?
        .into_iter()
        .map(|u| u.pseudonym)
        .collect();
    pseudonyms.sort();
    Ok(exercise_table_from(
        &cfg.activity_id,
        &cfg.exercise_order,
        &pseudonyms,
        &matrix,
    ))
}

/// Pure assembly over a stats matrix; also covers users with no feedback yet.
pub fn exercise_table_from(
    activity_id: &str,
    exercise_order: &[String],
    pseudonyms: &[Pseudonym],
    matrix: &ExerciseProgressMatrix,
) -> ExerciseTable {
    let mut columns: Vec<String> = exercise_order.to_vec();
    let mut unseen: Vec<&String> = matrix
        .keys()
        .map(|(_, e)| e)
        .filter(|e| !e.is_empty() && !exercise_order.contains(e))
        .collect();
    unseen.sort();
    unseen.dedup();
    columns.extend(unseen.into_iter().cloned());

    let mut all: Vec<Pseudonym> = pseudonyms.to_vec();
    all.extend(matrix.keys().map(|(p, _)| p.clone()));
    all.sort();
    all.dedup();

    let rows = all
        .into_iter()
        .map(|pseudonym| {
            let cells = columns
                .iter()
                .map(|ex| {
                    let stats = matrix.get(&(pseudonym.clone(), ex.clone()));
                    ExerciseCell {
                        status: CellStatus::from_stats(stats),
                        attempts: stats.map_or(0, |s| s.attempts),
                        successes: stats.map_or(0, |s| s.successes),
                        failures: stats.map_or(0, |s| s.failures),
                    }
                })
                .collect();
            ExerciseRow { pseudonym, cells }
        })
        .collect();
    ExerciseTable {
        activity_id: activity_id.to_owned(),
        columns,
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DashboardModel {
    pub activity_id: String,
    pub course_label: String,
    pub generated_at: Timestamp,
    pub totals: ActivityTotals,
    pub recent_sessions: Vec<SessionSummary>,
    /// Seven daily buckets ending with the day of `generated_at`, zeros included.
    pub timeline_7d: Vec<TimelineBucket>,
}

pub fn build_dashboard(store: &EventStore, cfg: &ActivityConfig, now: Timestamp) -> Result<DashboardModel, StoreError> {
    let activity_id = &cfg.activity_id;
    let totals = store.totals(activity_id)?;
    let recent_sessions = store.list_sessions(activity_id, None, Page::new(0, RECENT_SESSIONS))?;
    let today = Bucket::Day.start_of(now);
    let start = today.saturating_add_millis(-6 * DAY_MILLIS);
    let end = today.saturating_add_millis(DAY_MILLIS);
    let filled = match TimeRange::new(start, end) {
        Some(range) => fill_days(start, 7, &store.timeline(activity_id, Bucket::Day, range)?),
        None => Vec::new(),
    };
    Ok(DashboardModel {
        activity_id: activity_id.clone(),
        course_label: cfg.course_label.clone(),
        generated_at: now,
        totals,
        recent_sessions,
        timeline_7d: filled,
    })
}

fn fill_days(start: Timestamp, days: i64, buckets: &[TimelineBucket]) -> Vec<TimelineBucket> {
    (0..days)
        .map(|i| {
            let bucket_start = start.saturating_add_millis(i * DAY_MILLIS);
            buckets
                .iter()
                .find(|b| b.bucket_start == bucket_start)
                .cloned()
                .unwrap_or(TimelineBucket {
                    bucket_start,
                    event_count: 0,
                    session_count: 0,
                })
        })
        .collect()
}

/// Non-empty buckets over the whole recorded history, or within `range`.
pub fn build_timeline(
    store: &EventStore,
    activity_id: &str,
    bucket: Bucket,
    range: Option<TimeRange>,
) -> Result<Vec<TimelineBucket>, StoreError> {
    let range = range.unwrap_or_else(|| TimeRange::new(Timestamp::MIN, Timestamp::MAX).expect("MIN < MAX"));
    store.timeline(activity_id, bucket, range)
}

#[cfg(test)]
mod tests;
