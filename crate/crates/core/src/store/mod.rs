//! Ordered, durable event persistence with maintained aggregates.
//!
//! Every aggregate (counts, exercise progress, timelines, user lists) is
//! served from per-activity indices that are updated on append; no query
//! deserializes stored events to compute a number. Events themselves are
//! kept in memory per session and, for the file backend, journaled before
//! an append is acknowledged.

mod export;
mod journal;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

pub use export::ImportSummary;
use journal::{EventRecord, FrameLoc, Journal, Record, SessionRecord};

use crate::auth::{Pseudonym, Session};
use crate::codec;
use crate::ids::{SessionId, SessionToken};
use crate::model::{match_type, redact, StoredEvent, ValidatedEvent, VERDICT_FAILURE, VERDICT_SUCCESS};
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown session")]
    UnknownSession,
    #[error("unknown activity")]
    UnknownActivity,
    #[error("unknown event")]
    UnknownEvent,
    #[error("session already exists")]
    DuplicateSession,
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("journal corrupt at byte {offset}: {message}")]
    Corrupt { offset: u64, message: String },
    #[error("corrupt export stream at byte {position}: {message}")]
    CorruptStream { position: u64, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppendOutcome {
    Stored(StoredEvent),
    /// The session opted out; nothing was persisted.
    Discarded,
}

/// Half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    start: Timestamp,
    end: Timestamp,
}

impl TimeRange {
    pub fn new(start: Timestamp, end: Timestamp) -> Option<Self> {
        (start <= end).then_some(TimeRange { start, end })
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn end(&self) -> Timestamp {
        self.end
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts < self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AggregateFilter {
    pub activity_id: String,
    pub pseudonym: Option<Pseudonym>,
    /// Type pattern as accepted by [`match_type`].
    pub event_type: Option<String>,
    pub exercise: Option<String>,
    /// Applied to the server timestamp.
    pub time_range: Option<TimeRange>,
}

impl AggregateFilter {
    pub fn activity(activity_id: impl Into<String>) -> Self {
        AggregateFilter {
            activity_id: activity_id.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Hour,
    Day,
    Week,
}

impl Bucket {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hour" => Some(Bucket::Hour),
            "day" => Some(Bucket::Day),
            "week" => Some(Bucket::Week),
            _ => None,
        }
    }

    const fn width_millis(self) -> i64 {
        match self {
            Bucket::Hour => 3_600_000,
            Bucket::Day => 86_400_000,
            Bucket::Week => 7 * 86_400_000,
        }
    }

    /// Start of the bucket containing `ts`. Weeks start Monday 00:00 UTC.
    pub fn start_of(self, ts: Timestamp) -> Timestamp {
        // 1969-12-29 was a Monday.
        let origin = if self == Bucket::Week { -3 * 86_400_000 } else { 0 };
        let w = self.width_millis();
        let start = (ts.millis() - origin).div_euclid(w) * w + origin;
        Timestamp::from_millis(start).unwrap_or(ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Page {
    pub offset: usize,
    pub limit: usize,
}

impl Page {
    pub const ALL: Page = Page {
        offset: 0,
        limit: usize::MAX,
    };

    pub fn new(offset: usize, limit: usize) -> Self {
        Page { offset, limit }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserSummary {
    pub pseudonym: Pseudonym,
    pub session_count: u64,
    pub last_active: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub pseudonym: Pseudonym,
    pub started_at: Timestamp,
    pub event_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExerciseStats {
    pub attempts: u64,
    pub successes: u64,
    pub failures: u64,
    pub last_attempt_at: Timestamp,
}

/// Keyed by (pseudonym, exercise); only pairs with at least one attempt.
pub type ExerciseProgressMatrix = BTreeMap<(Pseudonym, String), ExerciseStats>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TimelineBucket {
    pub bucket_start: Timestamp,
    pub event_count: u64,
    pub session_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ActivityTotals {
    pub users: u64,
    pub sessions: u64,
    pub events: u64,
    pub help_requests: u64,
}

#[derive(Debug, Default)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(id) = self.ids.get(s) {
            return *id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_owned());
        self.ids.insert(s.to_owned(), id);
        id
    }

    fn get(&self, s: &str) -> Option<u32> {
        self.ids.get(s).copied()
    }

    fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }
}

/// Compact per-event key used by scans; never holds payload.
#[derive(Debug, Clone, Copy)]
struct EventRow {
    session: u32,
    pseudonym: u32,
    event_type: u32,
    exercise: u32,
    server_ts: i64,
    seq: u64,
}

#[derive(Debug)]
struct SessionRow {
    session_id: SessionId,
    pseudonym: u32,
    started_at: Timestamp,
    event_count: u64,
}

#[derive(Debug, Clone, Copy)]
struct UserRow {
    session_count: u64,
    last_active: Timestamp,
}

#[derive(Debug, Default)]
struct ActivityIndex {
    types: Interner,
    exercises: Interner,
    pseudonyms: Interner,
    rows: Vec<EventRow>,
    sessions: Vec<SessionRow>,
    session_pos: HashMap<SessionId, u32>,
    users: HashMap<u32, UserRow>,
    stats: HashMap<(u32, u32), ExerciseStats>,
    type_counts: Vec<u64>,
}

impl ActivityIndex {
    fn add_session(&mut self, session: &Session) {
        let pseudonym = self.pseudonyms.intern(session.pseudonym.as_str());
        let pos = self.sessions.len() as u32;
        self.sessions.push(SessionRow {
            session_id: session.session_id,
            pseudonym,
            started_at: session.started_at,
            event_count: 0,
        });
        self.session_pos.insert(session.session_id, pos);
        let user = self.users.entry(pseudonym).or_insert(UserRow {
            session_count: 0,
            last_active: session.started_at,
        });
        user.session_count += 1;
        user.last_active = user.last_active.max(session.started_at);
    }

    fn add_event(&mut self, event: &StoredEvent) {
        let Some(&session) = self.session_pos.get(&event.session_id) else {
            return;
        };
        let event_type = self.types.intern(&event.envelope.event_type);
        let exercise = self.exercises.intern(&event.envelope.exercise);
        let row = &mut self.sessions[session as usize];
        row.event_count += 1;
        let pseudonym = row.pseudonym;
        self.rows.push(EventRow {
            session,
            pseudonym,
            event_type,
            exercise,
            server_ts: event.server_timestamp.millis(),
            seq: event.seq,
        });
        if self.type_counts.len() <= event_type as usize {
            self.type_counts.resize(event_type as usize + 1, 0);
        }
        self.type_counts[event_type as usize] += 1;
        if let Some(user) = self.users.get_mut(&pseudonym) {
            user.last_active = user.last_active.max(event.server_timestamp);
        }
        if event.envelope.event_type == "feedback" {
            let stats = self.stats.entry((pseudonym, exercise)).or_insert(ExerciseStats {
                attempts: 0,
                successes: 0,
                failures: 0,
                last_attempt_at: event.server_timestamp,
            });
            stats.attempts += 1;
            stats.last_attempt_at = stats.last_attempt_at.max(event.server_timestamp);
            match event.verdict() {
                Some(VERDICT_SUCCESS) => stats.successes += 1,
                Some(VERDICT_FAILURE) => stats.failures += 1,
                _ => {}
            }
        }
    }

    /// Adjusts verdict tallies when a redaction changed an event's verdict.
    fn replace_event(&mut self, old: &StoredEvent, new: &StoredEvent) {
        if old.verdict() == new.verdict() {
            return;
        }
        let (Some(&session), Some(exercise)) = (
            self.session_pos.get(&old.session_id),
            self.exercises.get(&old.envelope.exercise),
        ) else {
            return;
        };
        let pseudonym = self.sessions[session as usize].pseudonym;
        if let Some(stats) = self.stats.get_mut(&(pseudonym, exercise)) {
            for (verdict, delta) in [(old.verdict(), -1i64), (new.verdict(), 1)] {
                let slot = match verdict {
                    Some(VERDICT_SUCCESS) => &mut stats.successes,
                    Some(VERDICT_FAILURE) => &mut stats.failures,
                    _ => continue,
                };
                *slot = slot.saturating_add_signed(delta);
            }
        }
    }

    fn pseudonym(&self, id: u32) -> Pseudonym {
        Pseudonym::parse(self.pseudonyms.name(id)).expect("only valid pseudonyms are interned")
    }

    fn matching_types(&self, pattern: &str) -> Vec<bool> {
        self.types.names.iter().map(|t| match_type(t, pattern)).collect()
    }
}

#[derive(Debug, Default)]
struct SessionLog {
    events: Vec<StoredEvent>,
    /// Journal location of each event (file backend only).
    frames: Vec<FrameLoc>,
}

#[derive(Debug)]
struct SessionSlot {
    session: Session,
    /// Serializes appends and redactions within the session.
    write: Mutex<()>,
    log: RwLock<SessionLog>,
}

/// Handle to an event store; cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct EventStore {
    sessions: RwLock<HashMap<SessionId, Arc<SessionSlot>>>,
    tokens: RwLock<HashMap<SessionToken, SessionId>>,
    activities: RwLock<HashMap<String, Arc<RwLock<ActivityIndex>>>>,
    journal: Option<Mutex<Journal>>,
}

impl EventStore {
    pub fn in_memory() -> Self {
        EventStore {
            sessions: RwLock::default(),
            tokens: RwLock::default(),
            activities: RwLock::default(),
            journal: None,
        }
    }

    /// Opens (or creates) a file-backed store and replays its journal.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let (journal, records) = Journal::open(path)?;
        let mut store = EventStore::in_memory();
        for (loc, record) in records {
            match record {
                Record::Session(rec) => {
                    store
                        .apply_session(Session {
                            session_id: rec.id,
                            token: rec.token,
                            activity_id: rec.activity,
                            pseudonym: rec.pseudonym,
                            started_at: rec.started_at,
                            opt_out: rec.opt_out,
                        })
                        .map_err(|_| StoreError::Corrupt {
                            offset: loc.offset,
                            message: "duplicate session record".into(),
                        })?;
                }
                Record::Event(rec) => store.replay_event(loc, rec)?,
                Record::Void => {}
            }
        }
        store.journal = Some(Mutex::new(journal));
        Ok(store)
    }

    pub fn is_durable(&self) -> bool {
        self.journal.is_some()
    }

    pub fn journal_path(&self) -> Option<std::path::PathBuf> {
        self.journal.as_ref().map(|j| j.lock().path().to_path_buf())
    }

    /// Makes an activity known so that its (empty) views can be served.
    pub fn register_activity(&self, activity_id: &str) {
        self.activity_index_or_create(activity_id);
    }

    pub fn activity_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.activities.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn activity_index_or_create(&self, activity_id: &str) -> Arc<RwLock<ActivityIndex>> {
        if let Some(idx) = self.activities.read().get(activity_id) {
            return idx.clone();
        }
        self.activities
            .write()
            .entry(activity_id.to_owned())
            .or_default()
            .clone()
    }

    fn activity_index(&self, activity_id: &str) -> Result<Arc<RwLock<ActivityIndex>>, StoreError> {
        self.activities
            .read()
            .get(activity_id)
            .cloned()
            .ok_or(StoreError::UnknownActivity)
    }

    fn slot(&self, session_id: &SessionId) -> Result<Arc<SessionSlot>, StoreError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or(StoreError::UnknownSession)
    }

    /// Persists a new session. Opt-out sessions are stored but never appear
    /// in any listing or aggregate.
    pub fn insert_session(&self, session: Session) -> Result<(), StoreError> {
        if self.sessions.read().contains_key(&session.session_id) {
            return Err(StoreError::DuplicateSession);
        }
        if let Some(journal) = &self.journal {
            journal.lock().append(&[Record::Session(session_record(&session))])?;
        }
        self.apply_session(session)
    }

    fn apply_session(&self, session: Session) -> Result<(), StoreError> {
        let index = self.activity_index_or_create(&session.activity_id);
        {
            let mut sessions = self.sessions.write();
            if sessions.contains_key(&session.session_id) {
                return Err(StoreError::DuplicateSession);
            }
            sessions.insert(
                session.session_id,
                Arc::new(SessionSlot {
                    session: session.clone(),
                    write: Mutex::new(()),
                    log: RwLock::default(),
                }),
            );
        }
        self.tokens.write().insert(session.token, session.session_id);
        if !session.opt_out {
            index.write().add_session(&session);
        }
        Ok(())
    }

    fn replay_event(&self, loc: FrameLoc, rec: EventRecord) -> Result<(), StoreError> {
        let corrupt = |message: String| StoreError::Corrupt {
            offset: loc.offset,
            message,
        };
        let slot = self
            .slot(&rec.sid)
            .map_err(|_| corrupt("event for unknown session".into()))?;
        let envelope = codec::decode(rec.xml.as_bytes()).map_err(|e| corrupt(e.to_string()))?;
        let event = StoredEvent {
            envelope,
            session_id: rec.sid,
            seq: rec.seq,
            server_timestamp: rec.sts,
            redactions: rec.red,
        };
        let mut log = slot.log.write();
        let next = log.events.len() as u64 + 1;
        if rec.seq == next {
            log.events.push(event.clone());
            log.frames.push(loc);
            drop(log);
            if !slot.session.opt_out {
                self.activity_index(&slot.session.activity_id)?
                    .write()
                    .add_event(&event);
            }
        } else if (1..next).contains(&rec.seq) {
            let i = rec.seq as usize - 1;
            let old = std::mem::replace(&mut log.events[i], event.clone());
            log.frames[i] = loc;
            drop(log);
            if !slot.session.opt_out {
                self.activity_index(&slot.session.activity_id)?
                    .write()
                    .replace_event(&old, &event);
            }
        } else {
            return Err(corrupt(format!("sequence gap: expected {next}, found {}", rec.seq)));
        }
        Ok(())
    }

    pub fn session(&self, session_id: &SessionId) -> Option<Session> {
        self.sessions.read().get(session_id).map(|s| s.session.clone())
    }

    pub fn session_by_token(&self, token: &SessionToken) -> Option<Session> {
        let id = *self.tokens.read().get(token)?;
        self.session(&id)
    }

    /// Assigns the next sequence number and durably stores the event. The
    /// returned event is what the trigger engine must be handed.
    pub fn append(
        &self,
        session_id: &SessionId,
        event: ValidatedEvent,
        now: Timestamp,
    ) -> Result<AppendOutcome, StoreError> {
        let slot = self.slot(session_id)?;
        if slot.session.opt_out {
            return Ok(AppendOutcome::Discarded);
        }
        let _guard = slot.write.lock();
        let (seq, server_timestamp) = {
            let log = slot.log.read();
            let last_ts = log.events.last().map(|e| e.server_timestamp);
            // Server time never runs backwards within a session.
            (log.events.len() as u64 + 1, last_ts.map_or(now, |t| t.max(now)))
        };
        let stored = StoredEvent {
            envelope: event.into_envelope(),
            session_id: *session_id,
            seq,
            server_timestamp,
            redactions: Vec::new(),
        };
        let loc = match &self.journal {
            Some(journal) => Some(journal.lock().append(&[Record::Event(event_record(&stored))])?[0]),
            None => None,
        };
        {
            let mut log = slot.log.write();
            log.events.push(stored.clone());
            if let Some(loc) = loc {
                log.frames.push(loc);
            }
        }
        self.activity_index(&slot.session.activity_id)?
            .write()
            .add_event(&stored);
        Ok(AppendOutcome::Stored(stored))
    }

    /// Removes fields from a stored event, physically overwriting the
    /// journaled copy for the file backend.
    pub fn redact(&self, session_id: &SessionId, seq: u64, field_names: &[&str]) -> Result<StoredEvent, StoreError> {
        let slot = self.slot(session_id)?;
        let _guard = slot.write.lock();
        let (old, loc) = {
            let log = slot.log.read();
            let i = seq.checked_sub(1).ok_or(StoreError::UnknownEvent)? as usize;
            let old = log.events.get(i).cloned().ok_or(StoreError::UnknownEvent)?;
            (old, log.frames.get(i).copied())
        };
        let new = redact(&old, field_names);
        if new == old {
            return Ok(new);
        }
        let mut new_loc = None;
        if let (Some(journal), Some(loc)) = (&self.journal, loc) {
            let mut journal = journal.lock();
            let record = Record::Event(event_record(&new));
            if !journal.rewrite(loc, &record)? {
                let appended = journal.append(std::slice::from_ref(&record))?[0];
                journal.rewrite(loc, &Record::Void)?;
                new_loc = Some(appended);
            }
        }
        {
            let mut log = slot.log.write();
            let i = seq as usize - 1;
            log.events[i] = new.clone();
            if let Some(l) = new_loc {
                log.frames[i] = l;
            }
        }
        if !slot.session.opt_out {
            self.activity_index(&slot.session.activity_id)?
                .write()
                .replace_event(&old, &new);
        }
        Ok(new)
    }

    /// Events with `seq <= until` (all when `until` is absent), ascending.
    pub fn session_events(&self, session_id: &SessionId, until: Option<u64>) -> Result<Vec<StoredEvent>, StoreError> {
        let slot = self.slot(session_id)?;
        let log = slot.log.read();
        let n = until.map_or(log.events.len(), |u| (u as usize).min(log.events.len()));
        Ok(log.events[..n].to_vec())
    }

    pub fn event(&self, session_id: &SessionId, seq: u64) -> Result<StoredEvent, StoreError> {
        let slot = self.slot(session_id)?;
        let log = slot.log.read();
        seq.checked_sub(1)
            .and_then(|i| log.events.get(i as usize))
            .cloned()
            .ok_or(StoreError::UnknownEvent)
    }

    pub fn session_event_count(&self, session_id: &SessionId) -> Result<u64, StoreError> {
        Ok(self.slot(session_id)?.log.read().events.len() as u64)
    }

    /// Users by pseudonym, most recently active first.
    pub fn list_users(&self, activity_id: &str) -> Result<Vec<UserSummary>, StoreError> {
        let index = self.activity_index(activity_id)?;
        let index = index.read();
        let mut users: Vec<UserSummary> = index
            .users
            .iter()
            .map(|(id, row)| UserSummary {
                pseudonym: index.pseudonym(*id),
                session_count: row.session_count,
                last_active: row.last_active,
            })
            .collect();
        users.sort_by(|a, b| {
            b.last_active
                .cmp(&a.last_active)
                .then_with(|| a.pseudonym.cmp(&b.pseudonym))
        });
        Ok(users)
    }

    /// Sessions, most recently started first.
    pub fn list_sessions(
        &self,
        activity_id: &str,
        pseudonym: Option<&Pseudonym>,
        page: Page,
    ) -> Result<Vec<SessionSummary>, StoreError> {
        let index = self.activity_index(activity_id)?;
        let index = index.read();
        let wanted = match pseudonym {
            Some(p) => match index.pseudonyms.get(p.as_str()) {
                Some(id) => Some(id),
                None => return Ok(Vec::new()),
            },
            None => None,
        };
        let mut rows: Vec<&SessionRow> = index
            .sessions
            .iter()
            .filter(|s| wanted.is_none_or(|w| s.pseudonym == w))
            .collect();
        rows.sort_by(|a, b| {
            b.started_at
                .cmp(&a.started_at)
                .then_with(|| a.session_id.cmp(&b.session_id))
        });
        Ok(rows
            .into_iter()
            .skip(page.offset)
            .take(page.limit)
            .map(|s| SessionSummary {
                session_id: s.session_id,
                pseudonym: index.pseudonym(s.pseudonym),
                started_at: s.started_at,
                event_count: s.event_count,
            })
            .collect())
    }

    pub fn count_events(&self, filter: &AggregateFilter) -> u64 {
        let Ok(index) = self.activity_index(&filter.activity_id) else {
            return 0;
        };
        let index = index.read();
        if filter.pseudonym.is_none() && filter.exercise.is_none() && filter.time_range.is_none() {
            return match &filter.event_type {
                None => index.rows.len() as u64,
                Some(pattern) => index
                    .types
                    .names
                    .iter()
                    .zip(&index.type_counts)
                    .filter(|(t, _)| match_type(t, pattern))
                    .map(|(_, c)| *c)
                    .sum(),
            };
        }
        let Some(pred) = RowFilter::new(&index, filter) else {
            return 0;
        };
        index.rows.iter().filter(|r| pred.matches(r)).count() as u64
    }

    pub fn exercise_stats(&self, activity_id: &str) -> Result<ExerciseProgressMatrix, StoreError> {
        let index = self.activity_index(activity_id)?;
        let index = index.read();
        Ok(index
            .stats
            .iter()
            .map(|((p, e), stats)| ((index.pseudonym(*p), index.exercises.name(*e).to_owned()), *stats))
            .collect())
    }

    /// Non-empty buckets within `range`, ascending.
    pub fn timeline(
        &self,
        activity_id: &str,
        bucket: Bucket,
        range: TimeRange,
    ) -> Result<Vec<TimelineBucket>, StoreError> {
        let index = self.activity_index(activity_id)?;
        let index = index.read();
        let mut buckets: BTreeMap<Timestamp, (u64, HashSet<u32>)> = BTreeMap::new();
        for row in &index.rows {
            let ts = Timestamp::from_millis(row.server_ts).expect("stored timestamps are in range");
            if !range.contains(ts) {
                continue;
            }
            let entry = buckets.entry(bucket.start_of(ts)).or_default();
            entry.0 += 1;
            entry.1.insert(row.session);
        }
        Ok(buckets
            .into_iter()
            .map(|(bucket_start, (event_count, sessions))| TimelineBucket {
                bucket_start,
                event_count,
                session_count: sessions.len() as u64,
            })
            .collect())
    }

    /// Events whose type matches `pattern`, in arrival order.
    pub fn events_by_type(&self, activity_id: &str, pattern: &str, page: Page) -> Result<Vec<StoredEvent>, StoreError> {
        let refs: Vec<(SessionId, u64)> = {
            let index = self.activity_index(activity_id)?;
            let index = index.read();
            let matching = index.matching_types(pattern);
            index
                .rows
                .iter()
                .filter(|r| matching[r.event_type as usize])
                .skip(page.offset)
                .take(page.limit)
                .map(|r| (index.sessions[r.session as usize].session_id, r.seq))
                .collect()
        };
        refs.into_iter().map(|(sid, seq)| self.event(&sid, seq)).collect()
    }

    pub fn totals(&self, activity_id: &str) -> Result<ActivityTotals, StoreError> {
        let index = self.activity_index(activity_id)?;
        let index = index.read();
        let help_requests = index
            .types
            .get("helprequest")
            .map_or(0, |t| index.type_counts[t as usize]);
        Ok(ActivityTotals {
            users: index.users.len() as u64,
            sessions: index.sessions.len() as u64,
            events: index.rows.len() as u64,
            help_requests,
        })
    }

    /// Every session of the activity, opt-out included, in export order.
    fn all_sessions(&self, activity_id: &str) -> Vec<Arc<SessionSlot>> {
        let mut slots: Vec<Arc<SessionSlot>> = self
            .sessions
            .read()
            .values()
            .filter(|s| s.session.activity_id == activity_id)
            .cloned()
            .collect();
        slots.sort_by(|a, b| {
            a.session
                .started_at
                .cmp(&b.session.started_at)
                .then_with(|| a.session.session_id.cmp(&b.session.session_id))
        });
        slots
    }

    /// Inserts a complete session with its events in one durable write.
    fn insert_restored(&self, session: Session, events: Vec<StoredEvent>) -> Result<(), StoreError> {
        if self.sessions.read().contains_key(&session.session_id) {
            return Err(StoreError::DuplicateSession);
        }
        let mut locs = Vec::new();
        if let Some(journal) = &self.journal {
            let mut records = vec![Record::Session(session_record(&session))];
            records.extend(events.iter().map(|e| Record::Event(event_record(e))));
            locs = journal.lock().append(&records)?.split_off(1);
        }
        let slot_id = session.session_id;
        let opt_out = session.opt_out;
        let activity_id = session.activity_id.clone();
        self.apply_session(session)?;
        let slot = self.slot(&slot_id)?;
        {
            let mut log = slot.log.write();
            log.events = events.clone();
            log.frames = locs;
        }
        if !opt_out {
            let index = self.activity_index(&activity_id)?;
            let mut index = index.write();
            for e in &events {
                index.add_event(e);
            }
        }
        Ok(())
    }
}

struct RowFilter {
    pseudonym: Option<u32>,
    exercise: Option<u32>,
    types: Option<Vec<bool>>,
    range: Option<TimeRange>,
}

impl RowFilter {
    /// None when the filter names a pseudonym or exercise never seen.
    fn new(index: &ActivityIndex, filter: &AggregateFilter) -> Option<Self> {
        Some(RowFilter {
            pseudonym: match &filter.pseudonym {
                Some(p) => Some(index.pseudonyms.get(p.as_str())?),
                None => None,
            },
            exercise: match &filter.exercise {
                Some(e) => Some(index.exercises.get(e)?),
                None => None,
            },
            types: filter.event_type.as_deref().map(|p| index.matching_types(p)),
            range: filter.time_range,
        })
    }

    fn matches(&self, row: &EventRow) -> bool {
        self.pseudonym.is_none_or(|p| p == row.pseudonym)
            && self.exercise.is_none_or(|e| e == row.exercise)
            && self.types.as_ref().is_none_or(|t| t[row.event_type as usize])
            && self.range.is_none_or(|r| {
                r.contains(Timestamp::from_millis(row.server_ts).expect("stored timestamps are in range"))
            })
    }
}

fn session_record(session: &Session) -> SessionRecord {
    SessionRecord {
        id: session.session_id,
        token: session.token,
        activity: session.activity_id.clone(),
        pseudonym: session.pseudonym.clone(),
        started_at: session.started_at,
        opt_out: session.opt_out,
    }
}

fn event_record(event: &StoredEvent) -> EventRecord {
    EventRecord {
        sid: event.session_id,
        seq: event.seq,
        sts: event.server_timestamp,
        red: event.redactions.clone(),
        xml: codec::encode_string(&event.envelope),
    }
}
