//! Export/import stream: a session manifest followed by canonical wire
//! documents. Layout is pinned in `docs/export-format.md`.

use std::io::{Read, Write};
use std::str::FromStr;

use super::{EventStore, StoreError};
use crate::auth::{Pseudonym, Session};
use crate::codec;
use crate::ids::{SessionId, SessionToken};
use crate::model::StoredEvent;
use crate::time::Timestamp;

const MAGIC: &str = "learnlog-export 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportSummary {
    pub sessions: u64,
    pub events: u64,
}

impl EventStore {
    /// Writes every session (opt-out included) and event of one activity.
    /// Output is deterministic for equal store contents.
    pub fn export_all(&self, activity_id: &str, out: &mut impl Write) -> Result<ImportSummary, StoreError> {
        self.activity_index(activity_id)?;
        let slots = self.all_sessions(activity_id);
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "activity {activity_id}")?;
        let mut logs = Vec::with_capacity(slots.len());
        for slot in &slots {
            let events = slot.log.read().events.clone();
            let s = &slot.session;
            writeln!(
                out,
                "session {} {} {} {} {} {}",
                s.session_id,
                s.token,
                s.pseudonym,
                s.started_at,
                u8::from(s.opt_out),
                events.len()
            )?;
            logs.push(events);
        }
        let mut total = 0u64;
        for events in &logs {
            for e in events {
                let xml = codec::encode(&e.envelope);
                let red = serde_json::to_string(&e.redactions).expect("strings serialize");
                writeln!(
                    out,
                    "event {} {} {} {} {}",
                    e.session_id,
                    e.seq,
                    e.server_timestamp,
                    xml.len(),
                    red
                )?;
                out.write_all(&xml)?;
                out.write_all(b"\n")?;
                total += 1;
            }
        }
        writeln!(out, "end {} {}", slots.len(), total)?;
        out.flush()?;
        Ok(ImportSummary {
            sessions: slots.len() as u64,
            events: total,
        })
    }

    /// Restores an exported activity into this store. Nothing is written
    /// unless the whole stream parses.
    pub fn import(&self, input: &mut impl Read) -> Result<ImportSummary, StoreError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let parsed = parse(&bytes)?;
        {
            let sessions = self.sessions.read();
            if parsed.iter().any(|(s, _)| sessions.contains_key(&s.session_id)) {
                return Err(StoreError::DuplicateSession);
            }
        }
        let mut summary = ImportSummary { sessions: 0, events: 0 };
        for (session, events) in parsed {
            summary.sessions += 1;
            summary.events += events.len() as u64;
            self.insert_restored(session, events)?;
        }
        Ok(summary)
    }

    /// Builds a fresh in-memory store from an export stream.
    pub fn import_new(input: &mut impl Read) -> Result<EventStore, StoreError> {
        let store = EventStore::in_memory();
        store.import(input)?;
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, message: impl Into<String>) -> StoreError {
        StoreError::CorruptStream {
            position: at as u64,
            message: message.into(),
        }
    }

    fn line(&mut self) -> Result<(usize, &'a str), StoreError> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| self.err(start, "unexpected end of stream"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| self.err(start, "line is not UTF-8"))?;
        self.pos = start + nl + 1;
        Ok((start, line))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let start = self.pos;
        let chunk = self
            .bytes
            .get(start..start + n)
            .ok_or_else(|| self.err(start, "unexpected end of stream"))?;
        self.pos += n;
        if self.bytes.get(self.pos) != Some(&b'\n') {
            return Err(self.err(self.pos, "document not followed by newline"));
        }
        self.pos += 1;
        Ok(chunk)
    }
}

fn field<T: FromStr>(
    parts: &mut std::str::SplitN<'_, char>,
    cur: &Cursor<'_>,
    at: usize,
    what: &str,
) -> Result<T, StoreError> {
    parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| cur.err(at, format!("bad or missing {what}")))
}

fn parse(bytes: &[u8]) -> Result<Vec<(Session, Vec<StoredEvent>)>, StoreError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (at, magic) = cur.line()?;
    if magic != MAGIC {
        return Err(cur.err(at, "not a learnlog export stream"));
    }
    let (at, activity) = cur.line()?;
    let activity_id = activity
        .strip_prefix("activity ")
        .filter(|a| !a.is_empty())
        .ok_or_else(|| cur.err(at, "expected activity line"))?
        .to_owned();

    let mut sessions: Vec<(Session, Vec<StoredEvent>, u64)> = Vec::new();
    let mut position: std::collections::HashMap<SessionId, usize> = Default::default();
    let (mut at, mut line) = cur.line()?;
    while let Some(rest) = line.strip_prefix("session ") {
        let mut parts = rest.splitn(6, ' ');
        let session_id: SessionId = field(&mut parts, &cur, at, "session id")?;
        let token: SessionToken = field(&mut parts, &cur, at, "session token")?;
        let pseudonym = parts
            .next()
            .and_then(Pseudonym::parse)
            .ok_or_else(|| cur.err(at, "bad pseudonym"))?;
        let started_at = parts
            .next()
            .and_then(Timestamp::parse_iso)
            .ok_or_else(|| cur.err(at, "bad start time"))?;
        let opt_out = match parts.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(cur.err(at, "bad opt-out flag")),
        };
        let count: u64 = field(&mut parts, &cur, at, "event count")?;
        if position.insert(session_id, sessions.len()).is_some() {
            return Err(cur.err(at, "session listed twice"));
        }
        sessions.push((
            Session {
                session_id,
                token,
                activity_id: activity_id.clone(),
                pseudonym,
                started_at,
                opt_out,
            },
            Vec::new(),
            count,
        ));
        (at, line) = cur.line()?;
    }

    let mut total = 0u64;
    while let Some(rest) = line.strip_prefix("event ") {
        let mut parts = rest.splitn(5, ' ');
        let sid: SessionId = field(&mut parts, &cur, at, "session id")?;
        let seq: u64 = field(&mut parts, &cur, at, "sequence number")?;
        let server_timestamp = parts
            .next()
            .and_then(Timestamp::parse_iso)
            .ok_or_else(|| cur.err(at, "bad server timestamp"))?;
        let len: usize = field(&mut parts, &cur, at, "document length")?;
        let redactions: Vec<String> = parts
            .next()
            .and_then(|r| serde_json::from_str(r).ok())
            .ok_or_else(|| cur.err(at, "bad redaction list"))?;
        let &idx = position
            .get(&sid)
            .ok_or_else(|| cur.err(at, "event for a session missing from the manifest"))?;
        let entry = &mut sessions[idx];
        if seq != entry.1.len() as u64 + 1 {
            return Err(cur.err(at, format!("sequence gap in session {sid}")));
        }
        let doc_at = cur.pos;
        let xml = cur.take(len)?;
        let envelope = codec::decode(xml).map_err(|e| cur.err(doc_at, e.to_string()))?;
        entry.1.push(StoredEvent {
            envelope,
            session_id: sid,
            seq,
            server_timestamp,
            redactions,
        });
        total += 1;
        (at, line) = cur.line()?;
    }

    let end = line
        .strip_prefix("end ")
        .ok_or_else(|| cur.err(at, "expected event or end line"))?;
    let mut parts = end.splitn(2, ' ');
    let n_sessions: u64 = field(&mut parts, &cur, at, "session total")?;
    let n_events: u64 = field(&mut parts, &cur, at, "event total")?;
    if n_sessions != sessions.len() as u64 || n_events != total {
        return Err(cur.err(at, "totals do not match stream contents"));
    }
    if let Some((s, _, _)) = sessions.iter().find(|(_, events, count)| events.len() as u64 != *count) {
        return Err(cur.err(at, format!("session {} is missing events", s.session_id)));
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(cur.pos, "trailing data after end line"));
    }
    Ok(sessions.into_iter().map(|(s, e, _)| (s, e)).collect())
}
