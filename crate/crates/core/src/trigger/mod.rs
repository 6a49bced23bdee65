//! Per-activity triggers fired by stored events.
//!
//! Only `send_mail` exists: a help request is mailed to the tutor with a
//! deep link to the session prefix, then the learner's address is scrubbed
//! from the store. The scrub happens after the gateway acknowledges, or
//! after the retry budget is spent.

mod mail;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::Serialize;

pub use mail::{FileOutbox, GatewayError, MailAttachment, MailGateway, NotificationMessage, SmtpGateway, SmtpSettings};

use crate::activity::ActivityConfig;
use crate::codec::format_number;
use crate::ids::SessionId;
use crate::model::{match_type, FieldValue, StoredEvent, LEARNER_EMAIL_FIELD};
use crate::store::EventStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    SendMail,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerBinding {
    /// Position within the activity's binding list.
    pub id: usize,
    pub activity_id: String,
    pub event_type_pattern: String,
    pub kind: TriggerKind,
    /// For `send_mail`: optional `recipient`.
    pub params: Vec<(String, String)>,
}

impl TriggerBinding {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OutcomeStatus {
    Delivered,
    /// Retry budget exhausted; the message went to the dead-letter directory.
    Failed {
        error: String,
    },
    /// This (event, binding) pair already ran in this process.
    AlreadyExecuted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TriggerOutcome {
    pub binding_id: usize,
    pub kind: TriggerKind,
    pub attempts: u32,
    pub status: OutcomeStatus,
    /// Whether the learner's email address was removed from the store.
    pub scrubbed: bool,
}

/// Remembers which (event, binding) pairs have executed.
#[derive(Debug, Default)]
pub struct ExecutionLedger {
    done: Mutex<HashSet<(SessionId, u64, usize)>>,
}

impl ExecutionLedger {
    fn claim(&self, event: &StoredEvent, binding: &TriggerBinding) -> bool {
        self.done.lock().insert((event.session_id, event.seq, binding.id))
    }
}

/// Everything an action needs besides the event.
pub struct TriggerEnv {
    pub base_url: String,
    pub gateway: Arc<dyn MailGateway>,
    pub store: Arc<EventStore>,
    pub dead_letter: Option<FileOutbox>,
    pub retry_delay: Duration,
    pub ledger: ExecutionLedger,
}

impl TriggerEnv {
    pub fn new(base_url: impl Into<String>, gateway: Arc<dyn MailGateway>, store: Arc<EventStore>) -> Self {
        TriggerEnv {
            base_url: base_url.into(),
            gateway,
            store,
            dead_letter: None,
            retry_delay: Duration::from_secs(1),
            ledger: ExecutionLedger::default(),
        }
    }
}

pub fn matching<'a>(
    stored: &'a StoredEvent,
    bindings: &'a [TriggerBinding],
) -> impl Iterator<Item = &'a TriggerBinding> {
    bindings
        .iter()
        .filter(move |b| match_type(&stored.envelope.event_type, &b.event_type_pattern))
}

/// Runs every matching binding in binding order. Must only be called for
/// events that are already durably stored.
pub fn dispatch(
    stored: &StoredEvent,
    bindings: &[TriggerBinding],
    cfg: &ActivityConfig,
    env: &TriggerEnv,
) -> Vec<TriggerOutcome> {
    matching(stored, bindings)
        .map(|binding| {
            if !env.ledger.claim(stored, binding) {
                return TriggerOutcome {
                    binding_id: binding.id,
                    kind: binding.kind,
                    attempts: 0,
                    status: OutcomeStatus::AlreadyExecuted,
                    scrubbed: false,
                };
            }
            match binding.kind {
                TriggerKind::SendMail => send_mail_action(stored, binding, cfg, env),
            }
        })
        .collect()
}

pub fn deep_link(base_url: &str, activity_id: &str, session_id: &SessionId, seq: u64) -> String {
    format!(
        "{}/activities/{}/sessions/{}?until={}",
        base_url.trim_end_matches('/'),
        activity_id,
        session_id,
        seq
    )
}

pub fn compose_help_message(
    stored: &StoredEvent,
    binding: &TriggerBinding,
    cfg: &ActivityConfig,
    base_url: &str,
) -> NotificationMessage {
    let env = &stored.envelope;
    let to = binding
        .param("recipient")
        .or_else(|| cfg.first_teacher())
        .unwrap_or_default()
        .to_owned();
    let reply_to = env.str_field(LEARNER_EMAIL_FIELD).map(str::to_owned);
    let exercise = if env.exercise.is_empty() {
        "(none)"
    } else {
        env.exercise.as_str()
    };
    let link = deep_link(base_url, &cfg.activity_id, &stored.session_id, stored.seq);

    let mut body = String::new();
    let _ = writeln!(body, "A learner asked for help.\n");
    let _ = writeln!(body, "Activity: {} ({})", cfg.activity_id, cfg.course_label);
    let _ = writeln!(body, "Exercise: {exercise}");
    let _ = writeln!(body, "Asked at: {}\n", stored.server_timestamp);
    let _ = writeln!(
        body,
        "Question:\n{}\n",
        env.str_field("question_text").unwrap_or("(no question text)")
    );
    match &reply_to {
        Some(email) => {
            let _ = writeln!(body, "Learner email: {email}");
        }
        None => {
            let _ = writeln!(
                body,
                "Note: the learner gave no reply address; answer through the course instead."
            );
        }
    }
    let _ = writeln!(body, "\nSession up to this request:\n{link}");
    let extra: Vec<_> = env
        .fields
        .iter()
        .filter(|f| !matches!(f.name.as_str(), "question_text" | LEARNER_EMAIL_FIELD))
        .collect();
    if !extra.is_empty() {
        let _ = writeln!(body, "\nEvent data:");
        for f in extra {
            let shown = match &f.value {
                FieldValue::String(s) => s.clone(),
                FieldValue::Number(n) => format_number(*n),
                FieldValue::Date(t) => t.to_iso(),
                FieldValue::Blob(b) => format!("[{} bytes of {}]", b.data.len(), b.media_type),
                FieldValue::KvList(items) => format!("[{} entries]", items.len()),
            };
            let _ = writeln!(body, "  {}: {}", f.name, shown);
        }
    }

    let attachment = match env.field("snapshot") {
        Some(FieldValue::Blob(blob)) => Some(MailAttachment {
            filename: format!("snapshot-{}.{}", stored.seq, extension_for(&blob.media_type)),
            media_type: blob.media_type.clone(),
            data: blob.data.clone(),
        }),
        _ => None,
    };

    NotificationMessage {
        activity_id: cfg.activity_id.clone(),
        session_id: stored.session_id,
        seq: stored.seq,
        binding_id: binding.id,
        to,
        reply_to,
        subject: format!("[{}] Help request on exercise {exercise}", cfg.activity_id),
        body,
        attachment,
    }
}

fn extension_for(media_type: &str) -> &str {
    match media_type {
        "image/png" => "png",
        "image/jpeg" => "jpg",
        "image/svg+xml" => "svg",
        _ => "bin",
    }
}

/// Mails the help request (one retry), dead-letters on terminal failure, and
/// scrubs the learner's address either way.
pub fn send_mail_action(
    stored: &StoredEvent,
    binding: &TriggerBinding,
    cfg: &ActivityConfig,
    env: &TriggerEnv,
) -> TriggerOutcome {
    let message = compose_help_message(stored, binding, cfg, &env.base_url);
    let mut attempts = 0;
    let mut result = Err(GatewayError("not attempted".into()));
    while attempts < 2 {
        if attempts > 0 {
            std::thread::sleep(env.retry_delay);
        }
        attempts += 1;
        result = env.gateway.send(&message);
        if result.is_ok() {
            break;
        }
        tracing::warn!(
            activity = %cfg.activity_id,
            session = %stored.session_id,
            seq = stored.seq,
            attempt = attempts,
            error = %result.as_ref().unwrap_err(),
            "help request mail not accepted"
        );
    }
    let status = match result {
        Ok(()) => OutcomeStatus::Delivered,
        Err(e) => {
            if let Some(dead) = &env.dead_letter {
                if let Err(io) = dead.write(&message) {
                    tracing::error!(error = %io, "could not write dead letter");
                }
            }
            OutcomeStatus::Failed { error: e.0 }
        }
    };

    let mut scrubbed = false;
    if stored.envelope.field(LEARNER_EMAIL_FIELD).is_some() {
        match env.store.redact(&stored.session_id, stored.seq, &[LEARNER_EMAIL_FIELD]) {
            Ok(_) => scrubbed = true,
            Err(e) => tracing::error!(error = %e, seq = stored.seq, "failed to scrub learner email"),
        }
    }
    TriggerOutcome {
        binding_id: binding.id,
        kind: binding.kind,
        attempts,
        status,
        scrubbed,
    }
}

struct Job {
    stored: StoredEvent,
    cfg: Arc<ActivityConfig>,
}

#[derive(Default)]
struct Progress {
    pending: usize,
    outcomes: Vec<(SessionId, u64, TriggerOutcome)>,
}

/// Background worker pool executing triggers off the ingestion path.
pub struct Dispatcher {
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
    progress: Arc<(Mutex<Progress>, Condvar)>,
}

impl Dispatcher {
    pub fn start(env: TriggerEnv, workers: usize) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let env = Arc::new(env);
        let progress: Arc<(Mutex<Progress>, Condvar)> = Arc::default();
        let handles = (0..workers.max(1))
            .map(|i| {
                let rx = rx.clone();
                let env = env.clone();
                let progress = progress.clone();
                std::thread::Builder::new()
                    .name(format!("trigger-{i}"))
                    .spawn(move || loop {
                        let job = rx.lock().recv();
                        let Ok(job) = job else { break };
                        let outcomes = dispatch(&job.stored, &job.cfg.trigger_bindings, &job.cfg, &env);
                        let (lock, cvar) = &*progress;
                        let mut p = lock.lock();
                        p.outcomes
                            .extend(outcomes.into_iter().map(|o| (job.stored.session_id, job.stored.seq, o)));
                        p.pending -= 1;
                        cvar.notify_all();
                    })
                    .expect("spawn trigger worker")
            })
            .collect();
        Dispatcher {
            tx: Some(tx),
            workers: handles,
            progress,
        }
    }

    /// Queues the event if any binding matches. Never blocks on delivery.
    pub fn submit(&self, stored: StoredEvent, cfg: Arc<ActivityConfig>) -> bool {
        if matching(&stored, &cfg.trigger_bindings).next().is_none() {
            return false;
        }
        let Some(tx) = &self.tx else { return false };
        self.progress.0.lock().pending += 1;
        if tx.send(Job { stored, cfg }).is_err() {
            self.progress.0.lock().pending -= 1;
            return false;
        }
        true
    }

    /// Blocks until the queue drains or `timeout` passes; true if drained.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let (lock, cvar) = &*self.progress;
        let deadline = std::time::Instant::now() + timeout;
        let mut p = lock.lock();
        while p.pending > 0 {
            if cvar.wait_until(&mut p, deadline).timed_out() {
                return p.pending == 0;
            }
        }
        true
    }

    pub fn pending(&self) -> usize {
        self.progress.0.lock().pending
    }

    /// Outcomes recorded so far, as (session, seq, outcome).
    pub fn outcomes(&self) -> Vec<(SessionId, u64, TriggerOutcome)> {
        self.progress.0.lock().outcomes.clone()
    }

    /// Stops accepting work and waits for queued jobs to finish.
    pub fn shutdown(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}
