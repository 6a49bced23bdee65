//! The ingestion and launch path shared by the HTTP server, the load
//! generator and the tests.

use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::OsRng;
use rand::RngCore;

use crate::activity::{ActivityConfig, ActivityRegistry};
use crate::analytics::RendererRegistry;
use crate::auth::{create_session, verify_launch, LaunchError, LaunchRequest, NonceCache, Session};
use crate::codec::{self, DecodeError};
use crate::ids::SessionId;
use crate::model::{builtin_schemas, validate, EventEnvelope, EventKindSchema, Limits, ValidationError};
use crate::store::{AppendOutcome, EventStore, StoreError};
use crate::time::Timestamp;
use crate::trigger::Dispatcher;

#[derive(Debug, thiserror::Error)]
pub enum LaunchFailure {
    #[error(transparent)]
    Rejected(#[from] LaunchError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("unknown session")]
    UnknownSession,
    #[error("event body exceeds {limit} bytes")]
    BodyTooLarge { limit: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error(transparent)]
    Store(StoreError),
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::UnknownSession => "unknown_session",
            IngestError::BodyTooLarge { .. } => "oversize",
            IngestError::Decode(e) => e.code(),
            IngestError::Invalid(e) => e.code(),
            IngestError::Store(_) => "storage",
        }
    }
}

impl From<StoreError> for IngestError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSession => IngestError::UnknownSession,
            other => IngestError::Store(other),
        }
    }
}

pub struct LogService {
    activities: ActivityRegistry,
    store: Arc<EventStore>,
    nonces: NonceCache,
    rng: Mutex<Box<dyn RngCore + Send>>,
    schemas: Vec<EventKindSchema>,
    limits: Limits,
    renderers: RendererRegistry,
    dispatcher: Option<Dispatcher>,
}

impl LogService {
    pub fn new(activities: ActivityRegistry, store: Arc<EventStore>) -> Self {
        for cfg in activities.iter() {
            store.register_activity(&cfg.activity_id);
        }
        LogService {
            activities,
            store,
            nonces: NonceCache::new(),
            rng: Mutex::new(Box::new(OsRng)),
            schemas: builtin_schemas(),
            limits: Limits::default(),
            renderers: RendererRegistry::builtin(),
            dispatcher: None,
        }
    }

    /// Replaces the identifier source, e.g. with a seeded generator.
    pub fn with_rng(mut self, rng: impl RngCore + Send + 'static) -> Self {
        self.rng = Mutex::new(Box::new(rng));
        self
    }

    pub fn with_limits(mut self, limits: Limits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_dispatcher(mut self, dispatcher: Dispatcher) -> Self {
        self.dispatcher = Some(dispatcher);
        self
    }

    pub fn activities(&self) -> &ActivityRegistry {
        &self.activities
    }

    pub fn activity(&self, activity_id: &str) -> Option<&Arc<ActivityConfig>> {
        self.activities.get(activity_id)
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn limits(&self) -> &Limits {
        &self.limits
    }

    pub fn renderers(&self) -> &RendererRegistry {
        &self.renderers
    }

    pub fn dispatcher(&self) -> Option<&Dispatcher> {
        self.dispatcher.as_ref()
    }

    pub fn launch(&self, req: &LaunchRequest, now: Timestamp) -> Result<Session, LaunchFailure> {
        let cfg = self
            .activities
            .get(&req.activity_id)
            .ok_or(LaunchError::UnknownActivity)?;
        let verified = verify_launch(req, cfg, now, &self.nonces)?;
        let session = create_session(verified, now, &mut *self.rng.lock());
        self.store.insert_session(session.clone())?;
        Ok(session)
    }

    /// Decodes, validates, stores and hands the event to the trigger engine.
    pub fn ingest(&self, session_id: &SessionId, body: &[u8], now: Timestamp) -> Result<AppendOutcome, IngestError> {
        if body.len() > self.limits.max_event_bytes {
            return Err(IngestError::BodyTooLarge {
                limit: self.limits.max_event_bytes,
            });
        }
        if self.store.session(session_id).is_none() {
            return Err(IngestError::UnknownSession);
        }
        let envelope = codec::decode(body)?;
        self.ingest_envelope(session_id, envelope, now)
    }

    pub fn ingest_envelope(
        &self,
        session_id: &SessionId,
        envelope: EventEnvelope,
        now: Timestamp,
    ) -> Result<AppendOutcome, IngestError> {
        let session = self.store.session(session_id).ok_or(IngestError::UnknownSession)?;
        if session.opt_out {
            return Ok(AppendOutcome::Discarded);
        }
        let event = validate(envelope, &self.schemas, &self.limits)?;
        let outcome = self.store.append(session_id, event, now)?;
        if let (AppendOutcome::Stored(stored), Some(dispatcher)) = (&outcome, &self.dispatcher) {
            if let Some(cfg) = self.activities.get(&session.activity_id) {
                dispatcher.submit(stored.clone(), cfg.clone());
            }
        }
        Ok(outcome)
    }
}
