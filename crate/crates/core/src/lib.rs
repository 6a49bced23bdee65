//! Core of the learnlog service: the semantic event model and its XML wire
//! form, signed pseudonymous launches, the event store with maintained
//! aggregates, help-request triggers, and the teacher-facing view models.

pub mod activity;
pub mod analytics;
pub mod auth;
pub mod codec;
pub mod ids;
pub mod loadgen;
pub mod model;
pub mod service;
pub mod store;
pub mod time;
pub mod trigger;

pub use activity::{ActivityConfig, ActivityRegistry};
pub use ids::{SessionId, SessionToken};
pub use model::{EventEnvelope, Field, FieldKind, FieldValue, StoredEvent};
pub use service::LogService;
pub use store::EventStore;
pub use time::Timestamp;
