//! Launch protocol, pseudonyms, viewer identity and per-activity roles.

mod identity;
mod launch;
mod pseudonym;

pub use identity::{IdentityVerifier, TokenError, ViewerIdentity};
pub use launch::{
    create_session, verify_launch, LaunchError, LaunchRequest, NonceCache, Session, VerifiedLaunch,
    LAUNCH_WINDOW_MILLIS,
};
pub use pseudonym::{derive_pseudonym, Pseudonym};

use serde::Serialize;
use subtle::ConstantTimeEq;

use crate::activity::ActivityConfig;
use crate::ids::SessionToken;

/// Who is asking to read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Viewer {
    Identity(ViewerIdentity),
    Session(SessionToken),
}

/// What is being read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceRef<'a> {
    /// Activity-wide views: dashboard, user and session lists, summaries.
    Activity { activity_id: &'a str },
    /// One session, identified by its owner's token.
    Session {
        activity_id: &'a str,
        owner: &'a SessionToken,
    },
}

impl ResourceRef<'_> {
    pub fn activity_id(&self) -> &str {
        match self {
            ResourceRef::Activity { activity_id } | ResourceRef::Session { activity_id, .. } => activity_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    LearnerSelf,
    Denied,
}

pub fn authorize(viewer: &Viewer, cfg: &ActivityConfig, resource: &ResourceRef<'_>) -> Role {
    if resource.activity_id() != cfg.activity_id {
        return Role::Denied;
    }
    match (viewer, resource) {
        (Viewer::Identity(id), _) if cfg.is_teacher(&id.principal) => Role::Teacher,
        (Viewer::Session(token), ResourceRef::Session { owner, .. })
            if bool::from(token.as_bytes().ct_eq(owner.as_bytes())) =>
        {
            Role::LearnerSelf
        }
        _ => Role::Denied,
    }
}
