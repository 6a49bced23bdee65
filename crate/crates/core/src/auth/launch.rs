//! Signed session launch from the LMS.
//!
//! The LMS signs a newline-joined canonical string with the activity's
//! application key; see `docs/launch-protocol.md` for the byte layout.

use std::collections::HashMap;

use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::RngCore;
use serde::Serialize;
use sha2::Sha256;

use super::pseudonym::{derive_pseudonym, Pseudonym};
use crate::activity::ActivityConfig;
use crate::ids::{SessionId, SessionToken};
use crate::time::Timestamp;

type HmacSha256 = Hmac<Sha256>;

/// Accepted clock skew between LMS and service, and nonce retention.
pub const LAUNCH_WINDOW_MILLIS: u64 = 300_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchRequest {
    pub activity_id: String,
    pub user_ref: String,
    pub issued_at: Timestamp,
    pub nonce: String,
    pub origin: String,
    pub opt_out: bool,
    /// Lowercase hex HMAC-SHA256 over [`LaunchRequest::canonical_string`].
    pub signature: String,
}

impl LaunchRequest {
    pub fn canonical_string(&self) -> String {
        format!(
            "{}\n{}\n{}\n{}\n{}\n{}",
            self.activity_id,
            self.user_ref,
            self.issued_at.to_iso(),
            self.nonce,
            self.origin,
            if self.opt_out { "true" } else { "false" }
        )
    }

    fn mac(&self, key: &[u8]) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
        mac.update(self.canonical_string().as_bytes());
        mac
    }

    /// LMS side: fills in `signature` for the current field values.
    pub fn sign(&mut self, application_key: &[u8]) {
        self.signature = hex::encode(self.mac(application_key).finalize().into_bytes());
    }

    fn signature_matches(&self, application_key: &[u8]) -> bool {
        let Ok(sig) = hex::decode(&self.signature) else {
            return false;
        };
        self.mac(application_key).verify_slice(&sig).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LaunchError {
    #[error("launch signature does not verify")]
    BadSignature,
    #[error("launch timestamp is outside the accepted window")]
    StaleTimestamp,
    #[error("launch nonce was already used")]
    ReplayedNonce,
    #[error("launch origin is not whitelisted")]
    OriginNotWhitelisted,
    #[error("unknown activity")]
    UnknownActivity,
}

impl LaunchError {
    pub fn code(&self) -> &'static str {
        match self {
            LaunchError::BadSignature => "bad_signature",
            LaunchError::StaleTimestamp => "stale_timestamp",
            LaunchError::ReplayedNonce => "replayed_nonce",
            LaunchError::OriginNotWhitelisted => "origin_not_whitelisted",
            LaunchError::UnknownActivity => "unknown_activity",
        }
    }
}

/// Nonces seen per activity, kept until their launch can no longer be fresh.
#[derive(Debug, Default)]
pub struct NonceCache {
    inner: Mutex<NonceTable>,
}

#[derive(Debug, Default)]
struct NonceTable {
    expiry: HashMap<(String, String), Timestamp>,
    prune_at: usize,
}

impl NonceCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the nonce and returns true if it was not live already.
    pub fn check_and_insert(&self, activity_id: &str, nonce: &str, expires_at: Timestamp, now: Timestamp) -> bool {
        let mut table = self.inner.lock();
        if table.expiry.len() >= table.prune_at {
            table.expiry.retain(|_, exp| *exp >= now);
            table.prune_at = (table.expiry.len() * 2).max(1024);
        }
        let key = (activity_id.to_owned(), nonce.to_owned());
        match table.expiry.get(&key) {
            Some(exp) if *exp >= now => false,
            _ => {
                table.expiry.insert(key, expires_at);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expiry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A launch that passed every check. `user_ref` has already been reduced to
/// the pseudonym and is not retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedLaunch {
    activity_id: String,
    pseudonym: Pseudonym,
    opt_out: bool,
}

impl VerifiedLaunch {
    pub fn activity_id(&self) -> &str {
        &self.activity_id
    }

    pub fn pseudonym(&self) -> &Pseudonym {
        &self.pseudonym
    }

    pub fn opt_out(&self) -> bool {
        self.opt_out
    }
}

pub fn verify_launch(
    req: &LaunchRequest,
    cfg: &ActivityConfig,
    now: Timestamp,
    nonce_cache: &NonceCache,
) -> Result<VerifiedLaunch, LaunchError> {
    if req.activity_id != cfg.activity_id {
        return Err(LaunchError::UnknownActivity);
    }
    if !req.signature_matches(&cfg.application_key) {
        return Err(LaunchError::BadSignature);
    }
    if now.abs_diff_millis(req.issued_at) > LAUNCH_WINDOW_MILLIS {
        return Err(LaunchError::StaleTimestamp);
    }
    if !cfg.origin_allowed(&req.origin) {
        return Err(LaunchError::OriginNotWhitelisted);
    }
    let expires_at = req.issued_at.saturating_add_millis(LAUNCH_WINDOW_MILLIS as i64);
    if !nonce_cache.check_and_insert(&req.activity_id, &req.nonce, expires_at, now) {
        return Err(LaunchError::ReplayedNonce);
    }
    Ok(VerifiedLaunch {
        activity_id: req.activity_id.clone(),
        pseudonym: derive_pseudonym(&req.user_ref, &cfg.pseudonym_salt),
        opt_out: req.opt_out,
    })
}

/// One launch of a tool by one learner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub session_id: SessionId,
    #[serde(skip)]
    pub token: SessionToken,
    pub activity_id: String,
    pub pseudonym: Pseudonym,
    pub started_at: Timestamp,
    pub opt_out: bool,
}

/// Assigns fresh random identifiers. Persisting the session is the store's job.
pub fn create_session(v: VerifiedLaunch, now: Timestamp, rng: &mut impl RngCore) -> Session {
    Session {
        session_id: SessionId::random(rng),
        token: SessionToken::random(rng),
        activity_id: v.activity_id,
        pseudonym: v.pseudonym,
        started_at: now,
        opt_out: v.opt_out,
    }
}
