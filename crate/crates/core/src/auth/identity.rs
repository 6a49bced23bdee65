//! Bearer tokens standing in for an external identity provider.
//!
//! `v1.<base64url(principal)>.<expiry unix seconds>.<hex HMAC-SHA256>` where
//! the MAC covers `v1\n<principal>\n<expiry>` under a shared secret.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::time::Timestamp;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewerIdentity {
    pub principal: String,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("malformed identity token")]
    Malformed,
    #[error("identity token signature does not verify")]
    BadSignature,
    #[error("identity token has expired")]
    Expired,
}

#[derive(Clone)]
pub struct IdentityVerifier {
    secret: Vec<u8>,
}

impl std::fmt::Debug for IdentityVerifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityVerifier")
            .field("secret", &"[REDACTED]")
            .finish()
    }
}

impl IdentityVerifier {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        IdentityVerifier {
            secret: secret.as_ref().to_vec(),
        }
    }

    fn mac(&self, principal: &str, expiry: i64) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("HMAC accepts any key length");
        mac.update(format!("v1\n{principal}\n{expiry}").as_bytes());
        mac
    }

    pub fn issue(&self, principal: &str, expires_at: Timestamp) -> String {
        let expiry = expires_at.millis().div_euclid(1000);
        format!(
            "v1.{}.{}.{}",
            URL_SAFE_NO_PAD.encode(principal),
            expiry,
            hex::encode(self.mac(principal, expiry).finalize().into_bytes())
        )
    }

    pub fn verify(&self, token: &str, now: Timestamp) -> Result<ViewerIdentity, TokenError> {
        let mut parts = token.split('.');
        let (Some("v1"), Some(p), Some(e), Some(sig), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TokenError::Malformed);
        };
        let principal = URL_SAFE_NO_PAD
            .decode(p)
            .ok()
            .and_then(|b| String::from_utf8(b).ok())
            .ok_or(TokenError::Malformed)?;
        let expiry: i64 = e.parse().map_err(|_| TokenError::Malformed)?;
        let sig = hex::decode(sig).map_err(|_| TokenError::Malformed)?;
        self.mac(&principal, expiry)
            .verify_slice(&sig)
            .map_err(|_| TokenError::BadSignature)?;
        let expires_at = Timestamp::from_millis(expiry.saturating_mul(1000)).ok_or(TokenError::Malformed)?;
        if now >= expires_at {
            return Err(TokenError::Expired);
        }
        Ok(ViewerIdentity { principal, expires_at })
    }
}
