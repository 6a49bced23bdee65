use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

const MODULUS: u64 = 1_000_000_000_000;

/// A 12-digit decimal stand-in for a learner, stable per (activity salt, user).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pseudonym(String);

impl Pseudonym {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(s: &str) -> Option<Self> {
        (s.len() == 12 && s.bytes().all(|b| b.is_ascii_digit())).then(|| Pseudonym(s.to_owned()))
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Pseudonym {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Pseudonym::parse(&s).ok_or_else(|| format!("invalid pseudonym {s:?}"))
    }
}

impl From<Pseudonym> for String {
    fn from(p: Pseudonym) -> Self {
        p.0
    }
}

/// First 40 bits of HMAC-SHA256(salt, user_ref), big-endian, modulo 10^12,
/// zero-padded to 12 digits.
pub fn derive_pseudonym(user_ref: &str, salt: &[u8]) -> Pseudonym {
    let mut mac = HmacSha256::new_from_slice(salt).expect("HMAC accepts any key length");
    mac.update(user_ref.as_bytes());
    let digest = mac.finalize().into_bytes();
    let mut head = [0u8; 8];
    head[3..].copy_from_slice(&digest[..5]);
    let value = u64::from_be_bytes(head) % MODULUS;
    Pseudonym(format!("{value:012}"))
}
