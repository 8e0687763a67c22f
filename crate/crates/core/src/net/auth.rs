use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::ComponentId;

/// 128-bit keyed tag binding a sender to a body.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuthTag(pub [u8; 16]);

impl fmt::Debug for AuthTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AuthTag({})", hex::encode(self.0))
    }
}

/// Per-component secret keys derived from the run's key seed.
///
/// This is a simulation of unforgeable signatures: a component can only tag
/// bodies with its own key, and verification recomputes the tag with the
/// claimed sender's key.
#[derive(Clone, Debug)]
pub struct Keyring {
    seed: u64,
}

impl Keyring {
    pub fn new(seed: u64) -> Self {
        Keyring { seed }
    }

    fn key(&self, who: ComponentId) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"byztwin-key");
        h.update(self.seed.to_le_bytes());
        h.update(who.to_string().as_bytes());
        h.finalize().into()
    }

    pub fn sign(&self, who: ComponentId, body: &[u8]) -> AuthTag {
        let mut h = Sha256::new();
        h.update(self.key(who));
        h.update((body.len() as u64).to_le_bytes());
        h.update(body);
        let out = h.finalize();
        let mut tag = [0u8; 16];
        tag.copy_from_slice(&out[..16]);
        AuthTag(tag)
    }

    pub fn verify(&self, who: ComponentId, body: &[u8], tag: &AuthTag) -> bool {
        self.sign(who, body) == *tag
    }
}
