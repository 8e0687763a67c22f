use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SimError;

/// Names one deterministic random stream: `(seed, stream_id)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: String,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        RngStream {
            seed,
            stream_id: stream_id.into(),
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.stream_id.len() as u64).to_le_bytes());
        h.update(self.stream_id.as_bytes());
        h.finalize().into()
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }
}

/// Derive a child seed from a parent seed and a label (e.g. sweep cell coordinates).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"derive");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Registry of named streams under one run seed.
#[derive(Clone, Debug)]
pub struct RngRegistry {
    seed: u64,
    streams: BTreeMap<String, ChaCha8Rng>,
}

impl RngRegistry {
    pub fn new(seed: u64) -> Self {
        RngRegistry {
            seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, stream_id: &str) {
        if !self.streams.contains_key(stream_id) {
            let rng = RngStream::new(self.seed, stream_id).rng();
            self.streams.insert(stream_id.to_string(), rng);
        }
    }

    pub fn is_registered(&self, stream_id: &str) -> bool {
        self.streams.contains_key(stream_id)
    }

    /// Replace every stream with a fresh one under `seed`. Used when a what-if
    /// instance forks from a shared prefix into an independent cell.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        let names: Vec<String> = self.streams.keys().cloned().collect();
        for name in names {
            self.streams
                .insert(name.clone(), RngStream::new(seed, name).rng());
        }
    }

    pub fn next_u64(&mut self, stream_id: &str) -> Result<u64, SimError> {
        self.stream(stream_id).map(|r| r.next_u64())
    }

    pub fn stream(&mut self, stream_id: &str) -> Result<&mut ChaCha8Rng, SimError> {
        self.streams
            .get_mut(stream_id)
            .ok_or_else(|| SimError::UnknownStream(stream_id.to_string()))
    }
}
