//! Provenance block embedded in every emitted artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    pub fn new<C: Serialize>(seed: u64, config: &C) -> Self {
        Self {
            seed,
            config_hash: config_hash(config),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// `key=value` form used in CSV preambles.
    pub fn preamble(&self) -> String {
        format!(
            "seed={} config_hash={} version={}",
            self.seed, self.config_hash, self.version
        )
    }
}

/// First 16 hex digits of the SHA-256 of the config's JSON encoding.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes to JSON");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&(1, "full"));
        assert_eq!(a, config_hash(&(1, "full")));
        assert_ne!(a, config_hash(&(2, "full")));
        assert_eq!(a.len(), 16);
    }
}
