//! Energy-based constraint networks over frozen-encoder embedding
//! sequences: a scalar coherence energy with a per-position decomposition,
//! trained from contrastive corruption pairs.

pub mod analysis;
pub mod cache;
pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod corruption;
pub mod error;
pub mod eval;
pub mod kv;
pub mod network;
pub mod sequence;
pub mod testbed;
pub mod trainer;

pub use config::NetworkConfig;
pub use corruption::{ContrastivePair, CorruptionKind, CorruptionSpec};
pub use error::{Category, Error, Result};
pub use kv::KvMap;
pub use network::{aggregate_energy, ConstraintNetwork, EnergyReport, Inference};
pub use sequence::{EmbeddingSequence, Label};
pub use testbed::TestbedConfig;
pub use trainer::{DataSources, TrainConfig, TrainLog};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_update(FNV_OFFSET, bytes)
}

/// Continues an FNV-1a digest from `state`.
pub fn fnv1a64_update(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

pub const FNV1A64_INIT: u64 = FNV_OFFSET;

#[cfg(test)]
mod tests {
    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(super::fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(super::fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(super::fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
