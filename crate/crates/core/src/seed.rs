//! Seed derivation.
//!
//! Every stage draws from its own ChaCha stream keyed by
//! `SHA-256(top_seed_le || stage_name)`, so a stage run in isolation with the
//! top-level seed sees exactly the stream it sees inside the full pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const STAGE_KSHOT: &str = "kshot";
pub const STAGE_SPLIT: &str = "split";
pub const STAGE_VAL: &str = "val";
pub const STAGE_GMM: &str = "fit-gmm";
pub const STAGE_SVGD: &str = "svgd";
pub const STAGE_PROMPTS: &str = "synth-prompts";
pub const STAGE_TRAIN: &str = "train";

pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    rng_from_seed(derive_seed(seed, stage))
}
