//! Order-independent seed derivation.
//!
//! Every random draw is keyed by (global seed, doc_id, mask index) so scores do
//! not depend on scoring order or thread count.

use sha2::{Digest, Sha256};

/// Stable 64-bit seed for one (document, mask) pair.
pub fn document_seed(global_seed: u64, doc_id: &str, mask_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"gradnormir/doc");
    h.update(global_seed.to_le_bytes());
    h.update((doc_id.len() as u64).to_le_bytes());
    h.update(doc_id.as_bytes());
    h.update(mask_index.to_le_bytes());
    first_u64(&h.finalize())
}

/// Seed for the `attempt`-th resample after a degenerate perturbation.
pub fn resample_seed(seed: u64, attempt: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"gradnormir/resample");
    h.update(seed.to_le_bytes());
    h.update(attempt.to_le_bytes());
    first_u64(&h.finalize())
}

/// Seed for choosing which documents of a corpus get scored.
pub fn subsample_seed(global_seed: u64, corpus_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"gradnormir/subsample");
    h.update(global_seed.to_le_bytes());
    h.update(corpus_id.as_bytes());
    first_u64(&h.finalize())
}

fn first_u64(bytes: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&bytes[..8]);
    u64::from_le_bytes(b)
}
