//! FNV-1a hashing for parameter checksums, config fingerprints and seed
//! derivation. Hand-rolled so checksums stay stable across toolchain and
//! dependency upgrades.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

pub fn fnv1a64_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Deterministic sub-seed for an independent RNG stream. Streams are keyed
/// by a label (e.g. "minibatch") and an index (e.g. epoch) so that adding a
/// consumer never shifts the draws of existing ones.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut state = fnv1a64_extend(FNV_OFFSET, &base.to_le_bytes());
    state = fnv1a64_extend(state, label.as_bytes());
    fnv1a64_extend(state, &index.to_le_bytes())
}

/// Checksum over f64 slices, sensitive to order and bit patterns.
pub fn f64_slices_checksum<'a>(slices: impl Iterator<Item = &'a [f64]>) -> u64 {
    let mut state = FNV_OFFSET;
    for slice in slices {
        for v in slice {
            state = fnv1a64_extend(state, &v.to_bits().to_le_bytes());
        }
    }
    state
}
