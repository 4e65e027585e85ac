//! Global deterministic-mode switch.
//!
//! Deterministic mode pins the tensor kernels to a single worker thread so
//! that reductions always run in the same order. Seeds are always explicit in
//! this crate, so the switch only needs to control kernel scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Enable or disable deterministic mode for the whole process.
///
/// Must be called before the first tensor operation for the thread-count pin
/// to take effect on every kernel.
pub fn set_deterministic(enabled: bool) {
    DETERMINISTIC.store(enabled, Ordering::SeqCst);
    if enabled {
        // candle reads this on every parallel kernel launch
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Derive an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the base through splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(base ^ h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
