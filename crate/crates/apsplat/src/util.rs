//! Small shared helpers: hashing and numeric comparisons.

/// FNV-1a 64-bit over raw bytes. Used for config and checkpoint spec hashes;
/// stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relative-error check used by the finite-difference oracles.
///
/// Passes when `|a - b| <= tol * max(|a|, |b|)` or both magnitudes sit below
/// `floor` (gradients that are numerically zero on both sides).
pub fn rel_close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        return true;
    }
    (a - b).abs() <= tol * scale
}

/// Largest relative error over paired slices, with the same floor rule.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let scale = x.abs().max(y.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((x - y).abs() / scale);
    }
    worst
}
