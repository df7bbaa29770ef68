//! Deterministic inputs shared by the benchmarks.

/// `n` values in [-1, 1) from a fixed linear congruential sequence.
pub fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn bounded_and_repeatable() {
        let a = super::pseudo_random(1000, 3);
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        assert_eq!(a, super::pseudo_random(1000, 3));
    }
}
