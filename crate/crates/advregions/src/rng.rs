//! Seeded random number generation.
//!
//! Everything random in this crate (weight init, data shuffling, attack
//! restarts, rectangle sampling) flows through [`SplitMix64`], the 64-bit
//! counter-based generator from Steele et al.'s SplittableRandom. The output
//! at step `n` is `mix(seed + n * GAMMA)`, so a seed fully determines the
//! stream and the stream is reproducible from any implementation of the same
//! two constants and mixing function.

/// Weyl-sequence increment (odd, from the SplittableRandom paper).
const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 stream. `next_u64` advances the counter by `GAMMA` and applies
/// the murmur-style finalizer.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    /// Cached second normal variate from Box-Muller.
    spare_normal: Option<f64>,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Derive an independent stream from a base seed and a tag path.
    ///
    /// Used to hand each model / attack trial / sampler its own stream from
    /// one experiment seed: the tags are absorbed one mixing step at a time,
    /// so distinct paths yield unrelated streams.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut state = mix(seed ^ GAMMA);
        for &t in tags {
            state = mix(state.wrapping_add(GAMMA).wrapping_add(t));
        }
        Self::new(state)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    /// always tiny relative to 2^64 so the bias is far below f32 noise.
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] to keep ln finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = SplitMix64::derive(7, &[0]);
        let mut b = SplitMix64::derive(7, &[1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..1000 {
            let x = rng.uniform(0.25, 0.75);
            assert!((0.25..0.75).contains(&x));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = SplitMix64::new(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
