//! Counter-based splittable PRNG.
//!
//! Every random draw is a pure function of (seed, stream, counter), so noise
//! instances are reproducible across teacher and student runs and across
//! platforms. The mixer is the 64-bit SplitMix64 finalizer.

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
    /// Cached second output of the Box-Muller pair.
    spare: Option<f32>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, stream: 0, counter: 0, spare: None }
    }

    /// Derive an independent stream; draws never overlap with the parent's.
    pub fn split(&self, stream: u64) -> Self {
        Rng {
            seed: splitmix64(self.seed ^ splitmix64(self.stream)),
            stream,
            counter: 0,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_mul(0xA076_1D64_78BD_642F)) ^ self.counter);
        self.counter = self.counter.wrapping_add(1);
        splitmix64(x)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        // 24 high bits give an exactly representable f32 in [0,1).
        ((self.next_u64() >> 40) as f32) * (1.0 / 16_777_216.0)
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        // Reject u1 == 0 so ln stays finite.
        let mut u1 = self.uniform();
        while u1 <= f32::EPSILON {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f32::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let root = Rng::new(7);
        let mut s1 = root.split(1);
        let mut s2 = root.split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = Rng::new(3);
        let xs = rng.normal_vec(20_000);
        let mean: f64 = xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64;
        let var: f64 =
            xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
