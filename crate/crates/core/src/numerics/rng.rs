use std::f64::consts::TAU;

const PCG_MULT: u64 = 6_364_136_223_846_793_005;

/// PCG32 (XSH-RR, 64-bit state, 32-bit output) with Box–Muller normals.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    inc: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    /// Seeds the generator the same way the reference `pcg32_srandom_r` does.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Self { state: 0, inc: (stream << 1) | 1, spare_normal: None };
        rng.step();
        rng.state = rng.state.wrapping_add(seed);
        rng.step();
        rng
    }

    #[inline]
    fn step(&mut self) {
        self.state = self.state.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.step();
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        let a = (self.next_u32() >> 5) as u64;
        let b = (self.next_u32() >> 6) as u64;
        ((a << 26) | b) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw. Draws come in Box–Muller pairs; the second is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare_normal = Some(r * (TAU * u2).sin());
        r * (TAU * u2).cos()
    }

    /// Uniform integer in `0..n` without modulo bias.
    pub fn below(&mut self, n: u32) -> u32 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % n;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::RngCore;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42, 54);
        let mut b = Rng::new(42, 54);
        for _ in 0..1000 {
            assert_eq!(a.next_u32(), b.next_u32());
        }
        let mut c = Rng::new(42, 55);
        let mut a = Rng::new(42, 54);
        assert!((0..16).any(|_| a.next_u32() != c.next_u32()));
    }

    #[test]
    fn matches_reference_pcg32() {
        // the published pcg32-global demo: seed 42, stream 54
        let mut ours = Rng::new(42, 54);
        let expected = [0xa15c02b7u32, 0x7b47f409, 0xba1d3330, 0x83d2f293, 0xbfa4784b, 0xcbed606e];
        for e in expected {
            assert_eq!(ours.next_u32(), e);
        }
        for (seed, stream) in [(0u64, 0u64), (1, 2), (u64::MAX, 12345), (0xdead_beef, 7)] {
            let mut ours = Rng::new(seed, stream);
            let mut reference = rand_pcg::Pcg32::new(seed, stream);
            for _ in 0..1000 {
                assert_eq!(ours.next_u32(), reference.next_u32());
            }
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(2024, 1);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_range_and_below() {
        let mut rng = Rng::new(9, 9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(rng.below(7) < 7);
        }
    }
}
