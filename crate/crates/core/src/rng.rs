//! PCG32 (XSH-RR 64/32) and SplitMix64 seed mixing.
//!
//! Every random decision in the crate draws from [`Pcg32`] so that a
//! given seed reproduces the same run on any platform.

const MULTIPLIER: u64 = 6364136223846793005;

/// Stream used when callers only supply a seed.
pub const DEFAULT_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

impl Pcg32 {
    /// Seeds exactly like the reference `pcg32_srandom_r(initstate, initseq)`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(seed, DEFAULT_STREAM)
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(MULTIPLIER).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// Uniform in `[0, 1)` with 32 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        f64::from(self.next_u32()) / 4_294_967_296.0
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `[0, bound)` by rejection sampling.
    pub fn next_below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "next_below(0)");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    pub fn below_usize(&mut self, bound: usize) -> usize {
        let b = u32::try_from(bound).expect("bound fits in u32");
        self.next_below(b) as usize
    }

    /// Fisher-Yates shuffle, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `pool`, in draw order.
    pub fn sample<T: Clone>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        assert!(k <= pool.len());
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        // partial Fisher-Yates from the front
        for i in 0..k {
            let j = i + self.below_usize(pool.len() - i);
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| pool[i].clone()).collect()
    }

    /// Independent generator for a sub-task, derived from this one.
    pub fn fork(&mut self) -> Pcg32 {
        let seed = (u64::from(self.next_u32()) << 32) | u64::from(self.next_u32());
        Pcg32::seeded(splitmix64(seed))
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generator for item `index` of a seeded family (episodes, images).
pub fn indexed(base_seed: u64, index: u64) -> Pcg32 {
    Pcg32::seeded(splitmix64(base_seed ^ index))
}
