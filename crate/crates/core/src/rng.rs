//! Deterministic pseudo-random number generation.
//!
//! Every random draw in this crate flows from a single `u64` seed through
//! the generators below, so runs are reproducible bit-for-bit and the
//! algorithms are simple enough to reimplement in any language when
//! cross-checking golden logs.
//!
//! Generator definitions:
//!
//! * `splitmix64` — state advances by `0x9E3779B97F4A7C15`; the output is
//!   the new state mixed by `xor-shift-multiply` twice
//!   (`0xBF58476D1CE4E5B9`, `0x94D049BB133111EB`) and a final `>> 31` xor.
//!   Used for seeding and for deriving independent subsystem streams.
//! * `xoshiro256++` — 256-bit state seeded from four consecutive
//!   splitmix64 outputs; output is `rotl(s0 + s3, 23) + s0`.
//!
//! `next_f64` maps a draw to `[0, 1)` as `(x >> 11) * 2^-53`.

/// Advances a splitmix64 state and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for a named subsystem stream from a master seed.
///
/// Stream `k` is the `k+1`-th splitmix64 output of the master seed, so
/// streams are independent and the derivation is trivially portable.
pub fn derive_stream(master_seed: u64, stream: u64) -> u64 {
    let mut s = master_seed;
    let mut out = 0;
    for _ in 0..=stream {
        out = splitmix64(&mut s);
    }
    out
}

/// xoshiro256++ generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Creates a generator with state expanded from `seed` via splitmix64.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n
    }

    /// Coin flip with probability `p` of `true`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
