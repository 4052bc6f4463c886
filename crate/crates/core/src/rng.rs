//! Counter-based, splittable random number generator.
//!
//! The generator is SplitMix64: output `i` of a stream with seed `s` is
//! `mix(s + (i+1)·GAMMA)` where `mix` is the standard 64-bit finalizer.
//! State is just `(seed, position)`, so a stream can be advanced, copied,
//! and split cheaply, and the sequence depends only on the seed — wrapping
//! integer arithmetic gives the same bits on every platform.
//!
//! `split` derives a child seed from the parent's next output through a
//! second finalizer, so child streams are decorrelated from the parent and
//! from each other.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Stafford's "Mix13" variant, used only to derive child seeds.
fn mix64_variant(mut z: u64) -> u64 {
    z = (z ^ (z >> 31)).wrapping_mul(0x7fb5_d329_728e_a185);
    z = (z ^ (z >> 27)).wrapping_mul(0x81da_f14b_a0ca_91bc);
    z ^ (z >> 33)
}

/// Deterministic random stream. Clone to fork the exact sequence; use
/// [`Rng::split`] for an independent stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    position: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit draws taken from this stream so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.position.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller). Consumes two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Rademacher draw: +1 or -1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in `[0, n)`. Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Draws `k` distinct values from `[0, n)`, returned sorted.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        // Partial Fisher-Yates over an index table.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }

    /// Independent child stream. Advances this stream by one draw.
    pub fn split(&mut self) -> Rng {
        let child_seed = mix64_variant(self.next_u64());
        Rng::new(child_seed)
    }

    /// Child stream for a numbered lane (batch element, trial, probe).
    ///
    /// Unlike [`Rng::split`] this does not advance the parent, so lane
    /// streams can be derived concurrently and reproducibly by index.
    pub fn lane(&self, index: u64) -> Rng {
        let salted = self.seed ^ mix64(index.wrapping_add(1).wrapping_mul(GAMMA));
        Rng::new(mix64_variant(salted))
    }
}
