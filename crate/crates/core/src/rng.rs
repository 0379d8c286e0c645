//! Deterministic pseudo-random number generation.
//!
//! The generator is pinned down exactly so that independently written
//! implementations reproduce the same streams:
//!
//! * State initialization: the 64-bit seed is expanded into four 64-bit
//!   words by repeated application of the splitmix64 step function
//!   (constant `0x9E3779B97F4A7C15`, finalizer `0xBF58476D1CE4E5B9` /
//!   `0x94D049BB133111EB`).
//! * Uniform u64: xoshiro256++ (rotl(s0 + s3, 23) + s0, then the
//!   standard xoshiro256 state transition).
//! * Uniform f64 in [0,1): top 53 bits of the u64, scaled by 2^-53.
//! * Gaussian: Box–Muller on two uniforms, with `u1` shifted into
//!   (0,1] to avoid log(0); the paired sine draw is cached and returned
//!   on the next call.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ generator with splitmix64 seeding and Box–Muller gaussians.
#[derive(Clone, Debug)]
pub struct Prng {
    s: [u64; 4],
    gauss_spare: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Prng {
            s,
            gauss_spare: None,
        }
    }

    /// Derives an independent stream for a sub-task (worker, pair, inner
    /// sample). The derivation is a documented splitmix chain over the
    /// parent seed and the index, so it is reproducible by construction.
    pub fn derive_seed(seed: u64, index: u64) -> u64 {
        let mut sm = seed;
        let a = splitmix64(&mut sm);
        let mut sm2 = a ^ index.wrapping_mul(SPLITMIX_GAMMA);
        splitmix64(&mut sm2)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0,1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0,1] so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills a fresh vector with standard normal draws.
    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }
}
