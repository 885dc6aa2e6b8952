//! Counter-based random number streams.
//!
//! Every stream is a pure function of `(seed, stream_id, counter)`, so
//! antithetic pairs, parallel trajectories, and re-runs reproduce exactly
//! regardless of scheduling. Streams may be split into named substreams;
//! distinct stream ids produce statistically independent sequences.
//!
//! The generator is the splitmix64 construction: a strong 64-bit finalizer
//! applied to an affine counter sequence.

use super::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string, used to derive stream ids from names.
fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A splittable, counter-based random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    base: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let base = mix64(
            mix64(seed ^ 0x5851_F42D_4C95_7F2D)
                .wrapping_add(mix64(stream_id.wrapping_mul(GOLDEN_GAMMA) ^ 0xD1B5_4A32_D192_ED03)),
        );
        Self {
            seed,
            stream_id,
            counter: 0,
            base,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent stream; the child's counter starts at zero.
    pub fn substream(&self, id: u64) -> Self {
        let child = mix64(self.stream_id ^ mix64(id ^ 0xA076_1D64_78BD_642F));
        Self::new(self.seed, child)
    }

    /// Named substream (e.g. "train", "sample", "posterior", "data").
    pub fn named(&self, name: &str) -> Self {
        self.substream(hash_name(name))
    }

    /// Up to four independent 64-bit words per counter value.
    #[inline]
    fn word(&self, salt: u64) -> u64 {
        let idx = self.counter.wrapping_mul(4).wrapping_add(salt);
        mix64(self.base.wrapping_add(idx.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform draw in the open interval (0, 1); advances the counter by one.
    pub fn next_uniform(&mut self) -> f64 {
        let u = self.word(0);
        self.counter += 1;
        ((u >> 11) as f64 + 0.5) * 2f64.powi(-53)
    }

    /// Standard normal draw (Box-Muller); advances the counter by one.
    pub fn next_gauss(&mut self) -> f64 {
        let u1 = ((self.word(0) >> 11) as f64 + 0.5) * 2f64.powi(-53);
        let u2 = ((self.word(1) >> 11) as f64 + 0.5) * 2f64.powi(-53);
        self.counter += 1;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `n` i.i.d. standard normal draws; advances the counter by exactly `n`.
    pub fn gauss(&mut self, n: usize) -> Tensor {
        assert!(n >= 1, "gauss() needs n >= 1");
        let data: Vec<f64> = (0..n).map(|_| self.next_gauss()).collect();
        Tensor::from_parts(vec![n], data)
    }

    pub fn gauss_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gauss()).collect()
    }

    /// Uniform index in `[0, n)` via the multiply-shift reduction.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let u = self.word(0);
        self.counter += 1;
        ((u128::from(u) * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i + 1);
            xs.swap(i, j);
        }
    }
}
