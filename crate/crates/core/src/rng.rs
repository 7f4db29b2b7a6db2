//! Seeded ChaCha streams with Box-Muller normals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform and standard-normal draws addressed by position, so any candidate
/// can be regenerated without replaying the stream.
pub(crate) struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NormalStream { rng }
    }

    pub(crate) fn seek(&mut self, u64_offset: u64) {
        self.rng.set_word_pos(u64_offset as u128 * 2);
    }

    /// Uniform in (0, 1].
    pub(crate) fn open_uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1).
    pub(crate) fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Box-Muller, filling `out` pairwise.
    pub(crate) fn fill_normal(&mut self, out: &mut [f64]) {
        for pair in out.chunks_mut(2) {
            let r = (-2.0 * self.open_uniform().ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * self.uniform();
            pair[0] = r * theta.cos();
            if let Some(second) = pair.get_mut(1) {
                *second = r * theta.sin();
            }
        }
    }

    pub(crate) fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }
}
