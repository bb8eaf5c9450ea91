use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Matrix;
use crate::error::{Error, Result};

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Counter-based random stream keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, whose keystream is a pure function of key, stream id
/// and block counter, so two generators with the same pair produce the same
/// sequence on every platform and regardless of which thread drives them.
/// Independent sub-streams are obtained with [`SeededRng::derive`].
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    core: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream);
        Self {
            seed,
            stream,
            core,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on a sub-stream identified by `tag`. Does not advance `self`.
    pub fn derive(&self, tag: u64) -> SeededRng {
        SeededRng::new(self.seed, splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x5851_f42d))))
    }

    /// Sub-stream keyed by a path of tags, e.g. `(layer, module, sample)`.
    pub fn derive_path(&self, tags: &[u64]) -> SeededRng {
        tags.iter().fold(self.clone(), |rng, &t| rng.derive(t))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform integer on `0..n` (`n > 0`), by rejection so the result is unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal draw (Box–Muller; the second variate of each pair is cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// `+1.0` or `-1.0` with equal probability.
    #[inline]
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Matrix of i.i.d. standard normal draws, filled in row-major order.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("gaussian matrix must be non-empty, got {rows}x{cols}")));
    }
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Column of `m` Rademacher signs.
pub fn sign_vector(m: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::Dimension("sign vector must have at least one entry".into()));
    }
    let data = (0..m).map(|_| rng.sign()).collect();
    Matrix::from_vec(m, 1, data)
}
