//! Deterministic parallel Monte Carlo.
//!
//! Samples are split into fixed-size chunks; chunk `c` draws from the ChaCha
//! stream `c` of the run seed. Chunk results come back in chunk order so the
//! final reduction does not depend on scheduling.

use crate::numeric::Neumaier;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const CHUNK: usize = 1024;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `f(rng, first_sample_index, count)` once per chunk, in parallel,
/// returning the results in chunk order.
pub fn map_chunks<T, F>(seed: u64, samples: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize, usize) -> T + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let count = CHUNK.min(samples - start);
            let mut rng = stream_rng(seed, c as u64);
            f(&mut rng, start, count)
        })
        .collect()
}

/// Running first and second moments with compensated sums.
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments {
    n: u64,
    sum: Neumaier,
    sumsq: Neumaier,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum.add(x);
        self.sumsq.add(x * x);
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum.merge(&other.sum);
        self.sumsq.merge(&other.sumsq);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.sum.value() / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let n = self.n as f64;
        if self.n < 2 {
            return 0.0;
        }
        let m = self.mean();
        ((self.sumsq.value() - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn reduce<'a>(parts: impl IntoIterator<Item = &'a Moments>) -> Moments {
        let mut out = Moments::default();
        for p in parts {
            out.merge(p);
        }
        out
    }
}

/// Moments of `exp(l)` accumulated from log values `l`, with a running shift
/// so that values like `e^{200}` never overflow.
#[derive(Clone, Copy, Debug)]
pub struct LogMoments {
    n: u64,
    shift: f64,
    s1: f64,
    s2: f64,
}

impl Default for LogMoments {
    fn default() -> Self {
        LogMoments { n: 0, shift: f64::NEG_INFINITY, s1: 0.0, s2: 0.0 }
    }
}

impl LogMoments {
    pub fn push(&mut self, l: f64) {
        self.n += 1;
        if l == f64::NEG_INFINITY {
            return;
        }
        if l > self.shift {
            let r = (self.shift - l).exp();
            self.s1 *= r;
            self.s2 *= r * r;
            self.shift = l;
        }
        let e = (l - self.shift).exp();
        self.s1 += e;
        self.s2 += e * e;
    }

    pub fn merge(&mut self, other: &LogMoments) {
        self.n += other.n;
        if other.shift == f64::NEG_INFINITY {
            return;
        }
        if other.shift > self.shift {
            let r = (self.shift - other.shift).exp();
            self.s1 *= r;
            self.s2 *= r * r;
            self.shift = other.shift;
        }
        let r = (other.shift - self.shift).exp();
        self.s1 += other.s1 * r;
        self.s2 += other.s2 * r * r;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Natural log of the sample mean of `exp(l)`.
    pub fn log_mean(&self) -> f64 {
        if self.s1 == 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shift + (self.s1 / self.n as f64).ln()
    }

    /// Standard error of the mean divided by the mean, which is also the
    /// delta-method standard error of `log_mean`.
    pub fn rel_stderr(&self) -> f64 {
        if self.s1 == 0.0 || self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.s1 / n;
        let var = ((self.s2 / n - m * m) * n / (n - 1.0)).max(0.0);
        (var / n).sqrt() / m
    }

    pub fn reduce<'a>(parts: impl IntoIterator<Item = &'a LogMoments>) -> LogMoments {
        let mut out = LogMoments::default();
        for p in parts {
            out.merge(p);
        }
        out
    }
}
