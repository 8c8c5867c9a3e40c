//! Counter-based random numbers (Philox4x32-10).
//!
//! Every draw is a pure function of `(seed, stream_id, index)`, so results
//! never depend on evaluation order or thread count. Uniforms use 53 bits;
//! normals use Box-Muller on one 128-bit block and discard the second
//! variate so each index maps to exactly one value.

use serde::{Deserialize, Serialize};

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(W0);
            key[1] = key[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, ctr[0]);
        let (hi1, lo1) = mulhilo(M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// An independent random stream. `(seed, stream_id)` fully determines all
/// draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A different stream under the same seed.
    pub fn substream(&self, stream_id: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id,
        }
    }

    pub fn block(&self, index: u64) -> [u32; 4] {
        philox4x32_10(
            [
                index as u32,
                (index >> 32) as u32,
                self.stream_id as u32,
                (self.stream_id >> 32) as u32,
            ],
            [self.seed as u32, (self.seed >> 32) as u32],
        )
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&self, index: u64) -> f64 {
        let b = self.block(index);
        to_unit(b[0], b[1])
    }

    /// Standard normal.
    pub fn normal(&self, index: u64) -> f64 {
        let b = self.block(index);
        // (0, 1] keeps the log finite.
        let u1 = 1.0 - to_unit(b[0], b[1]);
        let u2 = to_unit(b[2], b[3]);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (n >= 1).
    pub fn below(&self, index: u64, n: u64) -> u64 {
        debug_assert!(n >= 1);
        ((self.uniform(index) * n as f64) as u64).min(n - 1)
    }

    pub fn cursor(&self) -> RngCursor {
        RngCursor {
            stream: *self,
            next: 0,
        }
    }
}

#[inline]
fn to_unit(a: u32, b: u32) -> f64 {
    let bits = ((a as u64) << 32 | b as u64) >> 11;
    bits as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential reader over a stream's indices.
#[derive(Debug, Clone)]
pub struct RngCursor {
    stream: RngStream,
    next: u64,
}

impl RngCursor {
    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn uniform(&mut self) -> f64 {
        let v = self.stream.uniform(self.next);
        self.next += 1;
        v
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform();
        // lo + u (hi - lo) can round up to hi only when hi - lo is tiny; clamp keeps the interval closed.
        (lo + u * (hi - lo)).clamp(lo, hi)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        let v = self.stream.below(self.next, n);
        self.next += 1;
        v
    }

    pub fn normal(&mut self) -> f64 {
        let v = self.stream.normal(self.next);
        self.next += 1;
        v
    }
}
