//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(key, counter)`, so values do not depend
//! on generation order. Keys are derived hierarchically from a seed with
//! integer or string tags. The mixing function is SplitMix64.

use core::f64::consts::PI;

use crate::diffcore::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used to turn names into key tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Key(u64);

impl Key {
    pub fn new(seed: u64) -> Self {
        Key(splitmix64(seed))
    }

    pub fn derive(self, tag: u64) -> Self {
        Key(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn derive_str(self, tag: &str) -> Self {
        self.derive(fnv1a(tag.as_bytes()))
    }

    pub fn u64_at(self, counter: u64) -> u64 {
        splitmix64(self.0 ^ counter.wrapping_mul(GOLDEN).rotate_left(17))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform_at(self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on counters `2c` and `2c + 1`.
    pub fn normal_at(self, counter: u64) -> f64 {
        let u1 = 1.0 - self.uniform_at(counter.wrapping_mul(2));
        let u2 = self.uniform_at(counter.wrapping_mul(2).wrapping_add(1));
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
    }

    pub fn stream(self) -> Stream {
        Stream { key: self, counter: 0 }
    }
}

/// Sequential view over a key; the n-th draw uses counter n.
#[derive(Debug, Clone)]
pub struct Stream {
    key: Key,
    counter: u64,
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        let v = self.key.u64_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        let v = self.key.uniform_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn normal(&mut self) -> f64 {
        let v = self.key.normal_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

/// Tensor with entries uniform in `±bound`, keyed by parameter name so that
/// adding or removing other parameters never changes this one.
pub fn init_uniform(key: Key, name: &str, shape: &[usize], bound: f64) -> Tensor {
    let k = key.derive_str(name);
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| bound * (2.0 * k.uniform_at(i) - 1.0))
        .collect();
    Tensor::new(shape, data).expect("shape matches count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_depend_only_on_counter() {
        let k = Key::new(7).derive(3);
        let mut s = k.stream();
        let seq: [f64; 4] = [s.uniform(), s.uniform(), s.uniform(), s.uniform()];
        assert_eq!(seq[2], k.uniform_at(2));
        assert_eq!(Key::new(7).derive(3).uniform_at(0), seq[0]);
    }

    #[test]
    fn uniform_moments() {
        let k = Key::new(1);
        let n = 20_000;
        let mean = (0..n).map(|i| k.uniform_at(i)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let z: f64 = (0..n).map(|i| k.normal_at(i)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| k.normal_at(i).powi(2)).sum::<f64>() / n as f64;
        assert!(z.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn below_in_range() {
        let mut s = Key::new(9).stream();
        for _ in 0..1000 {
            assert!(s.below(5) < 5);
        }
    }

    #[test]
    fn string_tags_separate_streams() {
        let k = Key::new(0);
        assert_ne!(k.derive_str("a").u64_at(0), k.derive_str("b").u64_at(0));
    }
}
