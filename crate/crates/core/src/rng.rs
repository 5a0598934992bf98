//! Path-keyed deterministic random streams.
//!
//! A stream is identified by a root seed and an ordered list of labels
//! (for example `seed → "sim" → batch → plate → well → site → "cells"`).
//! The initial state is a splitmix64 fold over the seed and the hashed
//! labels, so a stream's output never depends on what other streams were
//! consumed before it. This is what lets the simulator and the audits run
//! in parallel while staying bit-reproducible.

use rand_core::RngCore;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, then avalanched.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

fn fold_state(root_seed: u64, path: &[String]) -> u64 {
    let mut state = mix64(root_seed.wrapping_add(GOLDEN_GAMMA));
    for label in path {
        state = mix64(state ^ hash_label(label).wrapping_add(GOLDEN_GAMMA));
    }
    state
}

#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<String>,
    state: u64,
    spare_normal: Option<f64>,
}

/// Derive the stream for `(root_seed, path)`.
///
/// Panics if `path` is empty; every caller names at least its purpose.
pub fn derive_stream<S: AsRef<str>>(root_seed: u64, path: &[S]) -> RngStream {
    assert!(!path.is_empty(), "stream path must be nonempty");
    let path: Vec<String> = path.iter().map(|s| s.as_ref().to_owned()).collect();
    let state = fold_state(root_seed, &path);
    RngStream {
        root_seed,
        path,
        state,
        spare_normal: None,
    }
}

impl RngStream {
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    /// A fresh stream one label deeper. Independent of how much of `self`
    /// has been consumed.
    pub fn child(&self, label: impl AsRef<str>) -> RngStream {
        let mut path = self.path.clone();
        path.push(label.as_ref().to_owned());
        derive_stream(self.root_seed, &path)
    }

    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box–Muller, both variates used).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_sequence() {
        let mut a = derive_stream(7, &["a"]);
        let mut b = derive_stream(7, &["a"]);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn distinct_paths_differ() {
        // Oracle: evaluate the fold directly rather than through the stream.
        let sa = fold_state(7, &["a".to_string()]);
        let sb = fold_state(7, &["b".to_string()]);
        assert_ne!(sa, sb);
        let first_a = mix64(sa.wrapping_add(GOLDEN_GAMMA));
        let first_b = mix64(sb.wrapping_add(GOLDEN_GAMMA));
        assert_ne!(first_a, first_b);
        assert_eq!(derive_stream(7, &["a"]).next_raw(), first_a);
        assert_eq!(derive_stream(7, &["b"]).next_raw(), first_b);
    }

    #[test]
    fn stream_is_independent_of_other_consumption() {
        let fresh: Vec<u64> = {
            let mut s = derive_stream(7, &["a", "b"]);
            (0..10).map(|_| s.next_raw()).collect()
        };
        let mut other = derive_stream(7, &["a"]);
        for _ in 0..1000 {
            other.next_raw();
        }
        let mut s = other.child("b");
        let later: Vec<u64> = (0..10).map(|_| s.next_raw()).collect();
        assert_eq!(fresh, later);
    }

    #[test]
    fn path_order_matters() {
        let mut ab = derive_stream(1, &["a", "b"]);
        let mut ba = derive_stream(1, &["b", "a"]);
        assert_ne!(ab.next_raw(), ba.next_raw());
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut s = derive_stream(99, &["moments"]);
        let n = 200_000;
        let (mut su, mut sz, mut szz) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
            su += u;
            let z = s.normal();
            sz += z;
            szz += z * z;
        }
        let n = n as f64;
        assert!((su / n - 0.5).abs() < 0.005);
        assert!((sz / n).abs() < 0.01);
        assert!((szz / n - 1.0).abs() < 0.02);
    }

    #[test]
    #[should_panic]
    fn empty_path_rejected() {
        let empty: [&str; 0] = [];
        derive_stream(1, &empty);
    }
}
