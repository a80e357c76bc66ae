use serde::{Deserialize, Serialize};

/// Counter-based PRNG with labeled substreams.
///
/// Every random decision in the toolkit derives from one root seed plus a
/// textual stream label, so identical (seed, label, call sequence) replays
/// bit-for-bit regardless of thread schedule. The generator is SplitMix64
/// over a per-stream base state; the counter makes the state serializable
/// and seekable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StreamRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl StreamRng {
    pub fn new(seed: u64, stream_label: &str) -> Self {
        StreamRng {
            seed,
            stream: mix64(seed ^ label_hash(stream_label)),
            counter: 0,
        }
    }

    /// Independent child stream; the child label is scoped under this
    /// stream so distinct parents never collide.
    pub fn substream(&self, label: &str) -> Self {
        StreamRng {
            seed: self.seed,
            stream: mix64(self.stream ^ label_hash(label)),
            counter: 0,
        }
    }

    /// Numeric variant of `substream`, used to index per-item streams
    /// (one per video id, per epoch, ...).
    pub fn substream_indexed(&self, label: &str, index: u64) -> Self {
        StreamRng {
            seed: self.seed,
            stream: mix64(self.stream ^ label_hash(label) ^ mix64(index.wrapping_add(1))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.stream.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, bound) via rejection (unbiased).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0)");
        let bound = bound as u64;
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Uniformly random permutation of 0..n that is not the identity.
    /// n must be >= 2.
    pub fn non_identity_permutation(&mut self, n: usize) -> Vec<usize> {
        assert!(n >= 2);
        loop {
            let mut p: Vec<usize> = (0..n).collect();
            self.shuffle(&mut p);
            if p.iter().enumerate().any(|(i, &v)| i != v) {
                return p;
            }
        }
    }

    /// Sample k distinct indices from 0..n uniformly without replacement.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_label_and_sequence_reproduce() {
        let mut a = StreamRng::new(42, "init");
        let mut b = StreamRng::new(42, "init");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn labels_derive_distinct_streams() {
        let mut a = StreamRng::new(7, "alpha");
        let mut b = StreamRng::new(7, "beta");
        let same = (0..32).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let mut parent = StreamRng::new(3, "root");
        let child_before = parent.substream("child");
        parent.next_u64();
        parent.next_u64();
        let child_after = parent.substream("child");
        assert_eq!(child_before, child_after);
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = StreamRng::new(11, "bounds");
        let mut seen = [false; 5];
        for _ in 0..200 {
            let v = rng.below(5);
            assert!(v < 5);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn non_identity_permutation_never_identity() {
        let mut rng = StreamRng::new(99, "perm");
        for _ in 0..50 {
            let p = rng.non_identity_permutation(4);
            assert!(p.iter().enumerate().any(|(i, &v)| i != v));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn serializes_mid_stream() {
        let mut rng = StreamRng::new(5, "ckpt");
        rng.next_u64();
        let json = serde_json::to_string(&rng).unwrap();
        let mut restored: StreamRng = serde_json::from_str(&json).unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }
}
