//! Small numeric and sampling helpers shared by the shuffles.

use rand::Rng;

/// `⌈x⌉`, forgiving float noise just above an integer (`1.05 * 100.0`
/// evaluates to `105.00000000000001`).
pub fn ceil_tol(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `⌊x⌋` with the same tolerance as [`ceil_tol`].
pub fn floor_tol(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// `⌈√n⌉` in integers.
pub fn ceil_sqrt(n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while r * r < n {
        r += 1;
    }
    r
}

/// Splits `0..n` into `parts` contiguous ranges whose sizes differ by at most one.
pub fn balanced_ranges(n: usize, parts: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let parts = parts.max(1);
    let base = n / parts;
    let extra = n % parts;
    (0..parts).scan(0usize, move |start, i| {
        let len = base + usize::from(i < extra);
        let r = *start..*start + len;
        *start += len;
        Some(r)
    })
}

/// Default client cache multiplier `(1 + 1/ε)·ln(2e)`.
pub fn default_delta(epsilon: f64) -> f64 {
    (1.0 + 1.0 / epsilon) * (2.0 * std::f64::consts::E).ln()
}

/// Set of `u32` values supporting O(1) membership, removal and uniform
/// sampling. Iteration order depends only on the sequence of operations.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    items: Vec<u32>,
    index: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl SampleSet {
    /// Empty set over the universe `0..universe`.
    pub fn new(universe: usize) -> Self {
        SampleSet { items: Vec::new(), index: vec![ABSENT; universe] }
    }

    /// The full universe `0..universe`.
    pub fn full(universe: usize) -> Self {
        SampleSet { items: (0..universe as u32).collect(), index: (0..universe as u32).collect() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, x: u32) -> bool {
        self.index.get(x as usize).is_some_and(|&i| i != ABSENT)
    }

    pub fn insert(&mut self, x: u32) -> bool {
        if self.contains(x) {
            return false;
        }
        self.index[x as usize] = self.items.len() as u32;
        self.items.push(x);
        true
    }

    pub fn remove(&mut self, x: u32) -> bool {
        if !self.contains(x) {
            return false;
        }
        let i = self.index[x as usize] as usize;
        let last = *self.items.last().unwrap();
        self.items.swap_remove(i);
        if last != x {
            self.index[last as usize] = i as u32;
        }
        self.index[x as usize] = ABSENT;
        true
    }

    /// Removes and returns a uniform member.
    pub fn take_random<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<u32> {
        if self.items.is_empty() {
            return None;
        }
        let x = self.items[rng.gen_range(0..self.items.len())];
        self.remove(x);
        Some(x)
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ceilings() {
        assert_eq!(ceil_tol(1.05 * 100.0), 105);
        assert_eq!(ceil_tol(1.25 * 32.0), 40);
        assert_eq!(ceil_tol(1.5), 2);
        assert_eq!(floor_tol(0.75 * 1000.0 / 20.0), 37);
        assert_eq!(ceil_sqrt(0), 0);
        assert_eq!(ceil_sqrt(1), 1);
        assert_eq!(ceil_sqrt(10), 4);
        assert_eq!(ceil_sqrt(1_000_000), 1000);
        assert_eq!(ceil_sqrt(1_000_001), 1001);
    }

    #[test]
    fn sample_set_basics() {
        let mut s = SampleSet::full(5);
        assert!(s.remove(2));
        assert!(!s.remove(2));
        assert!(!s.contains(2));
        assert_eq!(s.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut got: Vec<u32> = std::iter::from_fn(|| s.take_random(&mut rng)).collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 3, 4]);
        assert!(s.insert(3));
        assert!(s.contains(3));
    }

    proptest! {
        #[test]
        fn balanced_ranges_cover(n in 0usize..500, parts in 1usize..40) {
            let rs: Vec<_> = balanced_ranges(n, parts).collect();
            prop_assert_eq!(rs.len(), parts);
            prop_assert_eq!(rs.first().map(|r| r.start).unwrap_or(0), 0);
            prop_assert_eq!(rs.last().unwrap().end, n);
            for w in rs.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            let min = rs.iter().map(|r| r.len()).min().unwrap();
            let max = rs.iter().map(|r| r.len()).max().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn ceil_sqrt_is_tight(n in 1usize..10_000_000) {
            let r = ceil_sqrt(n);
            prop_assert!(r * r >= n);
            prop_assert!((r - 1) * (r - 1) < n);
        }
    }
}
