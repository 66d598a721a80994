//! Indexed prefix-sum tree for O(log n) weighted selection with single-entry
//! updates.

use std::ops::{Add, Sub};

pub trait Weight: Copy + Default + PartialOrd + Add<Output = Self> + Sub<Output = Self> {
    /// Whether accumulated rounding calls for periodic rebuilds.
    const INEXACT: bool;
}

impl Weight for f64 {
    const INEXACT: bool = true;
}

impl Weight for u64 {
    const INEXACT: bool = false;
}

#[derive(Debug, Clone)]
pub struct Fenwick<T: Weight> {
    /// 1-based partial sums.
    tree: Vec<T>,
    leaves: Vec<T>,
    updates_since_rebuild: usize,
}

#[inline]
fn lsb(i: usize) -> usize {
    i & i.wrapping_neg()
}

impl<T: Weight> Fenwick<T> {
    pub fn new(leaves: Vec<T>) -> Self {
        let mut f = Self {
            tree: Vec::new(),
            leaves,
            updates_since_rebuild: 0,
        };
        f.rebuild();
        f
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaf(&self, i: usize) -> T {
        self.leaves[i]
    }

    pub fn leaves(&self) -> &[T] {
        &self.leaves
    }

    /// Recomputes every partial sum from the stored leaves.
    pub fn rebuild(&mut self) {
        let n = self.leaves.len();
        self.tree.clear();
        self.tree.resize(n + 1, T::default());
        self.tree[1..].copy_from_slice(&self.leaves);
        for i in 1..=n {
            let j = i + lsb(i);
            if j <= n {
                let v = self.tree[i];
                self.tree[j] = self.tree[j] + v;
            }
        }
        self.updates_since_rebuild = 0;
    }

    /// Sum of leaves `0..end`.
    pub fn prefix_sum(&self, end: usize) -> T {
        let mut i = end;
        let mut acc = T::default();
        while i > 0 {
            acc = acc + self.tree[i];
            i -= lsb(i);
        }
        acc
    }

    pub fn total(&self) -> T {
        self.prefix_sum(self.leaves.len())
    }

    pub fn set(&mut self, index: usize, value: T) {
        let old = self.leaves[index];
        if old == value {
            return;
        }
        self.leaves[index] = value;
        if T::INEXACT {
            self.updates_since_rebuild += 1;
            if self.updates_since_rebuild > 4 * self.leaves.len() + 64 {
                self.rebuild();
                return;
            }
        }
        let mut i = index + 1;
        let n = self.leaves.len();
        while i <= n {
            self.tree[i] = self.tree[i] - old + value;
            i += lsb(i);
        }
    }

    pub fn push(&mut self, value: T) {
        self.leaves.push(value);
        let i = self.leaves.len();
        // tree[i] covers leaves (i - lsb(i), i].
        let covered = self.prefix_sum(i - 1) - self.prefix_sum(i - lsb(i));
        self.tree.push(covered + value);
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`. `None` if
    /// the walk lands past the end or on a zero leaf (possible only through
    /// rounding when `target` is near the total); callers redraw.
    pub fn find(&self, target: T) -> Option<usize> {
        let n = self.leaves.len();
        if n == 0 {
            return None;
        }
        let mut pos = 0;
        let mut rem = target;
        let mut step = 1usize << (usize::BITS - 1 - n.leading_zeros());
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem = rem - self.tree[next];
            }
            step >>= 1;
        }
        (pos < n && self.leaves[pos] > T::default()).then_some(pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn find_matches_linear_scan() {
        let w = vec![0u64, 3, 0, 1, 5, 0, 2];
        let f = Fenwick::new(w.clone());
        assert_eq!(f.total(), 11);
        let mut expected = Vec::new();
        for (i, &x) in w.iter().enumerate() {
            expected.extend(std::iter::repeat_n(i, x as usize));
        }
        for (t, &e) in expected.iter().enumerate() {
            assert_eq!(f.find(t as u64), Some(e));
        }
        assert_eq!(f.find(11), None);
    }

    #[test]
    fn push_agrees_with_rebuild() {
        let mut f = Fenwick::new(Vec::<u64>::new());
        for v in 0..37u64 {
            f.push(v % 5);
        }
        let g = Fenwick::new(f.leaves().to_vec());
        for i in 0..=37 {
            assert_eq!(f.prefix_sum(i), g.prefix_sum(i));
        }
    }

    proptest! {
        #[test]
        fn updates_track_prefix_sums(
            init in prop::collection::vec(0.0f64..10.0, 1..64),
            ops in prop::collection::vec((0usize..64, 0.0f64..10.0), 0..200),
        ) {
            let mut f = Fenwick::new(init.clone());
            let mut plain = init;
            for (i, v) in ops {
                let i = i % plain.len();
                plain[i] = v;
                f.set(i, v);
            }
            let mut acc = 0.0;
            for (i, p) in plain.iter().enumerate() {
                acc += p;
                prop_assert!((f.prefix_sum(i + 1) - acc).abs() < 1e-9);
            }
        }
    }
}
