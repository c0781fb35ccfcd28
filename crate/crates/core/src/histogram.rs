//! Generated-length histograms and mode detection.

use alloc::vec::Vec;

/// Counts over token lengths `1..=max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthHistogram {
    counts: Vec<usize>,
    out_of_range: usize,
}

impl LengthHistogram {
    pub fn new(max_len: usize) -> Self {
        Self { counts: alloc::vec![0; max_len], out_of_range: 0 }
    }

    pub fn from_lengths<I: IntoIterator<Item = usize>>(max_len: usize, lengths: I) -> Self {
        let mut h = Self::new(max_len);
        for l in lengths {
            h.add(l);
        }
        h
    }

    pub fn add(&mut self, len: usize) {
        match len.checked_sub(1).and_then(|i| self.counts.get_mut(i)) {
            Some(c) => *c += 1,
            None => self.out_of_range += 1,
        }
    }

    pub fn max_len(&self) -> usize {
        self.counts.len()
    }

    /// `counts()[i]` is the number of samples of length `i + 1`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn out_of_range(&self) -> usize {
        self.out_of_range
    }

    /// Width-3 moving average (edges average over the bins that exist).
    pub fn smoothed(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                let window = &self.counts[lo..=hi];
                window.iter().sum::<usize>() as f64 / window.len() as f64
            })
            .collect()
    }

    /// One mode per contiguous run of the smoothed histogram that exceeds
    /// `rel_threshold` times its maximum, reported at the run's highest bin
    /// (the centre of a tied top plateau).
    pub fn modes(&self, rel_threshold: f64) -> Vec<usize> {
        let s = self.smoothed();
        let max = s.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let cut = rel_threshold * max;
        let mut modes = Vec::new();
        let mut i = 0;
        while i < s.len() {
            if s[i] <= cut {
                i += 1;
                continue;
            }
            let mut j = i;
            while j + 1 < s.len() && s[j + 1] > cut {
                j += 1;
            }
            let top = s[i..=j].iter().copied().fold(0.0, f64::max);
            let first = (i..=j).find(|&k| s[k] == top).unwrap_or(i);
            let mut last = first;
            while last < j && s[last + 1] == top {
                last += 1;
            }
            modes.push((first + last) / 2 + 1);
            i = j + 1;
        }
        modes
    }
}

/// Default relative threshold for [`LengthHistogram::modes`].
pub const MODE_THRESHOLD: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_out_of_range() {
        let h = LengthHistogram::from_lengths(5, [1, 2, 2, 5, 6, 0]);
        assert_eq!(h.counts(), &[1, 2, 0, 0, 1]);
        assert_eq!(h.total(), 4);
        assert_eq!(h.out_of_range(), 2);
    }

    #[test]
    fn empty_histogram_has_no_modes() {
        assert!(LengthHistogram::new(50).modes(MODE_THRESHOLD).is_empty());
    }

    #[test]
    fn single_mode() {
        let lengths = (0..100).map(|i| 19 + i % 3);
        let h = LengthHistogram::from_lengths(50, lengths);
        assert_eq!(h.modes(MODE_THRESHOLD), vec![20]);
    }

    #[test]
    fn two_modes() {
        let lengths = (0..1000).map(|i| if i % 2 == 0 { 11 + i % 3 } else { 39 + i % 3 });
        let h = LengthHistogram::from_lengths(50, lengths);
        assert_eq!(h.modes(MODE_THRESHOLD), vec![12, 40]);
    }

    #[test]
    fn ragged_cluster_is_one_mode() {
        let mut lengths = Vec::new();
        for (len, n) in [(10, 30), (11, 5), (12, 40), (13, 4), (14, 35)] {
            lengths.extend(core::iter::repeat(len).take(n));
        }
        let h = LengthHistogram::from_lengths(50, lengths);
        assert_eq!(h.modes(MODE_THRESHOLD).len(), 1);
    }

    #[test]
    fn small_bumps_below_threshold_ignored() {
        let mut lengths: Vec<usize> = vec![20; 100];
        lengths.push(40);
        let h = LengthHistogram::from_lengths(50, lengths);
        assert_eq!(h.modes(MODE_THRESHOLD), vec![20]);
    }
}
