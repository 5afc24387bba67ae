use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Equal-width histogram over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        let left = self.lo + width * bin as f64;
        let right = if bin + 1 == self.counts.len() {
            self.hi
        } else {
            self.lo + width * (bin + 1) as f64
        };
        (left, right)
    }

    /// Bin holding `x`; values outside the range land in the edge bins and
    /// `hi` itself belongs to the last bin.
    pub fn bin_of(&self, x: f64) -> usize {
        let n = self.counts.len();
        let t = (x - self.lo) / (self.hi - self.lo) * n as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(n - 1)
        }
    }

    /// `bin_left,bin_right,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (l, r) = self.edges(b);
            writeln!(out, "{l},{r},{c}").unwrap();
        }
        out
    }
}

/// Counts `values` into `bins` equal-width bins spanning `[lo, hi]`.
pub fn bias_histogram(values: impl IntoIterator<Item = f64>, bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("histogram range [{lo}, {hi}] is empty")));
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
    };
    for v in values {
        let b = h.bin_of(v);
        h.counts[b] += 1;
    }
    Ok(h)
}
