//! Box-plot summaries: median, quartiles and Tukey whiskers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl DistributionStats {
    pub fn compute(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invariant("statistics of an empty list".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Invariant("statistics of NaN".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile(&s, 0.25);
        let median = quantile(&s, 0.5);
        let q3 = quantile(&s, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_low = s.iter().copied().find(|&v| v >= lo_fence).unwrap_or(q1).min(q1);
        let whisker_high = s.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(q3).max(q3);
        Ok(DistributionStats {
            count: s.len(),
            median,
            q1,
            q3,
            iqr,
            whisker_low,
            whisker_high,
        })
    }

    pub fn whisker(&self) -> f64 {
        self.whisker_high - self.whisker_low
    }
}

/// `IQR (Q1 to Q3); Whisker (low to high)`.
impl fmt::Display for DistributionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "median {:.4}; IQR {:.4} ({:.4} to {:.4}); Whisker {:.4} ({:.4} to {:.4})",
            self.median,
            self.iqr,
            self.q1,
            self.q3,
            self.whisker(),
            self.whisker_low,
            self.whisker_high
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn textbook_quartiles() {
        let s = DistributionStats::compute(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.iqr), (3.0, 2.0, 4.0, 2.0));
        assert_eq!((s.whisker_low, s.whisker_high), (1.0, 5.0));
    }

    #[test]
    fn constant_list() {
        let s = DistributionStats::compute(&[2.5; 7]).unwrap();
        assert_eq!(s.iqr, 0.0);
        assert_eq!((s.whisker_low, s.whisker_high), (2.5, 2.5));
    }

    #[test]
    fn outlier_excluded_from_whiskers() {
        // q1 = 2, q3 = 4, fences at -1 and 7
        let s = DistributionStats::compute(&[1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.q3), (2.0, 4.0));
        assert_eq!(s.whisker_high, 4.0);
        assert_eq!(s.whisker_low, 1.0);
    }

    #[test]
    fn interpolates_between_ranks() {
        let s = DistributionStats::compute(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    }

    #[test]
    fn empty_rejected() {
        assert!(DistributionStats::compute(&[]).is_err());
    }

    proptest! {
        #[test]
        fn ordering_holds(v in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let s = DistributionStats::compute(&v).unwrap();
            prop_assert!(s.q1 <= s.median && s.median <= s.q3);
            prop_assert!(s.whisker_low <= s.q1 && s.whisker_high >= s.q3);
        }
    }
}
