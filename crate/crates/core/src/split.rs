//! Interval-based train/test partitioning by a scalar label.
//!
//! Training intervals are half-open `[lo, hi)`, the test interval is closed
//! `[lo, hi]`. Training intervals are checked first, in listed order, so a
//! value on a shared endpoint goes to whichever interval claims it first.
//! Values outside every interval are dropped and counted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("interval [{lo}, {hi}] is empty or not finite")]
    BadInterval { lo: f64, hi: f64 },
    #[error("intervals [{a_lo}, {a_hi}] and [{b_lo}, {b_hi}] overlap")]
    Overlap {
        a_lo: f64,
        a_hi: f64,
        b_lo: f64,
        b_hi: f64,
    },
    #[error("interval [{lo}, {hi}] leaves the allowed domain [{min}, {max}]")]
    OutOfDomain { lo: f64, hi: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSplit {
    pub train_ranges: Vec<[f64; 2]>,
    #[serde(default)]
    pub test_range: Option<[f64; 2]>,
}

/// Angle split for card datasets.
pub type AngleSplit = RangeSplit;
/// Target split for sequence datasets.
pub type TargetSplit = RangeSplit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Train,
    Test,
    Dropped,
}

/// Indices of each side of a split, in input order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Train/test partition of a dataset, plus how many samples fell outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub dropped: usize,
}

impl RangeSplit {
    /// Split used for the card experiments: train on `[−30, 0) ∪ [15, 30)`,
    /// test on `[0, 15]`.
    pub fn card_interpolation() -> Self {
        Self {
            train_ranges: vec![[-30.0, 0.0], [15.0, 30.0]],
            test_range: Some([0.0, 15.0]),
        }
    }

    /// Everything in `[lo, hi)` is training data; no test set.
    pub fn all_train(lo: f64, hi: f64) -> Self {
        Self {
            train_ranges: vec![[lo, hi]],
            test_range: None,
        }
    }

    fn intervals(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.train_ranges.iter().copied().chain(self.test_range)
    }

    /// Rejects empty/non-finite intervals and intervals that share more than an
    /// endpoint.
    pub fn validate(&self) -> Result<(), SplitError> {
        let all: Vec<[f64; 2]> = self.intervals().collect();
        for &[lo, hi] in &all {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(SplitError::BadInterval { lo, hi });
            }
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let (a, b) = (all[i], all[j]);
                if a[0].max(b[0]) < a[1].min(b[1]) {
                    return Err(SplitError::Overlap {
                        a_lo: a[0],
                        a_hi: a[1],
                        b_lo: b[0],
                        b_hi: b[1],
                    });
                }
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus a domain check.
    pub fn validate_within(&self, min: f64, max: f64) -> Result<(), SplitError> {
        self.validate()?;
        for [lo, hi] in self.intervals() {
            if lo < min || hi > max {
                return Err(SplitError::OutOfDomain { lo, hi, min, max });
            }
        }
        Ok(())
    }

    pub fn assign(&self, v: f64) -> Membership {
        if self.train_ranges.iter().any(|&[lo, hi]| v >= lo && v < hi) {
            Membership::Train
        } else if self.test_range.is_some_and(|[lo, hi]| v >= lo && v <= hi) {
            Membership::Test
        } else {
            Membership::Dropped
        }
    }

    pub fn split_indices(&self, values: &[f64]) -> Result<SplitIndices, SplitError> {
        self.validate()?;
        let mut out = SplitIndices::default();
        for (i, &v) in values.iter().enumerate() {
            match self.assign(v) {
                Membership::Train => out.train.push(i),
                Membership::Test => out.test.push(i),
                Membership::Dropped => out.dropped.push(i),
            }
        }
        Ok(out)
    }

    /// Partitions `items` by the scalar `key`, preserving input order.
    pub fn partition<T: Clone>(
        &self,
        items: &[T],
        key: impl Fn(&T) -> f64,
    ) -> Result<Split<T>, SplitError> {
        let values: Vec<f64> = items.iter().map(key).collect();
        let idx = self.split_indices(&values)?;
        Ok(Split {
            train: idx.train.iter().map(|&i| items[i].clone()).collect(),
            test: idx.test.iter().map(|&i| items[i].clone()).collect(),
            dropped: idx.dropped.len(),
        })
    }
}
