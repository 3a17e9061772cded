//! Regression, image and sequence-reconstruction metrics.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("metric input is empty")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch in pair {index}: {left:?} vs {right:?}")]
    ShapeMismatch {
        index: usize,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("r2 is undefined for constant targets")]
    ConstantTarget,
    #[error("r2 needs at least two values, got {0}")]
    TooFew(usize),
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<(), MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch {
            left: y.len(),
            right: yhat.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    check_pair(y, yhat)?;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(MetricError::TooFew(y.len()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantTarget);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all 8×8 windows (stride 1) of two `width`-wide images with
/// dynamic range 1. Window statistics use population (1/N) moments.
pub fn ssim(a: &[f64], b: &[f64], width: usize) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    if width == 0 || !a.len().is_multiple_of(width) {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: width,
        });
    }
    let height = a.len() / width;
    let w = SSIM_WINDOW;
    if height < w || width < w {
        return Err(MetricError::Empty);
    }
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - w {
        for x0 in 0..=width - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + w {
                let row = y * width;
                for x in x0..x0 + w {
                    let (p, q) = (a[row + x], b[row + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn check_pairs(pairs: &[(Matrix, Matrix)]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.shape() != b.shape() {
            return Err(MetricError::ShapeMismatch {
                index: i,
                left: a.shape(),
                right: b.shape(),
            });
        }
    }
    Ok(())
}

/// Fraction of pairs whose matrices are bitwise equal.
pub fn exact_match_rate(pairs: &[(Matrix, Matrix)]) -> Result<f64, MetricError> {
    check_pairs(pairs)?;
    let hits = pairs.iter().filter(|(a, b)| a.as_slice() == b.as_slice()).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows whose argmax differs.
pub fn row_errors(a: &Matrix, b: &Matrix) -> usize {
    (0..a.rows()).filter(|&r| argmax(a.row(r)) != argmax(b.row(r))).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorHistogram {
    /// `counts[k]` is the number of pairs with exactly `k` row errors.
    pub counts: Vec<usize>,
    /// `cumulative[k]` is the fraction of pairs with at most `k` row errors.
    pub cumulative: Vec<f64>,
}

impl ErrorHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of pairs with fewer than `k` row errors.
    pub fn fraction_below(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.cumulative[(k - 1).min(self.cumulative.len() - 1)]
        }
    }
}

pub fn reconstruction_error_histogram(
    pairs: &[(Matrix, Matrix)],
) -> Result<ErrorHistogram, MetricError> {
    check_pairs(pairs)?;
    let rows = pairs.iter().map(|(a, _)| a.rows()).max().unwrap_or(0);
    let mut counts = vec![0usize; rows + 1];
    for (a, b) in pairs {
        counts[row_errors(a, b)] += 1;
    }
    let n = pairs.len() as f64;
    let mut acc = 0usize;
    let cumulative = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / n
        })
        .collect();
    Ok(ErrorHistogram { counts, cumulative })
}

/// One metric with an overall value and optional per-group breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub overall: f64,
    pub n: usize,
    pub groups: Vec<GroupValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupValue {
    pub group: String,
    pub value: f64,
    pub n: usize,
}

impl MetricReport {
    /// Evaluates `f` over all values and over each group, groups sorted by
    /// name. Groups the metric is undefined on are skipped.
    pub fn grouped<F>(
        metric: &str,
        y: &[f64],
        yhat: &[f64],
        groups: &[String],
        f: F,
    ) -> Result<Self, MetricError>
    where
        F: Fn(&[f64], &[f64]) -> Result<f64, MetricError>,
    {
        check_pair(y, yhat)?;
        if groups.len() != y.len() {
            return Err(MetricError::LengthMismatch {
                left: y.len(),
                right: groups.len(),
            });
        }
        let overall = f(y, yhat)?;
        let mut by_group: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((g, &a), &b) in groups.iter().zip(y).zip(yhat) {
            let entry = by_group.entry(g.as_str()).or_default();
            entry.0.push(a);
            entry.1.push(b);
        }
        let groups = by_group
            .into_iter()
            .filter_map(|(g, (a, b))| {
                f(&a, &b).ok().map(|value| GroupValue {
                    group: g.to_string(),
                    value,
                    n: a.len(),
                })
            })
            .collect();
        Ok(Self {
            metric: metric.to_string(),
            overall,
            n: y.len(),
            groups,
        })
    }

    /// Per-group values of an already per-sample score (e.g. SSIM), averaged.
    pub fn mean_by_group(metric: &str, values: &[f64], groups: &[String]) -> Result<Self, MetricError> {
        if values.is_empty() {
            return Err(MetricError::Empty);
        }
        if groups.len() != values.len() {
            return Err(MetricError::LengthMismatch {
                left: values.len(),
                right: groups.len(),
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (g, &v) in groups.iter().zip(values) {
            by_group.entry(g.as_str()).or_default().push(v);
        }
        Ok(Self {
            metric: metric.to_string(),
            overall: mean(values),
            n: values.len(),
            groups: by_group
                .into_iter()
                .map(|(g, v)| GroupValue {
                    group: g.to_string(),
                    value: mean(&v),
                    n: v.len(),
                })
                .collect(),
        })
    }

    pub fn single(metric: &str, value: f64, n: usize) -> Self {
        Self {
            metric: metric.to_string(),
            overall: value,
            n,
            groups: Vec::new(),
        }
    }

    /// Rows `(metric, group, value, n)`, per-group rows first and the
    /// overall row last under group `all`.
    pub fn rows(&self) -> Vec<(String, String, f64, usize)> {
        self.groups
            .iter()
            .map(|g| (self.metric.clone(), g.group.clone(), g.value, g.n))
            .chain(std::iter::once((
                self.metric.clone(),
                "all".to_string(),
                self.overall,
                self.n,
            )))
            .collect()
    }
}

/// Writes reports as CSV with header `metric,group,value,n`.
pub fn write_reports_csv<W: Write>(w: W, reports: &[MetricReport]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "group", "value", "n"])?;
    for report in reports {
        for (m, g, v, n) in report.rows() {
            out.write_record([m, g, format!("{v:?}"), n.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Linear-interpolated percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
