//! Small estimation helpers: running moments, batch-means confidence
//! intervals and order-based summaries.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Number of batches used for batch-means intervals.
pub const DEFAULT_BATCHES: usize = 30;

/// Running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for Welford {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut w = Welford::default();
        for x in iter {
            w.push(x);
        }
        w
    }
}

/// A point estimate with a symmetric 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub ci95: f64,
    pub std_err: f64,
}

/// Two-sided 97.5% Student-t quantile.
pub fn t_quantile_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom").inverse_cdf(0.975)
}

/// Batch-means estimate of the mean of a (possibly autocorrelated) series.
///
/// The series is cut into `batches` contiguous batches of equal length (any
/// remainder at the front is dropped); the batch means are treated as
/// approximately independent.
pub fn batch_means(series: &[f64], batches: usize) -> Estimate {
    assert!(batches >= 2, "need at least two batches");
    assert!(series.len() >= batches, "series shorter than batch count");
    let len = series.len() / batches;
    let start = series.len() - len * batches;
    let means: Welford = series[start..].chunks_exact(len).map(|c| c.iter().sum::<f64>() / len as f64).collect();
    let std_err = means.std_err();
    Estimate { mean: means.mean(), ci95: t_quantile_975(batches - 1) * std_err, std_err }
}

/// Sums of consecutive non-overlapping blocks of `n` elements.
pub fn block_sums(series: &[f64], n: usize) -> Vec<f64> {
    series.chunks_exact(n).map(|c| c.iter().sum()).collect()
}

/// Linear-interpolated quantile of unsorted data (`q` in `[0, 1]`).
pub fn quantile(data: &[f64], q: f64) -> f64 {
    assert!(!data.is_empty(), "quantile of empty data");
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        // keeps infinite entries usable
        return v[lo];
    }
    v[lo] + (v[lo + 1] - v[lo]) * frac
}

pub fn median(data: &[f64]) -> f64 {
    quantile(data, 0.5)
}

pub fn iqr(data: &[f64]) -> f64 {
    quantile(data, 0.75) - quantile(data, 0.25)
}
