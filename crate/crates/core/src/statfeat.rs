//! Statistical baseline features per contour.
//!
//! Seven statistics per domain (cents and Hz) describe level, spread,
//! gradient, fluctuation and vibrato-like modulation; three global values
//! add the linear trend, total variation and the voiced fraction. All
//! statistics use population (divide-by-n) conventions and only look at the
//! valid region of a contour.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::Contour;
use crate::matrix::Matrix;
use crate::CONTOUR_LEN;

/// Minimum normalized autocorrelation for a peak to count as modulation.
pub const MODULATION_ACCEPT: f64 = 0.2;
pub const MIN_VALID_LENGTH: usize = 4;

/// Column order of [`StatFeatures::to_vec`] and of feature CSV files.
pub const FEATURE_NAMES: [&str; 17] = [
    "mean_cents",
    "std_cents",
    "range_cents",
    "mean_abs_grad_cents",
    "sign_change_rate_cents",
    "mod_rate_cents",
    "mod_extent_cents",
    "mean_hz",
    "std_hz",
    "range_hz",
    "mean_abs_grad_hz",
    "sign_change_rate_hz",
    "mod_rate_hz",
    "mod_extent_hz",
    "fit_slope",
    "total_variation",
    "valid_fraction",
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("contour has {0} valid frames; at least {MIN_VALID_LENGTH} are needed")]
    TooShort(usize),
    #[error("need at least 2 rows to fit normalization statistics, got {0}")]
    TooFewRows(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Per-domain statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: f64,
    pub std: f64,
    pub range: f64,
    /// Units per frame.
    pub mean_abs_grad: f64,
    /// Fraction of adjacent first-difference pairs with opposite signs.
    pub sign_change_rate: f64,
    /// Hz.
    pub mod_rate: f64,
    pub mod_extent: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatFeatures {
    pub cents: DomainStats,
    pub hz: DomainStats,
    /// Cents per second.
    pub fit_slope: f64,
    /// Cents.
    pub total_variation: f64,
    pub valid_fraction: f64,
}

impl StatFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let d = |s: &DomainStats| {
            [
                s.mean,
                s.std,
                s.range,
                s.mean_abs_grad,
                s.sign_change_rate,
                s.mod_rate,
                s.mod_extent,
            ]
        };
        let mut v = Vec::with_capacity(17);
        v.extend(d(&self.cents));
        v.extend(d(&self.hz));
        v.extend([self.fit_slope, self.total_variation, self.valid_fraction]);
        v
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pop_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Least-squares line `x ≈ intercept + slope·i`, returned as `(slope, intercept)`.
fn line_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let ti = (n - 1.0) / 2.0;
    let xm = mean(x);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let di = i as f64 - ti;
        sxy += di * (v - xm);
        sxx += di * di;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, xm - slope * ti)
}

fn detrend(x: &[f64]) -> Vec<f64> {
    let (slope, icpt) = line_fit(x);
    x.iter()
        .enumerate()
        .map(|(i, &v)| v - (icpt + slope * i as f64))
        .collect()
}

/// Modulation rate (Hz) and extent of `x`, from the first normalized
/// autocorrelation peak of the detrended signal.
pub fn modulation(x: &[f64], frame_period: f64) -> (f64, f64) {
    let y = detrend(x);
    let extent = std::f64::consts::SQRT_2 * pop_std(&y);
    let energy: f64 = y.iter().map(|v| v * v).sum();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if energy <= 1e-24 * scale * scale * y.len() as f64 {
        return (0.0, 0.0);
    }
    let n = y.len();
    let r: Vec<f64> = (0..n)
        .map(|k| y[..n - k].iter().zip(&y[k..]).map(|(a, b)| a * b).sum::<f64>() / energy)
        .collect();
    let nyquist = 0.5 / frame_period;
    for k in 1..n.saturating_sub(1) {
        if r[k] > r[k - 1] && r[k] >= r[k + 1] && r[k] > MODULATION_ACCEPT {
            let denom = r[k - 1] - 2.0 * r[k] + r[k + 1];
            let delta = if denom < 0.0 {
                0.5 * (r[k - 1] - r[k + 1]) / denom
            } else {
                0.0
            };
            let lag = k as f64 + delta;
            return ((1.0 / (lag * frame_period)).min(nyquist), extent);
        }
    }
    (0.0, extent)
}

fn domain_stats(x: &[f64], frame_period: f64) -> DomainStats {
    let n = x.len();
    let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let flips = diffs.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (mod_rate, mod_extent) = modulation(x, frame_period);
    DomainStats {
        mean: mean(x),
        std: pop_std(x),
        range: hi - lo,
        mean_abs_grad: diffs.iter().map(|d| d.abs()).sum::<f64>() / (n - 1) as f64,
        sign_change_rate: flips as f64 / (n - 2) as f64,
        mod_rate,
        mod_extent,
    }
}

pub fn extract_stat_features(c: &Contour, frame_period: f64) -> Result<StatFeatures, FeatureError> {
    let n = c.valid_length;
    if n < MIN_VALID_LENGTH {
        return Err(FeatureError::TooShort(n));
    }
    let cents = c.valid_cents();
    let (slope, _) = line_fit(cents);
    Ok(StatFeatures {
        cents: domain_stats(cents, frame_period),
        hz: domain_stats(c.valid_hz(), frame_period),
        fit_slope: slope / frame_period,
        total_variation: cents.windows(2).map(|w| (w[1] - w[0]).abs()).sum(),
        valid_fraction: n as f64 / CONTOUR_LEN as f64,
    })
}

/// Feature matrix with [`FEATURE_NAMES`] columns, one row per contour.
pub fn feature_matrix(contours: &[Contour], frame_period: f64) -> Result<Matrix, FeatureError> {
    let rows = contours
        .iter()
        .map(|c| extract_stat_features(c, frame_period).map(|f| f.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_rows(FEATURE_NAMES.iter().map(|s| s.to_string()).collect(), &rows)
        .expect("17 values per row"))
}

/// Per-column standardization parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: Vec<f64>,
    /// Divisor per column; 1 for zero-variance columns.
    pub scale: Vec<f64>,
}

impl ZStats {
    pub fn fit(m: &Matrix) -> Result<Self, FeatureError> {
        if m.rows < 2 {
            return Err(FeatureError::TooFewRows(m.rows));
        }
        let mut mean = vec![0.0; m.cols];
        for i in 0..m.rows {
            mean.iter_mut().zip(m.row(i)).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m.rows as f64);
        let mut var = vec![0.0; m.cols];
        for i in 0..m.rows {
            for ((s, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(s, mu)| {
                let sd = (s / m.rows as f64).sqrt();
                if sd <= 1e-12 * mu.abs().max(1.0) {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(ZStats { mean, scale })
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix, FeatureError> {
        if m.cols != self.mean.len() {
            return Err(FeatureError::Dimension(format!(
                "matrix has {} columns, statistics cover {}",
                m.cols,
                self.mean.len()
            )));
        }
        let mut out = m.clone();
        for row in out.data.chunks_mut(m.cols.max(1)) {
            for ((v, mu), sd) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }
}

/// Standardizes columns with `stats` when given, otherwise with statistics
/// fitted on `m` (returned for reuse).
pub fn zscore_block(m: &Matrix, stats: Option<&ZStats>) -> Result<(Matrix, ZStats), FeatureError> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ZStats::fit(m)?,
    };
    Ok((stats.apply(m)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contour(cents: &[f64], hz: &[f64]) -> Contour {
        let n = cents.len();
        let mut vc = vec![0.0; CONTOUR_LEN];
        let mut vh = vec![0.0; CONTOUR_LEN];
        vc[..n].copy_from_slice(cents);
        vh[..n].copy_from_slice(hz);
        Contour {
            recording_id: "r".into(),
            start_frame: 0,
            valid_length: n,
            values_cents: vc,
            values_hz: vh,
        }
    }

    #[test]
    fn constant_contour() {
        let f = extract_stat_features(&contour(&[0.0; 100], &[440.0; 100]), 0.012).unwrap();
        assert_eq!(f.cents.mean_abs_grad, 0.0);
        assert_eq!(f.cents.sign_change_rate, 0.0);
        assert_eq!(f.cents.std, 0.0);
        assert_eq!(f.cents.mod_extent, 0.0);
        assert_eq!(f.cents.mod_rate, 0.0);
        assert_eq!(f.hz.std, 0.0);
        assert_eq!(f.hz.mean, 440.0);
        assert_eq!(f.fit_slope, 0.0);
        assert_eq!(f.valid_fraction, 1.0);
    }

    #[test]
    fn too_short() {
        let c = contour(&[0.0; 3], &[440.0; 3]);
        assert_eq!(extract_stat_features(&c, 0.012), Err(FeatureError::TooShort(3)));
    }

    #[test]
    fn zscore_examples() {
        let m = Matrix::from_rows(
            vec!["x".into(), "c".into()],
            &[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]],
        )
        .unwrap();
        let (z, stats) = zscore_block(&m, None).unwrap();
        let col: Vec<f64> = (0..3).map(|i| z.row(i)[0]).collect();
        for (got, want) in col.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!((0..3).all(|i| z.row(i)[1] == 0.0));
        let (again, _) = zscore_block(&m, Some(&stats)).unwrap();
        assert_eq!(again, z);

        let narrow = Matrix::from_rows(vec!["x".into()], &[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(zscore_block(&narrow, Some(&stats)), Err(FeatureError::Dimension(_))));
        let single = Matrix::from_rows(vec!["x".into()], &[vec![1.0]]).unwrap();
        assert_eq!(zscore_block(&single, None).unwrap_err(), FeatureError::TooFewRows(1));
    }
}
