//! Small statistics kit: quantiles, Monte Carlo level errors, log-log rate fits and a
//! one-sample Kolmogorov-Smirnov test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Levels whose relative standard error exceeds this are too noisy to fit.
pub const MAX_RELATIVE_STDERR: f64 = 0.3;

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sample_std(values: &[f64]) -> f64 {
    mean_stderr(values).1 * (values.len() as f64).sqrt()
}

/// One row of a convergence table: the root-mean-square error at `value` (a step size, mode
/// count or lag) with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelError {
    pub level: usize,
    pub value: f64,
    pub error: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl LevelError {
    /// RMS of per-sample squared errors; the standard error follows by the delta method.
    pub fn from_squared(level: usize, value: f64, squared: &[f64]) -> Self {
        let (mean, se) = mean_stderr(squared);
        let error = mean.sqrt();
        let stderr = if error > 0.0 { se / (2.0 * error) } else { 0.0 };
        LevelError {
            level,
            value,
            error,
            stderr,
            samples: squared.len(),
        }
    }

    pub fn relative_stderr(&self) -> f64 {
        self.stderr / self.error
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Weighted least squares for `y = a + b x` with known standard deviations `sigma`.
pub fn weighted_line(x: &[f64], y: &[f64], sigma: &[f64]) -> LineFit {
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    LineFit {
        slope,
        intercept: ym - slope * xm,
        slope_se: (1.0 / sxx).sqrt(),
    }
}

/// Ordinary least squares with the residual-based standard error of the slope.
pub fn ordinary_line(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = x.iter().zip(y).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let slope_se = if x.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    LineFit {
        slope,
        intercept,
        slope_se,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Why no slope was reported.
    pub refused: Option<String>,
}

impl RateFit {
    fn refuse(reason: String) -> Self {
        RateFit {
            slope: None,
            ci_low: None,
            ci_high: None,
            refused: Some(reason),
        }
    }

    pub fn ci_width(&self) -> Option<f64> {
        Some(self.ci_high? - self.ci_low?)
    }
}

/// Slope of `log error` against `log x` with a 95% interval.
///
/// Level uncertainties enter through `stderr / error`, the standard deviation of `log error`.
/// When every level is deterministic (zero standard error) the fit is ordinary least squares with
/// a Student-t interval from the residuals.
pub fn fit_rate(levels: &[LevelError], x: &[f64]) -> Result<RateFit> {
    if levels.len() < 3 {
        return Err(Error::invalid("levels", format!("a rate fit needs at least 3 levels, got {}", levels.len())));
    }
    if x.len() != levels.len() {
        return Err(Error::DimensionMismatch("abscissae and levels differ in length".into()));
    }
    for l in levels {
        if !(l.error > 0.0) || !l.error.is_finite() {
            return Ok(RateFit::refuse(format!("level {} has error {}", l.level, l.error)));
        }
        if l.relative_stderr() > MAX_RELATIVE_STDERR {
            return Ok(RateFit::refuse(format!(
                "level {} has relative standard error {:.3} above {MAX_RELATIVE_STDERR}",
                l.level,
                l.relative_stderr()
            )));
        }
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = levels.iter().map(|l| l.error.ln()).collect();
    let sig: Vec<f64> = levels.iter().map(|l| l.relative_stderr()).collect();
    let (fit, half) = if sig.iter().all(|&s| s > 0.0) {
        let f = weighted_line(&lx, &ly, &sig);
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.975);
        (f, z * f.slope_se)
    } else {
        let f = ordinary_line(&lx, &ly);
        let t = StudentsT::new(0.0, 1.0, (levels.len() - 2) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        (f, t * f.slope_se)
    };
    Ok(RateFit {
        slope: Some(fit.slope),
        ci_low: Some(fit.slope - half),
        ci_high: Some(fit.slope + half),
        refused: None,
    })
}

/// Largest distance between the empirical distribution of `samples` and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the Kolmogorov statistic `d` for sample size `n`, with Stephens'
/// finite-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let t = d * (sn + 0.12 + 0.11 / sn);
    if t < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}
