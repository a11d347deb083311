//! Correlation statistics: z-scores, Pearson r with an exact Student-t
//! p-value, and least-squares regression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in input")]
    NonFinite,
}

/// Equal-length finite (x, y) series.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PairedSeries {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, StatsError> {
        if xs.len() != ys.len() {
            return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(Self { xs, ys })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(v - mean) / sd` with the population standard deviation.
pub fn zscore_normalize(values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewPoints {
            needed: 2,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    let sd = var.sqrt();
    if sd == 0.0 || sd <= f64::EPSILON * m.abs() {
        return Err(StatsError::DegenerateInput("standard deviation is zero"));
    }
    Ok(values.iter().map(|v| (v - m) / sd).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value for r = 0 under Student's t with n - 2 degrees of
    /// freedom.
    pub p: f64,
    pub n: usize,
}

/// Centered cross and auto sums of squares.
fn centered_moments(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter().zip(ys).fold((0.0, 0.0, 0.0), |(sxy, sxx, syy), (x, y)| {
        let dx = x - mx;
        let dy = y - my;
        (sxy + dx * dy, sxx + dx * dx, syy + dy * dy)
    })
}

pub fn pearson(pairs: &PairedSeries) -> Result<Correlation, StatsError> {
    let n = pairs.len();
    if n < 3 {
        return Err(StatsError::TooFewPoints { needed: 3, got: n });
    }
    let (sxy, sxx, syy) = centered_moments(&pairs.xs, &pairs.ys);
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::DegenerateInput("constant series"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        p: correlation_p_value(r, n),
        n,
    })
}

/// Two-sided p-value of a Pearson r over `n` points.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus_r2 = (1.0 - r * r).max(0.0);
    if one_minus_r2 == 0.0 {
        return 0.0;
    }
    // P(|T| >= |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2), and
    // df / (df + t^2) simplifies to 1 - r^2.
    regularized_incomplete_beta(one_minus_r2, df / 2.0, 0.5).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares fit of y on x.
pub fn linear_regression(pairs: &PairedSeries) -> Result<Regression, StatsError> {
    let n = pairs.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints { needed: 2, got: n });
    }
    let (sxy, sxx, _) = centered_moments(&pairs.xs, &pairs.ys);
    if sxx == 0.0 {
        return Err(StatsError::DegenerateInput("constant x series"));
    }
    let slope = sxy / sxx;
    Ok(Regression {
        slope,
        intercept: mean(&pairs.ys) - slope * mean(&pairs.xs),
    })
}

/// Percentile `q` in [0, 1] of `values` by linear interpolation between
/// closest ranks. `None` for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// ln Γ(z) for z > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(z: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

const BETA_CF_TOLERANCE: f64 = 1e-14;
const BETA_CF_MAX_ITER: usize = 300;

/// Regularized incomplete beta I_x(a, b), by modified Lentz evaluation of the
/// continued fraction on whichever side of the mean converges fast.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_CF_TOLERANCE {
            break;
        }
    }
    h
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}
