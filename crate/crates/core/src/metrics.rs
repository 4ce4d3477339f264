//! Agreement and sensitivity statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` targets rated by `k` raters, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsTable {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl RatingsTable {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::ShapeMismatch {
                what: "ratings row",
                expected: k,
                got: bad.len(),
            });
        }
        Self::new(n, k, rows.concat())
    }

    /// Builds a table from one series per rater.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let k = cols.len();
        let n = cols.first().map_or(0, Vec::len);
        if let Some(bad) = cols.iter().find(|c| c.len() != n) {
            return Err(Error::ShapeMismatch {
                what: "ratings column",
                expected: n,
                got: bad.len(),
            });
        }
        let values = (0..n)
            .flat_map(|i| cols.iter().map(move |c| c[i]))
            .collect();
        Self::new(n, k, values)
    }

    fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 || k < 2 {
            return Err(Error::InvalidArgument(format!(
                "ratings table needs at least 2 targets and 2 raters, got {n}x{k}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ratings"));
        }
        Ok(Self { n, k, values })
    }

    pub fn targets(&self) -> usize {
        self.n
    }

    pub fn raters(&self) -> usize {
        self.k
    }

    pub fn get(&self, target: usize, rater: usize) -> f64 {
        self.values[target * self.k + rater]
    }
}

/// Two-way random effects, absolute agreement, single measure.
pub fn icc_2_1(table: &RatingsTable) -> Result<f64> {
    let (n, k) = (table.n, table.k);
    let (nf, kf) = (n as f64, k as f64);
    let grand = table.values.iter().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|j| table.get(i, j)).sum::<f64>() / kf)
        .collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| table.get(i, j)).sum::<f64>() / nf)
        .collect();

    let ss_total: f64 = table.values.iter().map(|v| (v - grand).powi(2)).sum();
    if ss_total <= 0.0 {
        return Err(Error::Degenerate(
            "degenerate ratings: zero total variance".into(),
        ));
    }
    let ss_rows = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);

    let ms_r = ss_rows / (nf - 1.0);
    let ms_c = ss_cols / (kf - 1.0);
    let ms_e = ss_err / ((nf - 1.0) * (kf - 1.0));
    let denom = ms_r + (kf - 1.0) * ms_e + kf / nf * (ms_c - ms_e);
    if !(denom > 0.0) {
        return Err(Error::Degenerate(
            "degenerate ratings: no between-target variance".into(),
        ));
    }
    Ok((ms_r - ms_e) / denom)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            what: "paired series",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 paired values".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("series"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered_sums(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .fold((0.0, 0.0, 0.0), |(sxx, syy, sxy), (a, b)| {
            let (dx, dy) = (a - mx, b - my);
            (sxx + dx * dx, syy + dy * dy, sxy + dx * dy)
        })
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (sxx, syy, sxy) = centered_sums(x, y);
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("zero variance series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// How the coefficient of determination is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RSquaredKind {
    /// Least-squares line of measured on induced.
    #[default]
    Ols,
    /// Residuals taken against `measured = induced`; can be negative.
    IdentityLine,
}

/// `1 - SS_res / SS_tot` of measured against induced.
pub fn r_squared(induced: &[f64], measured: &[f64]) -> Result<f64> {
    r_squared_with(induced, measured, RSquaredKind::Ols)
}

pub fn r_squared_with(induced: &[f64], measured: &[f64], kind: RSquaredKind) -> Result<f64> {
    check_pair(induced, measured)?;
    let (sxx, syy, sxy) = centered_sums(induced, measured);
    if sxx <= 0.0 {
        return Err(Error::Degenerate("induced series has zero variance".into()));
    }
    match kind {
        RSquaredKind::Ols => {
            if syy <= 0.0 {
                return Ok(0.0);
            }
            let slope = sxy / sxx;
            let intercept = mean(measured) - slope * mean(induced);
            let ss_res: f64 = induced
                .iter()
                .zip(measured)
                .map(|(x, y)| (y - intercept - slope * x).powi(2))
                .sum();
            Ok(1.0 - ss_res / syy)
        }
        RSquaredKind::IdentityLine => {
            if syy <= 0.0 {
                return Err(Error::Degenerate(
                    "measured series has zero variance".into(),
                ));
            }
            let ss_res: f64 = induced
                .iter()
                .zip(measured)
                .map(|(x, y)| (y - x).powi(2))
                .sum();
            Ok(1.0 - ss_res / syy)
        }
    }
}
