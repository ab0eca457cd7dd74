//! Two-sample t-tests for comparing runs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample {which} has {n} values, need at least 2")]
    TooSmall { which: char, n: usize },
    #[error("sample {0} contains a non-finite value")]
    NonFinite(char),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal variances.
    #[default]
    Welch,
    /// Pooled variance.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub kind: TTestKind,
    pub t: f64,
    pub df: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Two-sided, in (0, 1].
    pub p_value: f64,
    pub significant: bool,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn t_test(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTestResult, StatsError> {
    for (which, s) in [('a', a), ('b', b)] {
        if s.len() < 2 {
            return Err(StatsError::TooSmall { which, n: s.len() });
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite(which));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let diff = ma - mb;
    let (se2, df) = match kind {
        TTestKind::Student => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (sp2 * (1.0 / na + 1.0 / nb), df)
        }
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let s = qa + qb;
            let denom = qa * qa / (na - 1.0) + qb * qb / (nb - 1.0);
            let df = if denom > 0.0 {
                s * s / denom
            } else {
                na + nb - 2.0
            };
            (s, df)
        }
    };
    let (t, p) = if se2 <= 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, f64::MIN_POSITIVE)
        }
    } else {
        let t = diff / se2.sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        let p = (2.0 * dist.sf(t.abs())).clamp(f64::MIN_POSITIVE, 1.0);
        (t, p)
    };
    Ok(TTestResult {
        kind,
        t,
        df,
        mean_a: ma,
        mean_b: mb,
        p_value: p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}
