//! Wald t-test for the intervention effect.

use serde::{Deserialize, Serialize};

use super::variance::Estimator;
use super::GeeFit;
use crate::dist::t_cdf;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub estimator: Estimator,
    /// `beta2_hat / se(beta2_hat)`.
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Two-sided test of `beta2 = 0` against a t distribution with
/// `n_clusters - 2` degrees of freedom.
pub fn wald_from(
    estimator: Estimator,
    beta2: f64,
    variance: f64,
    n_clusters: usize,
    alpha_level: f64,
) -> Result<WaldTest> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!("{estimator} variance {variance} is not positive")));
    }
    if n_clusters < 3 {
        return Err(Error::invalid("n_clusters", "a t test needs at least 3 clusters"));
    }
    let statistic = beta2 / variance.sqrt();
    let df = (n_clusters - 2) as f64;
    let p_value = (2.0 * t_cdf(-statistic.abs(), df)?).min(1.0);
    Ok(WaldTest {
        estimator,
        statistic,
        df,
        p_value,
        reject: p_value < alpha_level,
    })
}

pub fn wald_t_test(fit: &GeeFit, estimator: Estimator, alpha_level: f64) -> Result<WaldTest> {
    let cov = fit
        .covariances
        .as_ref()
        .ok_or_else(|| Error::Domain("fit has no variance estimates".into()))?;
    wald_from(estimator, fit.beta[1], cov.get(estimator)[1][1], fit.n_clusters, alpha_level)
}
