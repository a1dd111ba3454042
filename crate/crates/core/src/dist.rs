//! Student t and standard normal helpers.
//!
//! The CDF comes from the regularized incomplete beta function; quantiles
//! are refined by Newton steps on that CDF so that `cdf(quantile(p))`
//! round-trips to near machine precision.

use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

fn student(df: f64) -> Result<StudentsT> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::Domain(format!("t distribution needs df > 0, got {df}")));
    }
    StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))
}

pub fn t_cdf(x: f64, df: f64) -> Result<f64> {
    Ok(student(df)?.cdf(x))
}

/// Lower-tail probability `P(T > x)`, accurate in the far right tail.
pub fn t_sf(x: f64, df: f64) -> Result<f64> {
    Ok(student(df)?.cdf(-x))
}

/// `100 p`% percentile of the t distribution with `df` degrees of freedom.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level {p} not in (0, 1)")));
    }
    let t = student(df)?;
    // symmetric: work in the lower half for accuracy
    if p > 0.5 {
        return t_quantile(1.0 - p, df).map(|q| -q);
    }
    let mut x = t.inverse_cdf(p);
    for _ in 0..8 {
        let f = t.cdf(x) - p;
        let dens = t.pdf(x);
        if dens <= 0.0 || !dens.is_finite() {
            break;
        }
        let step = f / dens;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level {p} not in (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}
