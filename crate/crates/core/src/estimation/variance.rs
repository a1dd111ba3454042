//! Model-based and sandwich variance estimators for `beta_hat`.
//!
//! All matrices are on the scale of `cov(beta_hat)`. With
//! `B = (sum_i Omega_i)^{-1}`, `Omega_i = D_i' V_i^{-1} D_i`,
//! `U_i = D_i' V_i^{-1} r_i` and `Q_i = Omega_i B`, the multiplicative
//! corrections are `B (sum_i C_i U_i U_i' C_i') B` with `C_i` equal to
//! `I`, `(I - Q_i)^{-1/2}`, `(I - Q_i)^{-1}` or the diagonal Fay-Graubard
//! factor.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2x2 covariance matrix, row-major.
pub type Cov2 = [[f64; 2]; 2];

pub(crate) fn to_cov(m: &Matrix2<f64>) -> Cov2 {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

#[cfg(test)]
pub(crate) fn from_cov(c: &Cov2) -> Matrix2<f64> {
    Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Estimator {
    Mb,
    Bc0,
    Bc1,
    Bc2,
    Avg,
    Bc3,
    Bc4,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::Mb,
        Estimator::Bc0,
        Estimator::Bc1,
        Estimator::Bc2,
        Estimator::Avg,
        Estimator::Bc3,
        Estimator::Bc4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mb => "MB",
            Estimator::Bc0 => "BC0",
            Estimator::Bc1 => "BC1",
            Estimator::Bc2 => "BC2",
            Estimator::Avg => "AVG",
            Estimator::Bc3 => "BC3",
            Estimator::Bc4 => "BC4",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown variance estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariances {
    pub mb: Cov2,
    pub bc0: Cov2,
    pub bc1: Cov2,
    pub bc2: Cov2,
    pub avg: Cov2,
    pub bc3: Cov2,
    pub bc4: Cov2,
}

impl Covariances {
    pub fn get(&self, e: Estimator) -> &Cov2 {
        match e {
            Estimator::Mb => &self.mb,
            Estimator::Bc0 => &self.bc0,
            Estimator::Bc1 => &self.bc1,
            Estimator::Bc2 => &self.bc2,
            Estimator::Avg => &self.avg,
            Estimator::Bc3 => &self.bc3,
            Estimator::Bc4 => &self.bc4,
        }
    }
}

/// Per-cluster pieces of the sandwich.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterScore {
    pub omega: Matrix2<f64>,
    pub u: Vector2<f64>,
}

/// Everything the estimators need from a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct FitInternals {
    pub scores: Vec<ClusterScore>,
    /// Total number of observations.
    pub n_obs: usize,
    /// Fay-Graubard bound on the diagonal of `Q_i`.
    pub bc3_bound: f64,
}

impl FitInternals {
    pub fn bread(&self) -> Result<Matrix2<f64>> {
        let total: Matrix2<f64> = self.scores.iter().map(|s| s.omega).sum();
        total
            .try_inverse()
            .filter(|b| b.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Singular("sum of D' V^-1 D is singular".into()))
    }
}

/// Principal square root of a 2x2 matrix with positive eigenvalues.
pub(crate) fn sqrt2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m.determinant();
    let tr = m.trace();
    if !(det > 0.0) {
        return None;
    }
    let s = det.sqrt();
    let t = tr + 2.0 * s;
    if !(t > 0.0) {
        return None;
    }
    Some((m + Matrix2::identity() * s) / t.sqrt())
}

/// `B (sum_i C_i U_i U_i' C_i') B` for a per-cluster correction `C_i`.
pub fn corrected_sandwich<F>(bread: &Matrix2<f64>, scores: &[ClusterScore], mut correction: F) -> Result<Matrix2<f64>>
where
    F: FnMut(&Matrix2<f64>) -> Option<Matrix2<f64>>,
{
    let mut meat = Matrix2::zeros();
    for (i, s) in scores.iter().enumerate() {
        let q = s.omega * bread;
        let c = correction(&q).ok_or_else(|| Error::Singular(format!("I - Q is singular in cluster {i}")))?;
        let cu = c * s.u;
        meat += cu * cu.transpose();
    }
    Ok(bread * meat * bread)
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// The seven estimators. Fails when some `I - Q_i` is not invertible.
pub fn variance_estimators(internals: &FitInternals) -> Result<Covariances> {
    const P: f64 = 2.0;
    let bread = internals.bread()?;
    let scores = &internals.scores;
    let id = Matrix2::<f64>::identity();

    let bc0 = corrected_sandwich(&bread, scores, |_| Some(id))?;
    let bc1 = corrected_sandwich(&bread, scores, |q| sqrt2(&(id - q)).and_then(|s| s.try_inverse()))?;
    let bc2 = corrected_sandwich(&bread, scores, |q| (id - q).try_inverse())?;
    let bound = internals.bc3_bound;
    let bc3 = corrected_sandwich(&bread, scores, |q| {
        let f = |x: f64| (1.0 - x.min(bound)).powf(-0.5);
        Some(Matrix2::new(f(q[(0, 0)]), 0.0, 0.0, f(q[(1, 1)])))
    })?;

    let se1 = Vector2::new(bc1[(0, 0)].sqrt(), bc1[(1, 1)].sqrt());
    let se2 = Vector2::new(bc2[(0, 0)].sqrt(), bc2[(1, 1)].sqrt());
    let off = 0.5 * (bc1[(0, 1)] + bc2[(0, 1)]);
    let avg = Matrix2::new(
        (0.5 * (se1[0] + se2[0])).powi(2),
        off,
        off,
        (0.5 * (se1[1] + se2[1])).powi(2),
    );

    let n = scores.len() as f64;
    let f = internals.n_obs as f64;
    let c = (f - 1.0) / (f - P) * n / (n - 1.0);
    let delta = (P / (n - P)).min(0.5);
    let meat: Matrix2<f64> = scores.iter().map(|s| s.u * s.u.transpose()).sum();
    let phi = ((bread * meat * c).trace() / P).max(1.0);
    let bc4 = bc0 * c + bread * (delta * phi);

    let out = |m: Matrix2<f64>| to_cov(&symmetrize(m));
    Ok(Covariances {
        mb: out(bread),
        bc0: out(bc0),
        bc1: out(bc1),
        bc2: out(bc2),
        avg: out(avg),
        bc3: out(bc3),
        bc4: out(bc4),
    })
}
