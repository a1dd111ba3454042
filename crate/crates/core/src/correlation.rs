//! Extended nested exchangeable correlation structure for four-level
//! clustered designs.
//!
//! Observations within a cluster are ordered patients-fastest, then
//! providers, then facilities, so the correlation matrix is
//!
//! ```text
//! R = (1-a0) I_{MKL} + (a0-a1) I_{MK} (x) J_L + (a1-a2) I_M (x) J_{KL} + a2 J_{MKL}
//! ```
//!
//! Everything here is closed form: the four eigenvalues, the explicit
//! inverse and the sum of the inverse's entries. Dense matrices are only
//! materialized on request and are guarded by a size cap.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest eigenvalue accepted as positive when checking validity.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Eigenvalues closer than this are reported as repeated.
pub const REPEAT_TOL: f64 = 1e-8;

/// Default cap on the order of densely stored correlation matrices.
pub const DEFAULT_DENSE_CAP: usize = 10_000;

/// The ICC triple: `alpha0` (same provider), `alpha1` (same facility,
/// different provider) and `alpha2` (same cluster, different facility).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    alpha0: f64,
    alpha1: f64,
    alpha2: f64,
}

impl CorrelationParams {
    /// Design-time ICCs; each must lie in `[0, 1)`.
    pub fn new(alpha0: f64, alpha1: f64, alpha2: f64) -> Result<Self> {
        for (name, a) in [("alpha0", alpha0), ("alpha1", alpha1), ("alpha2", alpha2)] {
            if !a.is_finite() || !(0.0..1.0).contains(&a) {
                return Err(Error::invalid(name, format!("{a} is not in [0, 1)")));
            }
        }
        Ok(Self {
            alpha0,
            alpha1,
            alpha2,
        })
    }

    /// ICCs that may be negative or sit on the unit boundary, as produced by
    /// moment estimators or typed in for a validity check. Each component
    /// must lie in `[-1, 1]`; positive definiteness is checked separately.
    pub fn signed(alpha0: f64, alpha1: f64, alpha2: f64) -> Result<Self> {
        for (name, a) in [("alpha0", alpha0), ("alpha1", alpha1), ("alpha2", alpha2)] {
            if !a.is_finite() || !(-1.0..=1.0).contains(&a) {
                return Err(Error::invalid(name, format!("{a} is not in [-1, 1]")));
            }
        }
        Ok(Self {
            alpha0,
            alpha1,
            alpha2,
        })
    }

    pub fn independence() -> Self {
        Self {
            alpha0: 0.0,
            alpha1: 0.0,
            alpha2: 0.0,
        }
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn alpha1(&self) -> f64 {
        self.alpha1
    }

    pub fn alpha2(&self) -> f64 {
        self.alpha2
    }

    pub fn alphas(&self) -> [f64; 3] {
        [self.alpha0, self.alpha1, self.alpha2]
    }
}

/// Balanced block sizes: `m` facilities per cluster, `k` providers per
/// facility, `l` patients per provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockDims {
    m: usize,
    k: usize,
    l: usize,
}

impl BlockDims {
    pub fn new(m: usize, k: usize, l: usize) -> Result<Self> {
        for (name, v) in [("M", m), ("K", k), ("L", l)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(Self { m, k, l })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Observations per cluster, `M*K*L`.
    pub fn size(&self) -> usize {
        self.m * self.k * self.l
    }
}

/// The four distinct eigenvalues of `R` with their multiplicities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSpectrum {
    pub lambda: [f64; 4],
    pub multiplicity: [usize; 4],
}

impl EigenSpectrum {
    /// `lambda_r` for randomization level `r` in `1..=4`.
    pub fn level(&self, r: usize) -> f64 {
        self.lambda[r - 1]
    }

    pub fn largest(&self) -> f64 {
        self.lambda[3]
    }

    /// Smallest eigenvalue among those with positive multiplicity.
    pub fn min_present(&self) -> f64 {
        self.lambda
            .iter()
            .zip(self.multiplicity)
            .filter(|(_, m)| *m > 0)
            .map(|(l, _)| *l)
            .fold(f64::INFINITY, f64::min)
    }

    /// Pairs `(i, j)` (1-based, `i < j`) of present eigenvalues that coincide.
    pub fn repeated(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                if self.multiplicity[i] > 0
                    && self.multiplicity[j] > 0
                    && (self.lambda[i] - self.lambda[j]).abs() <= REPEAT_TOL
                {
                    out.push((i + 1, j + 1));
                }
            }
        }
        out
    }

    /// Number of distinct eigenvalues among those present.
    pub fn distinct_count(&self) -> usize {
        let mut vals: Vec<f64> = self
            .lambda
            .iter()
            .zip(self.multiplicity)
            .filter(|(_, m)| *m > 0)
            .map(|(l, _)| *l)
            .collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup_by(|a, b| (*a - *b).abs() <= REPEAT_TOL);
        vals.len()
    }
}

pub fn eigen_spectrum(params: &CorrelationParams, dims: &BlockDims) -> EigenSpectrum {
    spectrum_of(params.alphas(), dims)
}

pub(crate) fn spectrum_of(alphas: [f64; 3], dims: &BlockDims) -> EigenSpectrum {
    let [a0, a1, a2] = alphas;
    let (m, k, l) = (dims.m as f64, dims.k as f64, dims.l as f64);
    let lambda1 = 1.0 - a0;
    let lambda2 = 1.0 + (l - 1.0) * a0 - l * a1;
    let lambda3 = 1.0 + (l - 1.0) * a0 + l * (k - 1.0) * a1 - l * k * a2;
    let lambda4 = 1.0 + (l - 1.0) * a0 + l * (k - 1.0) * a1 + l * k * (m - 1.0) * a2;
    EigenSpectrum {
        lambda: [lambda1, lambda2, lambda3, lambda4],
        multiplicity: [
            dims.m * dims.k * (dims.l - 1),
            dims.m * (dims.k - 1),
            dims.m - 1,
            1,
        ],
    }
}

/// Outcome of a validity check, with the spectrum it was based on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    pub valid: bool,
    pub spectrum: EigenSpectrum,
    /// 1-based indices of eigenvalues at or below [`EIGEN_FLOOR`].
    pub violated: Vec<usize>,
    /// Coinciding eigenvalue pairs; informational only.
    pub repeated: Vec<(usize, usize)>,
}

impl Validity {
    pub fn message(&self) -> String {
        if self.valid {
            return "valid".to_string();
        }
        self.violated
            .iter()
            .map(|&i| format!("lambda{} = {:.6} <= 0", i, self.spectrum.lambda[i - 1]))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn into_result(self) -> Result<EigenSpectrum> {
        if self.valid {
            Ok(self.spectrum)
        } else {
            Err(Error::InvalidCorrelation {
                message: self.message(),
                violated: self.violated,
            })
        }
    }
}

pub fn is_valid(params: &CorrelationParams, dims: &BlockDims) -> Validity {
    let spectrum = eigen_spectrum(params, dims);
    let violated: Vec<usize> = (0..4)
        .filter(|&i| spectrum.multiplicity[i] > 0 && !(spectrum.lambda[i] > EIGEN_FLOOR))
        .map(|i| i + 1)
        .collect();
    Validity {
        valid: violated.is_empty(),
        repeated: spectrum.repeated(),
        violated,
        spectrum,
    }
}

/// Convenience wrapper returning the spectrum or an `InvalidCorrelation` error.
pub fn require_valid(params: &CorrelationParams, dims: &BlockDims) -> Result<EigenSpectrum> {
    is_valid(params, dims).into_result()
}

fn check_cap(dims: &BlockDims, cap: usize) -> Result<usize> {
    let n = dims.size();
    if n > cap {
        return Err(Error::CapExceeded { order: n, cap });
    }
    Ok(n)
}

/// Fills an `n x n` matrix from the coefficients of `I`, `I_{MK} (x) J_L`,
/// `I_M (x) J_{KL}` and `J_{MKL}`.
fn kronecker_combination(dims: &BlockDims, coef: [f64; 4]) -> DMatrix<f64> {
    let n = dims.size();
    let provider = dims.l;
    let facility = dims.k * dims.l;
    DMatrix::from_fn(n, n, |i, j| {
        let mut v = coef[3];
        if i / facility == j / facility {
            v += coef[2];
            if i / provider == j / provider {
                v += coef[1];
            }
        }
        if i == j {
            v += coef[0];
        }
        v
    })
}

/// Dense `R` with the default size cap.
pub fn build_matrix(params: &CorrelationParams, dims: &BlockDims) -> Result<DMatrix<f64>> {
    build_matrix_capped(params, dims, DEFAULT_DENSE_CAP)
}

pub fn build_matrix_capped(
    params: &CorrelationParams,
    dims: &BlockDims,
    cap: usize,
) -> Result<DMatrix<f64>> {
    check_cap(dims, cap)?;
    let [a0, a1, a2] = params.alphas();
    Ok(kronecker_combination(
        dims,
        [1.0 - a0, a0 - a1, a1 - a2, a2],
    ))
}

/// Dense closed-form `R^{-1}`; errors when `R` is not positive definite.
pub fn inverse_matrix(params: &CorrelationParams, dims: &BlockDims) -> Result<DMatrix<f64>> {
    inverse_matrix_capped(params, dims, DEFAULT_DENSE_CAP)
}

pub fn inverse_matrix_capped(
    params: &CorrelationParams,
    dims: &BlockDims,
    cap: usize,
) -> Result<DMatrix<f64>> {
    let s = require_valid(params, dims)?;
    check_cap(dims, cap)?;
    Ok(kronecker_combination(dims, inverse_coefficients(params, &s)))
}

/// Coefficients of `I`, `I_{MK} (x) J_L`, `I_M (x) J_{KL}`, `J_{MKL}` in `R^{-1}`.
pub(crate) fn inverse_coefficients(params: &CorrelationParams, s: &EigenSpectrum) -> [f64; 4] {
    let [a0, a1, a2] = params.alphas();
    let [l1, l2, l3, l4] = s.lambda;
    [
        1.0 / l1,
        -(a0 - a1) / (l1 * l2),
        -(a1 - a2) / (l2 * l3),
        -a2 / (l3 * l4),
    ]
}

/// `1' R^{-1} 1 = MKL / lambda4`.
pub fn inverse_quadratic_sum(params: &CorrelationParams, dims: &BlockDims) -> Result<f64> {
    let s = require_valid(params, dims)?;
    Ok(dims.size() as f64 / s.largest())
}
