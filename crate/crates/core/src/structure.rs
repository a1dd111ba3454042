//! Cluster shapes with possibly unequal panel sizes, and an `O(n)` solver
//! for the extended nested exchangeable correlation matrix on any shape.
//!
//! `R = a I + c sum_b 1_b 1_b' + d sum_f 1_f 1_f' + e 1 1'` with
//! `a = 1 - a0`, `c = a0 - a1`, `d = a1 - a2`, `e = a2`, where `b` runs over
//! providers and `f` over facilities. The inverse is built one level at a
//! time: compound-symmetric provider blocks first, then a rank-one update
//! per facility, then one for the whole cluster. On balanced shapes the
//! pivots reduce to `lambda1`, `lambda2`, `lambda3 / lambda2` and
//! `lambda4 / lambda3`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::correlation::{spectrum_of, BlockDims, EIGEN_FLOOR};
use crate::error::{Error, Result};

/// Panel sizes of one cluster: `facilities[j][k]` is the number of patients
/// seen by provider `k` of facility `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterShape {
    facilities: Vec<Vec<usize>>,
}

impl ClusterShape {
    pub fn new(facilities: Vec<Vec<usize>>) -> Result<Self> {
        if facilities.is_empty() {
            return Err(Error::invalid("shape", "a cluster needs at least one facility"));
        }
        if facilities.iter().any(|f| f.is_empty()) {
            return Err(Error::invalid("shape", "every facility needs at least one provider"));
        }
        if facilities.iter().flatten().any(|&n| n == 0) {
            return Err(Error::invalid("shape", "every provider needs at least one patient"));
        }
        Ok(Self { facilities })
    }

    pub fn balanced(dims: &BlockDims) -> Self {
        Self {
            facilities: vec![vec![dims.l(); dims.k()]; dims.m()],
        }
    }

    pub fn facilities(&self) -> &[Vec<usize>] {
        &self.facilities
    }

    pub fn n_obs(&self) -> usize {
        self.facilities.iter().flatten().sum()
    }

    pub fn n_facilities(&self) -> usize {
        self.facilities.len()
    }

    pub fn n_providers(&self) -> usize {
        self.facilities.iter().map(Vec::len).sum()
    }

    /// `Some(dims)` when every facility has the same number of providers and
    /// every provider the same panel size.
    pub fn as_balanced(&self) -> Option<BlockDims> {
        let k = self.facilities[0].len();
        let l = self.facilities[0][0];
        let balanced = self
            .facilities
            .iter()
            .all(|f| f.len() == k && f.iter().all(|&n| n == l));
        balanced.then(|| BlockDims::new(self.facilities.len(), k, l).expect("nonzero sizes"))
    }

    /// `(facility, provider, patient)` for each observation, in storage order.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.facilities.iter().enumerate().flat_map(|(j, f)| {
            f.iter()
                .enumerate()
                .flat_map(move |(k, &n)| (0..n).map(move |l| (j, k, l)))
        })
    }

    /// Number of within-cluster pairs in each class: same provider, same
    /// facility but different provider, different facility.
    pub fn pair_counts(&self) -> [f64; 3] {
        let ones = vec![1.0; self.n_obs()];
        self.pair_sums(&ones)
    }

    /// Sums of `e_i e_j` over unordered pairs in each of the three classes.
    pub fn pair_sums(&self, e: &[f64]) -> [f64; 3] {
        debug_assert_eq!(e.len(), self.n_obs());
        let mut same_provider = 0.0;
        let mut within_facility = 0.0;
        let mut total_sq_facility = 0.0;
        let mut total = 0.0;
        let mut pos = 0;
        for f in &self.facilities {
            let mut fac_sum = 0.0;
            let mut sq_provider = 0.0;
            for &n in f {
                let block = &e[pos..pos + n];
                pos += n;
                let s: f64 = block.iter().sum();
                let ss: f64 = block.iter().map(|v| v * v).sum();
                same_provider += 0.5 * (s * s - ss);
                sq_provider += s * s;
                fac_sum += s;
            }
            within_facility += 0.5 * (fac_sum * fac_sum - sq_provider);
            total_sq_facility += fac_sum * fac_sum;
            total += fac_sum;
        }
        [
            same_provider,
            within_facility,
            0.5 * (total * total - total_sq_facility),
        ]
    }

    /// Dense correlation matrix for this shape.
    pub fn dense_correlation(&self, alphas: [f64; 3]) -> DMatrix<f64> {
        let idx: Vec<(usize, usize, usize)> = self.indices().collect();
        let n = idx.len();
        DMatrix::from_fn(n, n, |i, j| {
            let (fi, pi, _) = idx[i];
            let (fj, pj, _) = idx[j];
            if i == j {
                1.0
            } else if fi == fj && pi == pj {
                alphas[0]
            } else if fi == fj {
                alphas[1]
            } else {
                alphas[2]
            }
        })
    }
}

#[derive(Debug, Clone)]
struct ProviderBlock {
    start: usize,
    len: usize,
    facility: usize,
    /// `c / (a + c n_b)`
    shrink: f64,
    /// Entry of `R_1^{-1} 1` on this block, `1 / (a + c n_b)`.
    u: f64,
    /// Entry of `R_2^{-1} 1` on this block.
    w: f64,
}

/// Structured inverse of the correlation matrix of one cluster.
#[derive(Debug, Clone)]
pub struct NestedCorrelation {
    n: usize,
    a: f64,
    providers: Vec<ProviderBlock>,
    /// `d / (1 + d s_f)` per facility.
    facility_shrink: Vec<f64>,
    /// `e / (1 + e T)`.
    cluster_shrink: f64,
    quad_sum: f64,
    pivots: Vec<f64>,
}

impl NestedCorrelation {
    /// Fails with `InvalidCorrelation` when `R` is not positive definite on
    /// this shape.
    pub fn new(alphas: [f64; 3], shape: &ClusterShape) -> Result<Self> {
        let [a0, a1, a2] = alphas;
        let a = 1.0 - a0;
        let c = a0 - a1;
        let d = a1 - a2;
        let e = a2;
        let mut pivots = vec![a];
        let mut violated = Vec::new();
        if !(a > EIGEN_FLOOR) {
            violated.push(1);
        }

        let mut providers = Vec::with_capacity(shape.n_providers());
        let mut facility_shrink = Vec::with_capacity(shape.n_facilities());
        let mut t_total = 0.0;
        let mut start = 0;
        for (j, f) in shape.facilities.iter().enumerate() {
            let first = providers.len();
            let mut s_f = 0.0;
            for &n in f {
                let piv = a + c * n as f64;
                pivots.push(piv);
                if !(piv > EIGEN_FLOOR) && !violated.contains(&2) {
                    violated.push(2);
                }
                let u = 1.0 / piv;
                s_f += n as f64 * u;
                providers.push(ProviderBlock {
                    start,
                    len: n,
                    facility: j,
                    shrink: c / piv,
                    u,
                    w: 0.0,
                });
                start += n;
            }
            let piv = 1.0 + d * s_f;
            pivots.push(piv);
            if !(piv > EIGEN_FLOOR) && !violated.contains(&3) {
                violated.push(3);
            }
            facility_shrink.push(d / piv);
            for p in &mut providers[first..] {
                p.w = p.u / piv;
            }
            t_total += s_f / piv;
        }
        let piv = 1.0 + e * t_total;
        pivots.push(piv);
        if !(piv > EIGEN_FLOOR) {
            violated.push(4);
        }
        if !violated.is_empty() {
            // A failed pivot only proves that an intermediate matrix is
            // indefinite; settle definiteness of R itself.
            let violated = match shape.as_balanced() {
                Some(dims) => {
                    let s = spectrum_of(alphas, &dims);
                    (0..4)
                        .filter(|&i| s.multiplicity[i] > 0 && !(s.lambda[i] > EIGEN_FLOOR))
                        .map(|i| i + 1)
                        .collect()
                }
                None if reduced_positive_definite(alphas, shape) => Vec::new(),
                None => violated,
            };
            if !violated.is_empty() {
                return Err(Error::InvalidCorrelation {
                    message: format!(
                        "alpha = ({a0}, {a1}, {a2}) is not positive definite on this cluster (levels {violated:?})"
                    ),
                    violated,
                });
            }
            if pivots.iter().any(|p| p.abs() <= EIGEN_FLOOR) {
                return Err(Error::Singular(format!(
                    "alpha = ({a0}, {a1}, {a2}) gives a zero elimination pivot on this cluster"
                )));
            }
        }
        Ok(Self {
            n: start,
            a,
            providers,
            facility_shrink,
            cluster_shrink: e / piv,
            quad_sum: t_total / piv,
            pivots,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// `1' R^{-1} 1`.
    pub fn quad_sum(&self) -> f64 {
        self.quad_sum
    }

    /// Elimination pivots; all positive on construction.
    pub fn pivots(&self) -> &[f64] {
        &self.pivots
    }

    /// `R^{-1} x`.
    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut out = vec![0.0; self.n];
        let mut fac_u = vec![0.0; self.facility_shrink.len()];
        let mut cluster_w = 0.0;
        for p in &self.providers {
            let block = &x[p.start..p.start + p.len];
            let s: f64 = block.iter().sum();
            fac_u[p.facility] += p.u * s;
            cluster_w += p.w * s;
            for (o, v) in out[p.start..p.start + p.len].iter_mut().zip(block) {
                *o = (v - p.shrink * s) / self.a;
            }
        }
        for p in &self.providers {
            let shift = self.facility_shrink[p.facility] * p.u * fac_u[p.facility]
                + self.cluster_shrink * p.w * cluster_w;
            for o in &mut out[p.start..p.start + p.len] {
                *o -= shift;
            }
        }
        out
    }
}

/// Positive definiteness of `R` through its action on the within-provider
/// contrasts (eigenvalue `a`) and on vectors constant within providers.
fn reduced_positive_definite(alphas: [f64; 3], shape: &ClusterShape) -> bool {
    let [a0, a1, a2] = alphas;
    let sizes: Vec<(usize, f64)> = shape
        .facilities
        .iter()
        .enumerate()
        .flat_map(|(j, f)| f.iter().map(move |&n| (j, n as f64)))
        .collect();
    if sizes.iter().any(|&(_, n)| n > 1.0) && !(1.0 - a0 > EIGEN_FLOOR) {
        return false;
    }
    // quadratic form in w_b = n_b z_b
    let p = sizes.len();
    let q = DMatrix::from_fn(p, p, |r, c| {
        let (fr, nr) = sizes[r];
        let (fc, _) = sizes[c];
        let mut v = a2 + if fr == fc { a1 - a2 } else { 0.0 };
        if r == c {
            v += (1.0 - a0) / nr + a0 - a1;
        }
        v
    });
    q.cholesky().is_some_and(|ch| {
        let l = ch.l();
        (0..p).all(|i| l[(i, i)] * l[(i, i)] > EIGEN_FLOOR)
    })
}
