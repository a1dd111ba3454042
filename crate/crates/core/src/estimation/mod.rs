//! Marginal model fitting by GEE, with the correlation parameters of the
//! extended nested exchangeable structure estimated by matrix-adjusted
//! estimating equations (MAEE).
//!
//! The mean model is `g(mu_ij) = beta1 + beta2 * treat_ij`. Each iteration
//! takes one Fisher scoring step for `beta`, refreshes `phi` from Pearson
//! residuals (Gaussian only) and, for the nested working structure, sets
//! each `alpha` to the pooled mean of cross-products of standardized
//! residuals in its pair class. Since `E[r r'] ~ (I - H) V`, the products
//! pair the leverage-adjusted residual `r~ = (I - H)^{-1} r`, computed as
//! `r + D (I - B Omega)^{-1} B U`, with the raw residual, symmetrized.

pub mod variance;
pub mod wald;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::datagen::{ClusterData, Dataset};
use crate::design::{Link, VarianceFamily};
use crate::error::{Error, Result};
use crate::structure::{ClusterShape, NestedCorrelation};

pub use variance::{
    corrected_sandwich, variance_estimators, ClusterScore, Cov2, Covariances, Estimator, FitInternals,
};
pub use wald::{wald_from, wald_t_test, WaldTest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkingCorrelation {
    Independence,
    /// Extended nested exchangeable, `alpha` estimated by MAEE.
    ExtendedNested,
    /// Extended nested exchangeable held at known values.
    Fixed { alphas: [f64; 3] },
}

impl WorkingCorrelation {
    pub fn label(&self) -> &'static str {
        match self {
            WorkingCorrelation::Independence => "independence",
            WorkingCorrelation::ExtendedNested => "ene",
            WorkingCorrelation::Fixed { .. } => "fixed",
        }
    }
}

impl std::str::FromStr for WorkingCorrelation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(WorkingCorrelation::Independence),
            "ene" | "maee" | "extended_nested" | "nested" => Ok(WorkingCorrelation::ExtendedNested),
            other => Err(Error::Parse(format!("unknown working correlation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub link: Link,
    pub family: VarianceFamily,
    pub max_iter: usize,
    /// Convergence threshold on the largest change in `(beta, alpha)`.
    pub tol: f64,
    /// After convergence, iterate until changes fall below this.
    pub polish_tol: f64,
    pub polish_iter: usize,
    pub alpha_start: [f64; 3],
    /// Step halvings allowed when an `alpha` update leaves the positive
    /// definite region.
    pub max_halvings: u32,
    pub bc3_bound: f64,
}

impl FitOptions {
    pub fn new(link: Link, family: VarianceFamily) -> Self {
        Self {
            link,
            family,
            max_iter: 200,
            tol: 1e-6,
            polish_tol: 1e-10,
            polish_iter: 50,
            alpha_start: [0.01, 0.005, 0.001],
            max_halvings: 10,
            bc3_bound: 0.75,
        }
    }

    pub fn binary_logit() -> Self {
        Self::new(Link::Logit, VarianceFamily::Binomial)
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        Self::binary_logit()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIter,
    /// No halving of an `alpha` update stayed positive definite.
    AlphaInvalid,
    Singular,
    /// Fitted means left the domain of the variance function.
    Diverged,
    /// Some `I - Q_i` could not be inverted for the corrected sandwich.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeFit {
    pub working: WorkingCorrelation,
    pub beta: [f64; 2],
    pub alpha: Option<[f64; 3]>,
    pub phi: f64,
    /// `(1 / N) sum_i D_i' V_i^{-1} D_i`.
    pub sigma1: Option<Cov2>,
    pub covariances: Option<Covariances>,
    pub iterations: usize,
    pub status: FitStatus,
    pub n_clusters: usize,
    pub n_obs: usize,
    /// Largest scaled estimating-equation residual at the returned values.
    pub ee_residual: f64,
}

impl GeeFit {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::Converged
    }
}

/// Per-cluster quantities at the current parameters. `d0 = mu'(eta) / a`
/// and `rs = r / a` with `a = sqrt(phi * nu)`.
struct Piece {
    d0: Vec<f64>,
    rs: Vec<f64>,
    score: ClusterScore,
}

struct Engine<'a> {
    clusters: &'a [ClusterData],
    opts: &'a FitOptions,
    shapes: Vec<&'a ClusterShape>,
    shape_of: Vec<usize>,
    counts: [f64; 3],
    n_obs: usize,
}

impl<'a> Engine<'a> {
    fn new(data: &'a Dataset, opts: &'a FitOptions) -> Result<Self> {
        let clusters = &data.clusters[..];
        if clusters.len() < 3 {
            return Err(Error::invalid("n_clusters", "GEE needs at least 3 clusters"));
        }
        if opts.family == VarianceFamily::Custom {
            return Err(Error::invalid("family", "fitting needs a variance function"));
        }
        let mut shapes: Vec<&ClusterShape> = Vec::new();
        let mut shape_of = Vec::with_capacity(clusters.len());
        let mut counts = [0.0; 3];
        for (i, c) in clusters.iter().enumerate() {
            if c.y.len() != c.shape.n_obs() || c.treat.len() != c.y.len() {
                return Err(Error::invalid("dataset", format!("cluster {i} has inconsistent lengths")));
            }
            for &y in &c.y {
                let ok = y.is_finite()
                    && match opts.family {
                        VarianceFamily::Binomial => (0.0..=1.0).contains(&y),
                        VarianceFamily::Poisson => y >= 0.0,
                        _ => true,
                    };
                if !ok {
                    return Err(Error::invalid("dataset", format!("outcome {y} in cluster {i} is outside the family's range")));
                }
            }
            let id = match shapes.iter().position(|s| **s == c.shape) {
                Some(id) => id,
                None => {
                    shapes.push(&c.shape);
                    shapes.len() - 1
                }
            };
            shape_of.push(id);
            let pc = c.shape.pair_counts();
            for k in 0..3 {
                counts[k] += pc[k];
            }
        }
        Ok(Self {
            clusters,
            opts,
            shapes,
            shape_of,
            counts,
            n_obs: data.n_obs(),
        })
    }

    fn solvers(&self, alpha: [f64; 3]) -> Result<Vec<NestedCorrelation>> {
        if alpha.iter().any(|a| !(a.abs() < 1.0)) {
            return Err(Error::InvalidCorrelation {
                violated: vec![],
                message: format!("alpha = {alpha:?} outside (-1, 1)"),
            });
        }
        self.shapes.iter().map(|s| NestedCorrelation::new(alpha, s)).collect()
    }

    fn variance(&self, mu: f64) -> f64 {
        self.opts.family.variance(mu).expect("custom family rejected")
    }

    fn mean_ok(&self, mu: f64) -> bool {
        mu.is_finite()
            && match self.opts.family {
                VarianceFamily::Binomial => mu > 1e-10 && mu < 1.0 - 1e-10,
                VarianceFamily::Poisson => mu > 1e-10,
                _ => true,
            }
    }

    fn eval(
        &self,
        beta: [f64; 2],
        phi: f64,
        solvers: Option<&[NestedCorrelation]>,
    ) -> std::result::Result<Vec<Piece>, FitStatus> {
        let link = self.opts.link;
        self.clusters
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let n = c.y.len();
                let mut d0 = Vec::with_capacity(n);
                let mut d1 = Vec::with_capacity(n);
                let mut rs = Vec::with_capacity(n);
                for j in 0..n {
                    let t = c.treat[j] as f64;
                    let eta = beta[0] + beta[1] * t;
                    let mu = link.inverse(eta);
                    if !self.mean_ok(mu) {
                        return Err(FitStatus::Diverged);
                    }
                    let a = (phi * self.variance(mu)).sqrt();
                    let d = link.mu_eta(eta) / a;
                    d0.push(d);
                    d1.push(d * t);
                    rs.push((c.y[j] - mu) / a);
                }
                let (w0, w1, wr) = match solvers {
                    Some(s) => {
                        let s = &s[self.shape_of[i]];
                        (s.solve(&d0), s.solve(&d1), s.solve(&rs))
                    }
                    None => (d0.clone(), d1.clone(), rs.clone()),
                };
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                let o01 = dot(&d0, &w1);
                let omega = Matrix2::new(dot(&d0, &w0), o01, o01, dot(&d1, &w1));
                let u = Vector2::new(dot(&d0, &wr), dot(&d1, &wr));
                Ok(Piece {
                    d0,
                    rs,
                    score: ClusterScore { omega, u },
                })
            })
            .collect()
    }

    fn pearson_phi(&self, beta: [f64; 2]) -> f64 {
        let link = self.opts.link;
        let mut s = 0.0;
        for c in self.clusters {
            for (y, &t) in c.y.iter().zip(&c.treat) {
                let mu = link.inverse(beta[0] + beta[1] * t as f64);
                s += (y - mu).powi(2) / self.variance(mu);
            }
        }
        s / (self.n_obs as f64 - 2.0)
    }

    fn bread(pieces: &[Piece]) -> Option<Matrix2<f64>> {
        let total: Matrix2<f64> = pieces.iter().map(|p| p.score.omega).sum();
        total.try_inverse().filter(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Pooled pair-class means of adjusted standardized residual products.
    fn maee_target(&self, pieces: &[Piece], bread: &Matrix2<f64>, current: [f64; 3]) -> Option<[f64; 3]> {
        let id = Matrix2::<f64>::identity();
        let mut sums = [0.0; 3];
        for (i, p) in pieces.iter().enumerate() {
            let v = (id - bread * p.score.omega).try_inverse()? * (bread * p.score.u);
            let treat = &self.clusters[i].treat;
            // symmetrized products of adjusted and raw residuals, via
            // sum_{j<k} (a_j b_k + b_j a_k) = (ps(a + b) - ps(a - b)) / 2
            let (plus, minus): (Vec<f64>, Vec<f64>) = (0..p.rs.len())
                .map(|j| {
                    let adj = p.rs[j] + p.d0[j] * (v[0] + v[1] * treat[j] as f64);
                    (adj + p.rs[j], adj - p.rs[j])
                })
                .unzip();
            let shape = &self.clusters[i].shape;
            let (pp, pm) = (shape.pair_sums(&plus), shape.pair_sums(&minus));
            for k in 0..3 {
                sums[k] += 0.25 * (pp[k] - pm[k]);
            }
        }
        let mut out = current;
        for k in 0..3 {
            if self.counts[k] > 0.0 {
                out[k] = sums[k] / self.counts[k];
            }
        }
        out.iter().all(|a| a.is_finite()).then_some(out)
    }

    /// Moves toward `target`, halving the step until every cluster's
    /// correlation matrix is positive definite.
    fn accept_alpha(&self, current: [f64; 3], target: [f64; 3]) -> Option<([f64; 3], Vec<NestedCorrelation>)> {
        let mut step = 1.0;
        for _ in 0..=self.opts.max_halvings {
            let cand = [0, 1, 2].map(|k| current[k] + step * (target[k] - current[k]));
            if let Ok(s) = self.solvers(cand) {
                return Some((cand, s));
            }
            step *= 0.5;
        }
        None
    }

    /// Independence GLM from the link-transformed grand mean.
    fn glm_start(&self) -> std::result::Result<[f64; 2], FitStatus> {
        let ybar = self.clusters.iter().flat_map(|c| c.y.iter()).sum::<f64>() / self.n_obs as f64;
        let start = match self.opts.link {
            Link::Identity => ybar,
            Link::Logit => ybar.clamp(1e-4, 1.0 - 1e-4),
            Link::Log => ybar.max(1e-4),
        };
        let mut beta = [self.opts.link.link(start), 0.0];
        for _ in 0..100 {
            let pieces = self.eval(beta, 1.0, None)?;
            let b = Self::bread(&pieces).ok_or(FitStatus::Singular)?;
            let u: Vector2<f64> = pieces.iter().map(|p| p.score.u).sum();
            let step = b * u;
            beta = [beta[0] + step[0], beta[1] + step[1]];
            if !(beta[0].is_finite() && beta[1].is_finite()) {
                return Err(FitStatus::Diverged);
            }
            if step.amax() < 1e-10 {
                return Ok(beta);
            }
        }
        Err(FitStatus::Diverged)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fits the model and returns the per-cluster pieces used by the variance
/// estimators. Input problems are errors; numerical failures come back as
/// a fit whose status is not `Converged`.
pub fn fit_detailed(
    data: &Dataset,
    working: WorkingCorrelation,
    opts: &FitOptions,
) -> Result<(GeeFit, Option<FitInternals>)> {
    let engine = Engine::new(data, opts)?;
    let gaussian = opts.family == VarianceFamily::Gaussian;
    let estimate_alpha = working == WorkingCorrelation::ExtendedNested;
    let mut alpha = match working {
        WorkingCorrelation::Independence => None,
        WorkingCorrelation::ExtendedNested => Some(opts.alpha_start),
        WorkingCorrelation::Fixed { alphas } => Some(alphas),
    };
    let mut solvers = match alpha {
        Some(a) => Some(engine.solvers(a)?),
        None => None,
    };

    let mut result = GeeFit {
        working,
        beta: [f64::NAN; 2],
        alpha,
        phi: 1.0,
        sigma1: None,
        covariances: None,
        iterations: 0,
        status: FitStatus::MaxIter,
        n_clusters: data.n_clusters(),
        n_obs: engine.n_obs,
        ee_residual: f64::NAN,
    };

    let mut beta = match engine.glm_start() {
        Ok(b) => b,
        Err(status) => {
            result.status = status;
            return Ok((result, None));
        }
    };
    let mut phi = if gaussian { engine.pearson_phi(beta) } else { 1.0 };
    let mut failure = None;
    let mut converged_at: Option<usize> = None;
    let mut iterations = 0;

    for it in 1..=opts.max_iter + opts.polish_iter {
        let pieces = match engine.eval(beta, phi, solvers.as_deref()) {
            Ok(p) => p,
            Err(s) => {
                failure = Some(s);
                break;
            }
        };
        let Some(b) = Engine::bread(&pieces) else {
            failure = Some(FitStatus::Singular);
            break;
        };
        let u: Vector2<f64> = pieces.iter().map(|p| p.score.u).sum();
        let step = b * u;
        let beta_new = [beta[0] + step[0], beta[1] + step[1]];
        if !(beta_new[0].is_finite() && beta_new[1].is_finite()) {
            failure = Some(FitStatus::Diverged);
            break;
        }
        if gaussian {
            phi = engine.pearson_phi(beta_new);
            if !(phi > 0.0 && phi.is_finite()) {
                failure = Some(FitStatus::Singular);
                break;
            }
        }
        let mut delta = step.amax();
        if estimate_alpha {
            let current = alpha.expect("alpha is estimated");
            let pieces = match engine.eval(beta_new, phi, solvers.as_deref()) {
                Ok(p) => p,
                Err(s) => {
                    failure = Some(s);
                    break;
                }
            };
            let target = Engine::bread(&pieces).and_then(|b| engine.maee_target(&pieces, &b, current));
            let Some((a_new, s_new)) = target.and_then(|t| engine.accept_alpha(current, t)) else {
                failure = Some(FitStatus::AlphaInvalid);
                break;
            };
            delta = delta.max(max_abs_diff(&a_new, &current));
            alpha = Some(a_new);
            solvers = Some(s_new);
        }
        beta = beta_new;
        iterations = it;
        match converged_at {
            None if delta < opts.tol => converged_at = Some(it),
            None if it >= opts.max_iter => break,
            Some(c) if delta < opts.polish_tol || it - c >= opts.polish_iter => break,
            _ => {}
        }
    }

    result.beta = beta;
    result.alpha = alpha;
    result.phi = phi;
    result.iterations = iterations;
    result.status = match (failure, converged_at) {
        (Some(f), _) => f,
        (None, Some(_)) => FitStatus::Converged,
        (None, None) => FitStatus::MaxIter,
    };
    if result.status != FitStatus::Converged {
        return Ok((result, None));
    }

    let pieces = match engine.eval(beta, phi, solvers.as_deref()) {
        Ok(p) => p,
        Err(s) => {
            result.status = s;
            return Ok((result, None));
        }
    };
    let Some(b) = Engine::bread(&pieces) else {
        result.status = FitStatus::Singular;
        return Ok((result, None));
    };
    let n = data.n_clusters() as f64;
    let u: Vector2<f64> = pieces.iter().map(|p| p.score.u).sum();
    let mut residual = u.amax() / n;
    if let (true, Some(a)) = (estimate_alpha, alpha) {
        match engine.maee_target(&pieces, &b, a) {
            Some(t) => residual = residual.max(max_abs_diff(&t, &a)),
            None => residual = f64::INFINITY,
        }
    }
    result.ee_residual = residual;
    let omega_sum: Matrix2<f64> = pieces.iter().map(|p| p.score.omega).sum();
    result.sigma1 = Some(variance::to_cov(&(omega_sum / n)));

    let internals = FitInternals {
        scores: pieces.iter().map(|p| p.score).collect(),
        n_obs: engine.n_obs,
        bc3_bound: opts.bc3_bound,
    };
    match variance_estimators(&internals) {
        Ok(c) => result.covariances = Some(c),
        Err(_) => result.status = FitStatus::Degenerate,
    }
    Ok((result, Some(internals)))
}

pub fn fit(data: &Dataset, working: WorkingCorrelation, opts: &FitOptions) -> Result<GeeFit> {
    fit_detailed(data, working, opts).map(|(f, _)| f)
}

/// Serializable summary of one fit with a test per estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub fit: GeeFit,
    pub tests: Vec<WaldTest>,
}

impl FitRecord {
    pub fn new(fit: GeeFit, alpha_level: f64) -> Self {
        let tests = if fit.converged() {
            Estimator::ALL
                .iter()
                .filter_map(|&e| wald_t_test(&fit, e, alpha_level).ok())
                .collect()
        } else {
            Vec::new()
        };
        Self { fit, tests }
    }
}
