//! Closed-form power and sample-size calculators.
//!
//! The variance of `sqrt(N) beta2_hat` when randomizing at level `r` is
//!
//! ```text
//! sigma2 = lambda_r / MKL * (rho_c^2 / pi_c + rho_t^2 / (1 - pi_c))
//!        + (lambda_4 - lambda_r) * (rho_c - rho_t)^2 / MKL
//! ```
//!
//! with `rho = mu * kappa * g'(mu)`, and power follows from a t test with
//! `N - 2` degrees of freedom.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{require_valid, BlockDims, CorrelationParams};
use crate::dist::{normal_quantile, t_cdf, t_quantile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn check_domain(self, mu: f64) -> Result<()> {
        let ok = mu.is_finite()
            && match self {
                Link::Identity => true,
                Link::Logit => mu > 0.0 && mu < 1.0,
                Link::Log => mu > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("mean {mu} outside the domain of the {self:?} link")))
        }
    }

    /// `g(mu)`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
        }
    }

    /// `g^{-1}(eta)`.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Log => eta.exp(),
        }
    }

    /// `g'(mu)`.
    pub fn derivative(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => 1.0 / (mu * (1.0 - mu)),
            Link::Log => 1.0 / mu,
        }
    }

    /// `d mu / d eta` at linear predictor `eta`.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let mu = self.inverse(eta);
                mu * (1.0 - mu)
            }
            Link::Log => eta.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceFamily {
    Gaussian,
    Binomial,
    Poisson,
    /// Marginal CVs are supplied directly.
    Custom,
}

impl VarianceFamily {
    /// Variance function `nu(mu)`; `None` for [`VarianceFamily::Custom`].
    pub fn variance(self, mu: f64) -> Option<f64> {
        match self {
            VarianceFamily::Gaussian => Some(1.0),
            VarianceFamily::Binomial => Some(mu * (1.0 - mu)),
            VarianceFamily::Poisson => Some(mu),
            VarianceFamily::Custom => None,
        }
    }
}

/// Marginal mean model for the two arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub link: Link,
    pub family: VarianceFamily,
    pub phi: f64,
    pub mu_c: f64,
    pub mu_t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_t: Option<f64>,
}

impl OutcomeModel {
    /// Binary outcome with prevalences `p0` (control) and `p1` (intervention).
    pub fn binary(link: Link, p0: f64, p1: f64) -> Result<Self> {
        Self {
            link,
            family: VarianceFamily::Binomial,
            phi: 1.0,
            mu_c: p0,
            mu_t: p1,
            kappa_c: None,
            kappa_t: None,
        }
        .validated()
    }

    pub fn gaussian(link: Link, phi: f64, mu_c: f64, mu_t: f64) -> Result<Self> {
        Self {
            link,
            family: VarianceFamily::Gaussian,
            phi,
            mu_c,
            mu_t,
            kappa_c: None,
            kappa_t: None,
        }
        .validated()
    }

    pub fn poisson(link: Link, mu_c: f64, mu_t: f64) -> Result<Self> {
        Self {
            link,
            family: VarianceFamily::Poisson,
            phi: 1.0,
            mu_c,
            mu_t,
            kappa_c: None,
            kappa_t: None,
        }
        .validated()
    }

    pub fn custom(link: Link, phi: f64, mu_c: f64, mu_t: f64, kappa_c: f64, kappa_t: f64) -> Result<Self> {
        Self {
            link,
            family: VarianceFamily::Custom,
            phi,
            mu_c,
            mu_t,
            kappa_c: Some(kappa_c),
            kappa_t: Some(kappa_t),
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            return Err(Error::invalid("phi", format!("{} must be positive", self.phi)));
        }
        for (name, mu) in [("mu_c", self.mu_c), ("mu_t", self.mu_t)] {
            if !mu.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
            match self.family {
                VarianceFamily::Binomial if !(mu > 0.0 && mu < 1.0) => {
                    return Err(Error::invalid(name, format!("binary mean {mu} not in (0, 1)")));
                }
                VarianceFamily::Poisson if !(mu > 0.0) => {
                    return Err(Error::invalid(name, format!("count mean {mu} must be positive")));
                }
                _ => {}
            }
            self.link.check_domain(mu)?;
        }
        match self.family {
            VarianceFamily::Binomial | VarianceFamily::Poisson if self.phi != 1.0 => {
                return Err(Error::invalid("phi", "binomial and poisson outcomes have phi = 1"));
            }
            VarianceFamily::Custom => {
                for (name, k) in [("kappa_c", self.kappa_c), ("kappa_t", self.kappa_t)] {
                    match k {
                        Some(k) if k > 0.0 && k.is_finite() => {}
                        _ => return Err(Error::invalid(name, "custom family needs a positive CV")),
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Marginal standard deviation `mu * kappa = sqrt(phi * nu(mu))`.
    fn sd(&self, mu: f64, kappa: Option<f64>) -> f64 {
        match self.family.variance(mu) {
            Some(nu) => (self.phi * nu).sqrt(),
            None => (mu * kappa.unwrap_or(f64::NAN)).abs(),
        }
    }

    /// Marginal CVs `(kappa_c, kappa_t)`.
    pub fn kappa(&self) -> Result<(f64, f64)> {
        self.validate()?;
        if self.family == VarianceFamily::Custom {
            return Ok((self.kappa_c.unwrap(), self.kappa_t.unwrap()));
        }
        if self.mu_c == 0.0 || self.mu_t == 0.0 {
            return Err(Error::Domain("the CV is undefined at a zero mean".into()));
        }
        Ok((
            self.sd(self.mu_c, None) / self.mu_c,
            self.sd(self.mu_t, None) / self.mu_t,
        ))
    }

    /// `(rho_c, rho_t)` with `rho = mu * kappa * g'(mu)`.
    pub fn rho(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let rc = (self.sd(self.mu_c, self.kappa_c) * self.link.derivative(self.mu_c)).abs();
        let rt = (self.sd(self.mu_t, self.kappa_t) * self.link.derivative(self.mu_t)).abs();
        if !(rc > 0.0 && rc.is_finite() && rt > 0.0 && rt.is_finite()) {
            return Err(Error::Domain(format!("rho = ({rc}, {rt}) must be finite and positive")));
        }
        Ok((rc, rt))
    }
}

/// Intervention effect on the link scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub b: f64,
    /// Intercept `g(mu_c)`.
    pub beta1: f64,
    /// Equal to `b`.
    pub beta2: f64,
}

pub fn effect_size(outcome: &OutcomeModel) -> Result<EffectSize> {
    outcome.validate()?;
    let beta1 = outcome.link.link(outcome.mu_c);
    let b = outcome.link.link(outcome.mu_t) - beta1;
    Ok(EffectSize { b, beta1, beta2: b })
}

/// Hierarchy level at which treatment is assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RandLevel {
    Patient = 1,
    Provider = 2,
    Facility = 3,
    Cluster = 4,
}

impl RandLevel {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Randomized units inside one cluster of balanced shape.
    pub fn units_per_cluster(self, dims: &BlockDims) -> usize {
        match self {
            RandLevel::Patient => dims.size(),
            RandLevel::Provider => dims.m() * dims.k(),
            RandLevel::Facility => dims.m(),
            RandLevel::Cluster => 1,
        }
    }
}

impl TryFrom<u8> for RandLevel {
    type Error = Error;

    fn try_from(r: u8) -> Result<Self> {
        match r {
            1 => Ok(RandLevel::Patient),
            2 => Ok(RandLevel::Provider),
            3 => Ok(RandLevel::Facility),
            4 => Ok(RandLevel::Cluster),
            _ => Err(Error::invalid("rand_level", format!("{r} is not in 1..=4"))),
        }
    }
}

impl From<RandLevel> for u8 {
    fn from(r: RandLevel) -> u8 {
        r as u8
    }
}

/// How the cluster count must interact with the allocation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationRule {
    /// `pi_c * N` integral, so even `N` for `pi_c = 1/2`.
    #[default]
    Integral,
    /// Any `N >= 3`.
    Relaxed,
}

pub const DEFAULT_MAX_CLUSTERS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub dims: BlockDims,
    pub corr: CorrelationParams,
    pub outcome: OutcomeModel,
    pub pi_c: f64,
    pub rand_level: RandLevel,
    pub alpha_level: f64,
    pub target_power: f64,
    pub n_clusters: Option<u64>,
    pub allocation: AllocationRule,
    pub max_clusters: u64,
}

impl DesignSpec {
    /// Equal allocation, cluster-level randomization, 5% two-sided test and
    /// 80% target power.
    pub fn new(dims: BlockDims, corr: CorrelationParams, outcome: OutcomeModel) -> Self {
        Self {
            dims,
            corr,
            outcome,
            pi_c: 0.5,
            rand_level: RandLevel::Cluster,
            alpha_level: 0.05,
            target_power: 0.8,
            n_clusters: None,
            allocation: AllocationRule::Integral,
            max_clusters: DEFAULT_MAX_CLUSTERS,
        }
    }

    pub fn with_clusters(mut self, n: u64) -> Self {
        self.n_clusters = Some(n);
        self
    }

    pub fn with_level(mut self, r: RandLevel) -> Self {
        self.rand_level = r;
        self
    }

    pub fn with_allocation(mut self, pi_c: f64) -> Self {
        self.pi_c = pi_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi_c > 0.0 && self.pi_c < 1.0) {
            return Err(Error::invalid("pi_c", format!("{} not in (0, 1)", self.pi_c)));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::invalid("alpha_level", format!("{} not in (0, 1)", self.alpha_level)));
        }
        if !(self.target_power > 0.0 && self.target_power < 1.0) {
            return Err(Error::invalid("target_power", format!("{} not in (0, 1)", self.target_power)));
        }
        self.outcome.validate()
    }

    /// `sum of (rho_c^2 / pi_c + rho_t^2 / (1 - pi_c))`, the per-observation
    /// variance of an unclustered trial.
    fn unclustered_term(&self) -> Result<(f64, f64, f64)> {
        let (rc, rt) = self.outcome.rho()?;
        let pi = self.pi_c;
        Ok((rc * rc / pi + rt * rt / (1.0 - pi), rc, rt))
    }
}

pub fn variance_sigma_beta2(spec: &DesignSpec) -> Result<f64> {
    spec.validate()?;
    let s = require_valid(&spec.corr, &spec.dims)?;
    let (v1, rc, rt) = spec.unclustered_term()?;
    let n = spec.dims.size() as f64;
    let lr = s.level(spec.rand_level.index());
    let l4 = s.largest();
    let mut sigma2 = lr / n * v1;
    if spec.rand_level != RandLevel::Cluster {
        sigma2 += (l4 - lr) * (rc - rt).powi(2) / n;
    }
    Ok(sigma2)
}

/// Variance inflation relative to an individually randomized trial with
/// the same number of observations.
pub fn design_effect(spec: &DesignSpec) -> Result<f64> {
    spec.validate()?;
    let s = require_valid(&spec.corr, &spec.dims)?;
    let (v1, rc, rt) = spec.unclustered_term()?;
    let lr = s.level(spec.rand_level.index());
    if spec.rand_level == RandLevel::Cluster {
        return Ok(lr);
    }
    Ok(lr + (s.largest() - lr) * (rc - rt).powi(2) / v1)
}

fn power_from_parts(b: f64, sigma2: f64, n: f64, alpha: f64) -> Result<f64> {
    if !(n >= 3.0) {
        return Err(Error::invalid("n_clusters", format!("{n} < 3 leaves no t degrees of freedom")));
    }
    let df = n - 2.0;
    let crit = t_quantile(alpha / 2.0, df)?;
    t_cdf(crit + b.abs() * (n / sigma2).sqrt(), df)
}

/// Power at a (possibly non-integer) number of clusters.
pub fn power_at(spec: &DesignSpec, n: f64) -> Result<f64> {
    let sigma2 = variance_sigma_beta2(spec)?;
    let b = effect_size(&spec.outcome)?.b;
    power_from_parts(b, sigma2, n, spec.alpha_level)
}

pub fn predicted_power(spec: &DesignSpec) -> Result<f64> {
    let n = spec
        .n_clusters
        .ok_or_else(|| Error::invalid("n_clusters", "required for a power calculation"))?;
    power_at(spec, n as f64)
}

/// Smallest `d <= 1000` with `pi * d` integral.
fn allocation_denominator(pi: f64) -> Option<u64> {
    (1..=1000u64).find(|&d| {
        let x = pi * d as f64;
        (x - x.round()).abs() < 1e-9
    })
}

/// Step between admissible cluster counts: `pi_c * N` must be integral at
/// every randomization level, which also makes `pi_c` times the total number
/// of randomized units integral.
pub fn allocation_step(spec: &DesignSpec) -> Result<u64> {
    spec.validate()?;
    if spec.allocation == AllocationRule::Relaxed {
        return Ok(1);
    }
    allocation_denominator(spec.pi_c).ok_or_else(|| {
        Error::Allocation(format!("pi_c = {} is not a fraction with denominator <= 1000", spec.pi_c))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSize {
    pub n_clusters: u64,
    pub power: f64,
    /// Smallest real `N >= 3` reaching the target power.
    pub n_real: f64,
    /// Admissible cluster counts are multiples of this step.
    pub step: u64,
    /// Normal-approximation starting value of the search.
    pub normal_start: f64,
}

pub fn required_clusters(spec: &DesignSpec) -> Result<SampleSize> {
    let sigma2 = variance_sigma_beta2(spec)?;
    let b = effect_size(&spec.outcome)?.b;
    if b == 0.0 {
        return Err(Error::Domain("a zero effect size cannot reach any target power".into()));
    }
    let alpha = spec.alpha_level;
    let target = spec.target_power;
    if !(target > alpha) {
        return Err(Error::invalid("target_power", format!("{target} must exceed alpha = {alpha}")));
    }
    let step = allocation_step(spec)?;
    let cap = spec.max_clusters;
    let n_min = if spec.allocation == AllocationRule::Relaxed {
        3
    } else {
        4u64.div_ceil(step) * step
    };
    let power = |n: u64| power_from_parts(b, sigma2, n as f64, alpha);

    let z = normal_quantile(1.0 - alpha / 2.0)? + normal_quantile(target)?;
    let normal_start = z * z * sigma2 / (b * b);
    let start = if normal_start.is_finite() && normal_start < cap as f64 {
        (normal_start.ceil() as u64).div_ceil(step) * step
    } else {
        cap
    };
    let mut n = start.max(n_min);

    if power(n)? >= target {
        while n >= n_min + step && power(n - step)? >= target {
            n -= step;
        }
    } else {
        while power(n)? < target {
            n += step;
            if n > cap {
                return Err(Error::NoSolution { cap });
            }
        }
    }
    if n > cap {
        return Err(Error::NoSolution { cap });
    }

    // continuous companion on [3, n]
    let f = |x: f64| power_from_parts(b, sigma2, x, alpha);
    let n_real = if f(3.0)? >= target {
        3.0
    } else {
        let (mut lo, mut hi) = (3.0, n as f64);
        while hi - lo > 1e-10 * hi {
            let mid = 0.5 * (lo + hi);
            if f(mid)? >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    Ok(SampleSize {
        n_clusters: n,
        power: power(n)?,
        n_real,
        step,
        normal_start,
    })
}

/// Observations needed by an individually randomized trial, using a t test
/// with `df` degrees of freedom.
pub fn individual_sample_size(spec: &DesignSpec, df: f64) -> Result<u64> {
    spec.validate()?;
    let b = effect_size(&spec.outcome)?.b;
    if b == 0.0 {
        return Err(Error::Domain("zero effect size".into()));
    }
    let (v1, _, _) = spec.unclustered_term()?;
    let q = t_quantile(1.0 - spec.alpha_level / 2.0, df)? + t_quantile(spec.target_power, df)?;
    Ok((q * q * v1 / (b * b) - 1e-9).ceil() as u64)
}

/// Inflating an unclustered sample size by the design effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignEffectRoute {
    pub design_effect: f64,
    pub individual_observations: u64,
    pub clustered_observations: u64,
    pub n_clusters: u64,
}

pub fn clusters_from_individual(spec: &DesignSpec, individual: u64) -> Result<DesignEffectRoute> {
    let de = design_effect(spec)?;
    let step = allocation_step(spec)?;
    let clustered = (individual as f64 * de - 1e-9).ceil() as u64;
    let per_cluster = spec.dims.size() as u64;
    let n = clustered.div_ceil(per_cluster).div_ceil(step) * step;
    Ok(DesignEffectRoute {
        design_effect: de,
        individual_observations: individual,
        clustered_observations: clustered,
        n_clusters: n,
    })
}

/// Control-arm proportion minimizing `rho_c^2 / pi + rho_t^2 / (1 - pi)`.
pub fn optimal_allocation(outcome: &OutcomeModel) -> Result<f64> {
    let (rc, rt) = outcome.rho()?;
    if (rc - rt).abs() <= 1e-12 * rc.max(rt) {
        return Ok(0.5);
    }
    let denom = rc * rc - rt * rt;
    [rc * rc + rc * rt, rc * rc - rc * rt]
        .into_iter()
        .map(|num| num / denom)
        .find(|pi| *pi > 0.0 && *pi < 1.0)
        .ok_or_else(|| Error::Domain("no optimal allocation inside (0, 1)".into()))
}

/// Parameters that a sensitivity grid can sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridParam {
    Alpha0,
    Alpha1,
    Alpha2,
    P0,
    P1,
    M,
    K,
    L,
    N,
}

impl GridParam {
    pub fn is_integer(self) -> bool {
        matches!(self, GridParam::M | GridParam::K | GridParam::L | GridParam::N)
    }

    pub fn name(self) -> &'static str {
        match self {
            GridParam::Alpha0 => "alpha0",
            GridParam::Alpha1 => "alpha1",
            GridParam::Alpha2 => "alpha2",
            GridParam::P0 => "p0",
            GridParam::P1 => "p1",
            GridParam::M => "m",
            GridParam::K => "k",
            GridParam::L => "l",
            GridParam::N => "n",
        }
    }
}

impl std::str::FromStr for GridParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "alpha0" | "a0" => GridParam::Alpha0,
            "alpha1" | "a1" => GridParam::Alpha1,
            "alpha2" | "a2" => GridParam::Alpha2,
            "p0" | "mu_c" => GridParam::P0,
            "p1" | "mu_t" => GridParam::P1,
            "m" => GridParam::M,
            "k" => GridParam::K,
            "l" => GridParam::L,
            "n" => GridParam::N,
            other => return Err(Error::invalid("axis", format!("unknown grid parameter `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub param: GridParam,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn new(param: GridParam, lo: f64, hi: f64, steps: usize) -> Self {
        Self { param, lo, hi, steps }
    }

    /// Evenly spaced nodes from `lo` to `hi`; integer parameters are rounded.
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.steps == 0 || !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::invalid("axis", format!("empty range for {}", self.param.name())));
        }
        let vals = (0..self.steps)
            .map(|i| {
                let v = if self.steps == 1 {
                    self.lo
                } else {
                    self.lo + (self.hi - self.lo) * i as f64 / (self.steps - 1) as f64
                };
                if self.param.is_integer() {
                    v.round()
                } else {
                    v
                }
            })
            .collect();
        Ok(vals)
    }
}

fn apply_param(mut spec: DesignSpec, param: GridParam, v: f64) -> Result<DesignSpec> {
    let [a0, a1, a2] = spec.corr.alphas();
    let count = |v: f64| -> Result<usize> {
        if v >= 1.0 {
            Ok(v as usize)
        } else {
            Err(Error::invalid("axis", format!("{} = {v} must be at least 1", param.name())))
        }
    };
    match param {
        GridParam::Alpha0 => spec.corr = CorrelationParams::new(v, a1, a2)?,
        GridParam::Alpha1 => spec.corr = CorrelationParams::new(a0, v, a2)?,
        GridParam::Alpha2 => spec.corr = CorrelationParams::new(a0, a1, v)?,
        GridParam::P0 => spec.outcome.mu_c = v,
        GridParam::P1 => spec.outcome.mu_t = v,
        GridParam::M => spec.dims = BlockDims::new(count(v)?, spec.dims.k(), spec.dims.l())?,
        GridParam::K => spec.dims = BlockDims::new(spec.dims.m(), count(v)?, spec.dims.l())?,
        GridParam::L => spec.dims = BlockDims::new(spec.dims.m(), spec.dims.k(), count(v)?)?,
        GridParam::N => spec.n_clusters = Some(count(v)? as u64),
    }
    spec.outcome.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisValues {
    pub param: GridParam,
    pub values: Vec<f64>,
}

/// Power over a two-parameter grid. `power[i][j]` is the node at
/// `axis1.values[i]`, `axis2.values[j]`; masked nodes hold `None` and a reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub axis1: AxisValues,
    pub axis2: AxisValues,
    pub power: Vec<Vec<Option<f64>>>,
    pub mask_reason: Vec<Vec<Option<String>>>,
}

impl SensitivityGrid {
    pub fn masked_count(&self) -> usize {
        self.power.iter().flatten().filter(|p| p.is_none()).count()
    }
}

pub fn sensitivity_grid(base: &DesignSpec, axis1: &GridAxis, axis2: &GridAxis) -> Result<SensitivityGrid> {
    if axis1.param == axis2.param {
        return Err(Error::invalid("axis", "the two axes must sweep different parameters"));
    }
    let v1 = axis1.values()?;
    let v2 = axis2.values()?;
    type Row = (Vec<Option<f64>>, Vec<Option<String>>);
    let rows: Vec<Row> = v1
        .par_iter()
        .map(|&x| {
            v2.iter()
                .map(|&y| {
                    let node = apply_param(*base, axis1.param, x)
                        .and_then(|s| apply_param(s, axis2.param, y))
                        .and_then(|s| predicted_power(&s));
                    match node {
                        Ok(p) => (Some(p), None),
                        Err(e) => (None, Some(e.to_string())),
                    }
                })
                .unzip()
        })
        .collect();
    let (power, mask_reason) = rows.into_iter().unzip();
    Ok(SensitivityGrid {
        axis1: AxisValues {
            param: axis1.param,
            values: v1,
        },
        axis2: AxisValues {
            param: axis2.param,
            values: v2,
        },
        power,
        mask_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reshape() -> DesignSpec {
        DesignSpec::new(
            BlockDims::new(3, 3, 36).unwrap(),
            CorrelationParams::new(0.05, 0.04, 0.03).unwrap(),
            OutcomeModel::binary(Link::Logit, 0.785, 0.88).unwrap(),
        )
    }

    fn hali() -> DesignSpec {
        DesignSpec::new(
            BlockDims::new(4, 25, 2).unwrap(),
            CorrelationParams::new(0.445, 0.104, 0.008).unwrap(),
            OutcomeModel::gaussian(Link::Identity, 1.0, 0.0, 0.19).unwrap(),
        )
    }

    /// Smallest admissible N satisfying the inequality
    /// `N >= (t_{a/2,N-2} + t_{g,N-2})^2 sigma2 / b^2` by direct scan.
    fn scan_n(sigma2: f64, b: f64, alpha: f64, power: f64, step: u64) -> u64 {
        let mut n = 4u64.div_ceil(step) * step;
        loop {
            let df = (n - 2) as f64;
            let q = t_quantile(alpha / 2.0, df).unwrap() + t_quantile(1.0 - power, df).unwrap();
            if n as f64 >= q * q * sigma2 / (b * b) {
                return n;
            }
            n += step;
        }
    }

    #[test]
    fn effect_sizes_per_link() {
        let logit = OutcomeModel::binary(Link::Logit, 0.2, 0.5).unwrap();
        assert_abs_diff_eq!(effect_size(&logit).unwrap().b, 1.3862943611198906, epsilon = 1e-12);
        let ident = OutcomeModel::gaussian(Link::Identity, 2.0, 1.5, 1.5).unwrap();
        assert_eq!(effect_size(&ident).unwrap().b, 0.0);
        let log = OutcomeModel::binary(Link::Log, 0.785, 0.88).unwrap();
        assert_abs_diff_eq!(effect_size(&log).unwrap().b, 0.88f64.ln() - 0.785f64.ln(), epsilon = 1e-12);
        assert!(OutcomeModel::binary(Link::Logit, 1.2, 0.5).is_err());
    }

    #[test]
    fn reshape_variance_matches_logit_plug_in() {
        let spec = reshape();
        let sigma2 = variance_sigma_beta2(&spec).unwrap();
        let direct = 12.11 / 324.0 * (1.0 / (0.5 * 0.785 * 0.215) + 1.0 / (0.5 * 0.88 * 0.12));
        assert_abs_diff_eq!(sigma2, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(sigma2, 1.15083, epsilon = 1e-4);
    }

    #[test]
    fn reshape_power_and_sample_size() {
        let spec = reshape();
        assert_abs_diff_eq!(predicted_power(&spec.with_clusters(22)).unwrap(), 0.8265, epsilon = 5e-4);
        let ss = required_clusters(&spec).unwrap();
        assert_eq!(ss.n_clusters, 22);
        assert_eq!(ss.step, 2);
        assert!(ss.n_real > 20.0 && ss.n_real <= 22.0);
        assert!(power_at(&spec, 20.0).unwrap() < 0.8);
    }

    #[test]
    fn hali_power_and_sample_size() {
        let spec = hali();
        assert_abs_diff_eq!(predicted_power(&spec.with_clusters(36)).unwrap(), 0.8087, epsilon = 5e-4);
        assert_eq!(required_clusters(&spec).unwrap().n_clusters, 36);
    }

    #[test]
    fn table_row_one() {
        let spec = DesignSpec::new(
            BlockDims::new(2, 3, 5).unwrap(),
            CorrelationParams::new(0.4, 0.1, 0.03).unwrap(),
            OutcomeModel::binary(Link::Logit, 0.2, 0.5).unwrap(),
        );
        assert_abs_diff_eq!(predicted_power(&spec.with_clusters(14)).unwrap(), 0.817, epsilon = 1e-3);
        assert_eq!(required_clusters(&spec).unwrap().n_clusters, 14);
    }

    #[test]
    fn zero_effect_gives_half_alpha() {
        let mut spec = reshape().with_clusters(22);
        spec.outcome.mu_t = spec.outcome.mu_c;
        assert_abs_diff_eq!(predicted_power(&spec).unwrap(), 0.025, epsilon = 1e-12);
        assert!(required_clusters(&spec).is_err());
    }

    #[test]
    fn power_needs_three_clusters() {
        assert!(predicted_power(&reshape().with_clusters(2)).is_err());
        assert!(predicted_power(&reshape()).is_err());
    }

    #[test]
    fn gaussian_unclustered_variance() {
        let dims = BlockDims::new(2, 3, 4).unwrap();
        let spec = DesignSpec::new(
            dims,
            CorrelationParams::independence(),
            OutcomeModel::gaussian(Link::Identity, 2.5, 0.0, 1.0).unwrap(),
        )
        .with_allocation(0.25);
        let sigma2 = variance_sigma_beta2(&spec).unwrap();
        assert_abs_diff_eq!(sigma2, 2.5 / (0.25 * 0.75 * 24.0), epsilon = 1e-12);
        for r in [1u8, 2, 3, 4] {
            let s = spec.with_level(RandLevel::try_from(r).unwrap());
            assert_abs_diff_eq!(design_effect(&s).unwrap(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_design_effect_is_level_eigenvalue() {
        let dims = BlockDims::new(3, 4, 5).unwrap();
        let corr = CorrelationParams::new(0.3, 0.12, 0.04).unwrap();
        let spec = DesignSpec::new(dims, corr, OutcomeModel::gaussian(Link::Identity, 1.7, 2.0, 2.6).unwrap());
        let indep = DesignSpec {
            corr: CorrelationParams::independence(),
            ..spec
        };
        let s = crate::correlation::eigen_spectrum(&corr, &dims);
        for r in 1..=4u8 {
            let level = RandLevel::try_from(r).unwrap();
            let ratio = variance_sigma_beta2(&spec.with_level(level)).unwrap()
                / variance_sigma_beta2(&indep.with_level(level)).unwrap();
            assert_abs_diff_eq!(ratio, s.level(r as usize), epsilon = 1e-12);
            assert_abs_diff_eq!(design_effect(&spec.with_level(level)).unwrap(), s.level(r as usize), epsilon = 1e-12);
        }
    }

    #[test]
    fn design_effect_route_reshape() {
        let spec = reshape();
        assert_abs_diff_eq!(design_effect(&spec).unwrap(), 12.11, epsilon = 1e-12);
        let route = clusters_from_individual(&spec, 562).unwrap();
        assert_eq!(route.clustered_observations, 6806);
        assert_eq!(route.n_clusters, 22);
        let own = individual_sample_size(&spec, 20.0).unwrap();
        assert_eq!(clusters_from_individual(&spec, own).unwrap().n_clusters, 22);
    }

    #[test]
    fn lower_level_randomization_reduces_clusters() {
        let spec = reshape();
        let n = |s: DesignSpec, r: u8| required_clusters(&s.with_level(RandLevel::try_from(r).unwrap()));
        assert_eq!(n(spec, 1).unwrap().n_clusters, 6);
        assert_eq!(n(spec, 4).unwrap().n_clusters, 22);
        assert_eq!(n(spec, 2).unwrap().n_clusters, 6);
        assert_eq!(n(spec, 3).unwrap().n_clusters, 8);
        let relaxed = DesignSpec {
            allocation: AllocationRule::Relaxed,
            ..spec
        };
        let chain: Vec<u64> = (1..=4).map(|r| n(relaxed, r).unwrap().n_clusters).collect();
        assert_eq!(chain, vec![5, 5, 7, 21]);
        assert_eq!(n(hali(), 2).unwrap().n_clusters, 8);
    }

    #[test]
    fn allocation_integrality() {
        for r in 1..=4u8 {
            let spec = reshape().with_level(RandLevel::try_from(r).unwrap());
            assert_eq!(required_clusters(&spec).unwrap().n_clusters % 2, 0);
        }
        let thirds = reshape().with_allocation(1.0 / 3.0);
        let ss = required_clusters(&thirds).unwrap();
        assert_eq!(ss.step, 3);
        assert_eq!(ss.n_clusters % 3, 0);
        let odd = reshape().with_allocation(0.123456789);
        assert!(matches!(required_clusters(&odd), Err(Error::Allocation(_))));
        let relaxed = DesignSpec {
            allocation: AllocationRule::Relaxed,
            ..odd
        };
        assert!(required_clusters(&relaxed).is_ok());
    }

    #[test]
    fn optimal_allocation_examples() {
        let logit = OutcomeModel::binary(Link::Logit, 0.2, 0.5).unwrap();
        let (rc, rt) = logit.rho().unwrap();
        assert_abs_diff_eq!(rc, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rt, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(optimal_allocation(&logit).unwrap(), 5.0 / 9.0, epsilon = 1e-12);
        let custom = OutcomeModel::custom(Link::Identity, 1.0, 1.0, 1.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(optimal_allocation(&custom).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        let gauss = OutcomeModel::gaussian(Link::Identity, 3.0, 0.0, 1.0).unwrap();
        assert_eq!(optimal_allocation(&gauss).unwrap(), 0.5);
    }

    /// Golden-section minimizer used as an independent oracle.
    fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        while (b - a).abs() > 1e-12 {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - g * (b - a);
            d = a + g * (b - a);
        }
        0.5 * (a + b)
    }

    #[test]
    fn three_level_collapse_is_exact() {
        // merging levels 3 and 4: MK providers under one cluster
        for (m, k, l, a0, a1) in [(3, 3, 5, 0.2, 0.05), (2, 4, 10, 0.1, 0.02), (4, 2, 3, 0.3, 0.1)] {
            let dims = BlockDims::new(m, k, l).unwrap();
            let spec = DesignSpec::new(
                dims,
                CorrelationParams::new(a0, a1, a1).unwrap(),
                OutcomeModel::binary(Link::Logit, 0.3, 0.45).unwrap(),
            );
            let lam3 = 1.0 + (l as f64 - 1.0) * a0 + l as f64 * ((m * k) as f64 - 1.0) * a1;
            let sigma2 = lam3 / (m * k * l) as f64 * (1.0 / (0.5 * 0.3 * 0.7) + 1.0 / (0.5 * 0.45 * 0.55));
            let b = effect_size(&spec.outcome).unwrap().b;
            assert_eq!(required_clusters(&spec).unwrap().n_clusters, scan_n(sigma2, b, 0.05, 0.8, 2));
        }
    }

    #[test]
    fn sensitivity_ordering_of_coefficients() {
        let dims = BlockDims::new(3, 3, 36).unwrap();
        let base = [0.05, 0.04, 0.03];
        let h = 1e-6;
        let l4 = |a: [f64; 3]| {
            crate::correlation::eigen_spectrum(&CorrelationParams::new(a[0], a[1], a[2]).unwrap(), &dims).largest()
        };
        let mut grads = [0.0; 3];
        for i in 0..3 {
            let mut up = base;
            up[i] += h;
            grads[i] = (l4(up) - l4(base)) / h;
        }
        assert_abs_diff_eq!(grads[0], 35.0, epsilon = 1e-5);
        assert_abs_diff_eq!(grads[1], 72.0, epsilon = 1e-5);
        assert_abs_diff_eq!(grads[2], 216.0, epsilon = 1e-5);
        assert!(grads[2] >= grads[1] && grads[1] >= grads[0]);
    }

    #[test]
    fn grid_base_node_and_masking() {
        let base = reshape().with_clusters(22);
        let grid = sensitivity_grid(
            &base,
            &GridAxis::new(GridParam::Alpha1, 0.0, 0.1, 11),
            &GridAxis::new(GridParam::Alpha2, 0.0, 0.05, 11),
        )
        .unwrap();
        // alpha1 = 0.04 is node 4, alpha2 = 0.03 node 6
        assert_abs_diff_eq!(grid.axis1.values[4], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(grid.axis2.values[6], 0.03, epsilon = 1e-15);
        assert_abs_diff_eq!(
            grid.power[4][6].unwrap(),
            predicted_power(&base).unwrap(),
            epsilon = 1e-12
        );
        // corner of the region alpha1 <= 0.07, alpha2 <= 0.04
        assert_abs_diff_eq!(grid.power[7][8].unwrap(), 0.6996504392989569, epsilon = 1e-9);
        for i in 0..=7 {
            for j in 0..=8 {
                if let (Some(p), true) = (grid.power[i][j], (i, j) != (7, 8)) {
                    assert!(p >= 0.70);
                }
            }
        }
        for row in &grid.power {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]));
        }

        // an axis reaching into the non positive definite region
        let wide = sensitivity_grid(
            &base.with_level(RandLevel::Cluster),
            &GridAxis::new(GridParam::Alpha0, 0.0, 0.9, 10),
            &GridAxis::new(GridParam::Alpha1, 0.0, 0.9, 10),
        )
        .unwrap();
        for (i, row) in wide.power.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                let corr = CorrelationParams::new(wide.axis1.values[i], wide.axis2.values[j], 0.03).unwrap();
                let valid = crate::correlation::is_valid(&corr, &base.dims).valid;
                assert_eq!(p.is_some(), valid);
            }
        }
        assert!(wide.masked_count() > 0);
    }

    #[test]
    fn grid_rejects_empty_range() {
        let base = reshape().with_clusters(22);
        assert!(sensitivity_grid(
            &base,
            &GridAxis::new(GridParam::Alpha1, 0.1, 0.0, 5),
            &GridAxis::new(GridParam::Alpha2, 0.0, 0.05, 5)
        )
        .is_err());
        let single = sensitivity_grid(
            &base,
            &GridAxis::new(GridParam::Alpha1, 0.04, 0.04, 1),
            &GridAxis::new(GridParam::N, 22.0, 22.0, 1),
        )
        .unwrap();
        assert_eq!(single.power.len(), 1);
        assert_eq!(single.power[0].len(), 1);
    }

    fn specialized_sigma2(kind: usize, p0: f64, p1: f64, phi: f64, pi: f64, lam4: f64, mkl: f64) -> f64 {
        let c = lam4 / mkl;
        match kind {
            // continuous, identity
            0 => phi * c / (pi * (1.0 - pi)),
            // binary, logit
            1 => c * (1.0 / (pi * p0 * (1.0 - p0)) + 1.0 / ((1.0 - pi) * p1 * (1.0 - p1))),
            // binary, identity
            2 => c * (p0 * (1.0 - p0) / pi + p1 * (1.0 - p1) / (1.0 - pi)),
            // binary, log
            3 => c * ((1.0 - p0) / (pi * p0) + (1.0 - p1) / ((1.0 - pi) * p1)),
            // count, log
            _ => c * (1.0 / (pi * p0) + 1.0 / ((1.0 - pi) * p1)),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn specialized_formulas_agree_with_generic_path(
            kind in 0usize..5,
            m in 2usize..5, k in 2usize..5, l in 2usize..12,
            a0 in 0.0f64..0.4, a1 in 0.0f64..0.15, a2 in 0.0f64..0.08,
            p0 in 0.1f64..0.6, shift in 0.08f64..0.3,
            phi in 0.5f64..3.0,
            pi_idx in 0usize..3,
        ) {
            let pi = [0.5, 0.25, 0.6][pi_idx];
            let step = [2u64, 4, 5][pi_idx];
            let dims = BlockDims::new(m, k, l).unwrap();
            let corr = CorrelationParams::new(a0, a1, a2).unwrap();
            let p1 = p0 + shift;
            let outcome = match kind {
                0 => OutcomeModel::gaussian(Link::Identity, phi, p0, p1).unwrap(),
                1 => OutcomeModel::binary(Link::Logit, p0, p1).unwrap(),
                2 => OutcomeModel::binary(Link::Identity, p0, p1).unwrap(),
                3 => OutcomeModel::binary(Link::Log, p0, p1).unwrap(),
                _ => OutcomeModel::poisson(Link::Log, 3.0 * p0, 3.0 * p1).unwrap(),
            };
            prop_assume!(crate::correlation::is_valid(&corr, &dims).valid);
            let spec = DesignSpec::new(dims, corr, outcome).with_allocation(pi);
            let lam4 = crate::correlation::eigen_spectrum(&corr, &dims).largest();
            let (q0, q1) = if kind == 4 { (3.0 * p0, 3.0 * p1) } else { (p0, p1) };
            let sigma2 = specialized_sigma2(kind, q0, q1, phi, pi, lam4, dims.size() as f64);
            let generic = variance_sigma_beta2(&spec).unwrap();
            prop_assert!((generic - sigma2).abs() <= 1e-12 * sigma2);
            let b = effect_size(&outcome).unwrap().b;
            prop_assert_eq!(required_clusters(&spec).unwrap().n_clusters, scan_n(sigma2, b, 0.05, 0.8, step));
        }

        #[test]
        fn variance_monotone_in_each_icc(
            m in 2usize..5, k in 2usize..5, l in 2usize..10,
            a in prop::array::uniform3(0.0f64..0.2),
            which in 0usize..3,
            bump in 0.001f64..0.05,
        ) {
            let dims = BlockDims::new(m, k, l).unwrap();
            let outcome = OutcomeModel::binary(Link::Logit, 0.3, 0.5).unwrap();
            let spec = DesignSpec::new(dims, CorrelationParams::new(a[0], a[1], a[2]).unwrap(), outcome);
            let mut b = a;
            b[which] += bump;
            let bumped = DesignSpec { corr: CorrelationParams::new(b[0], b[1], b[2]).unwrap(), ..spec };
            if let (Ok(v0), Ok(v1)) = (variance_sigma_beta2(&spec), variance_sigma_beta2(&bumped)) {
                prop_assert!(v1 > v0);
            }
        }

        #[test]
        fn optimal_allocation_matches_golden_section(
            rc in 0.2f64..5.0, rt in 0.2f64..5.0, r in 1u8..5,
        ) {
            let outcome = OutcomeModel::custom(Link::Identity, 1.0, 1.0, 1.0, rc, rt).unwrap();
            let pi = optimal_allocation(&outcome).unwrap();
            let dims = BlockDims::new(2, 3, 4).unwrap();
            let corr = CorrelationParams::new(0.2, 0.1, 0.05).unwrap();
            let level = RandLevel::try_from(r).unwrap();
            let f = |p: f64| {
                variance_sigma_beta2(&DesignSpec::new(dims, corr, outcome).with_level(level).with_allocation(p)).unwrap()
            };
            let oracle = golden_min(f, 1e-9, 1.0 - 1e-9);
            prop_assert!((pi - oracle).abs() < 1e-6);
        }
    }
}
