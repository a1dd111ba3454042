//! Request and response bodies. Requests reject unknown fields; responses
//! echo the resolved design with defaults filled in.

use serde::{Deserialize, Serialize};

use nestcrt::correlation::{eigen_spectrum, is_valid, require_valid, BlockDims, CorrelationParams, EigenSpectrum};
use nestcrt::design::{
    clusters_from_individual, design_effect, effect_size, optimal_allocation, predicted_power, required_clusters,
    sensitivity_grid, variance_sigma_beta2, AllocationRule, DesignEffectRoute, GridAxis, SensitivityGrid,
};
use nestcrt::harness::{GridReport, Scenario};
use nestcrt::{DesignSpec, Link, OutcomeModel, RandLevel, VarianceFamily};

use crate::error::{ApiError, FieldError};

/// Largest cluster size `M * K * L` accepted by any endpoint.
pub const MAX_CLUSTER_SIZE: usize = 10_000;
/// Largest number of nodes along one sensitivity-grid axis.
pub const MAX_AXIS_STEPS: usize = 201;

/// A design as supplied by clients. Binary designs give `p0`/`p1`; other
/// families give `mu_c`/`mu_t` (and `phi`, or `kappa_c`/`kappa_t` for a
/// custom variance).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignInput {
    pub family: Option<VarianceFamily>,
    pub link: Option<Link>,
    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub mu_c: Option<f64>,
    pub mu_t: Option<f64>,
    pub phi: Option<f64>,
    pub kappa_c: Option<f64>,
    pub kappa_t: Option<f64>,
    pub icc: Option<[f64; 3]>,
    pub dims: Option<[usize; 3]>,
    pub pi_c: Option<f64>,
    pub rand_level: Option<u8>,
    pub alpha_level: Option<f64>,
    pub target_power: Option<f64>,
    pub n: Option<u64>,
    pub allocation: Option<AllocationRule>,
    pub max_clusters: Option<u64>,
    /// Unclustered sample size to inflate by the design effect.
    pub individual: Option<u64>,
}

fn missing(field: &str) -> FieldError {
    FieldError {
        field: field.into(),
        message: "is required".into(),
    }
}

fn one_of(a: Option<f64>, b: Option<f64>, names: (&str, &str), errors: &mut Vec<FieldError>) -> f64 {
    match (a, b) {
        (Some(x), None) | (None, Some(x)) => x,
        (Some(_), Some(_)) => {
            errors.push(FieldError {
                field: names.1.into(),
                message: format!("give either `{}` or `{}`, not both", names.0, names.1),
            });
            f64::NAN
        }
        (None, None) => {
            errors.push(missing(names.0));
            f64::NAN
        }
    }
}

pub fn resolve_dims(dims: Option<[usize; 3]>) -> Result<BlockDims, ApiError> {
    let d = dims.ok_or_else(|| ApiError::Validation(vec![missing("dims")]))?;
    let dims = BlockDims::new(d[0], d[1], d[2]).map_err(|e| ApiError::field("dims", e.to_string()))?;
    if dims.size() > MAX_CLUSTER_SIZE {
        return Err(ApiError::field(
            "dims",
            format!("cluster size {} exceeds the cap {MAX_CLUSTER_SIZE}", dims.size()),
        ));
    }
    Ok(dims)
}

impl DesignInput {
    pub fn outcome(&self) -> Result<OutcomeModel, ApiError> {
        let mut errors = Vec::new();
        let family = self.family.unwrap_or(VarianceFamily::Binomial);
        let link = match (self.link, family) {
            (Some(l), _) => l,
            (None, VarianceFamily::Binomial) => Link::Logit,
            (None, VarianceFamily::Gaussian) => Link::Identity,
            (None, VarianceFamily::Poisson) => Link::Log,
            (None, VarianceFamily::Custom) => {
                errors.push(missing("link"));
                Link::Identity
            }
        };
        let mu_c = one_of(self.p0, self.mu_c, ("p0", "mu_c"), &mut errors);
        let mu_t = one_of(self.p1, self.mu_t, ("p1", "mu_t"), &mut errors);
        let fixed_phi = matches!(family, VarianceFamily::Binomial | VarianceFamily::Poisson);
        if fixed_phi && self.phi.is_some_and(|p| p != 1.0) {
            errors.push(FieldError {
                field: "phi".into(),
                message: "is fixed at 1 for binomial and poisson outcomes".into(),
            });
        }
        let phi = self.phi.unwrap_or(1.0);
        let kappas = if family == VarianceFamily::Custom {
            if self.kappa_c.is_none() {
                errors.push(missing("kappa_c"));
            }
            if self.kappa_t.is_none() {
                errors.push(missing("kappa_t"));
            }
            (self.kappa_c.unwrap_or(f64::NAN), self.kappa_t.unwrap_or(f64::NAN))
        } else {
            (f64::NAN, f64::NAN)
        };
        if !errors.is_empty() {
            return Err(ApiError::Validation(errors));
        }
        let outcome = match family {
            VarianceFamily::Binomial => OutcomeModel::binary(link, mu_c, mu_t),
            VarianceFamily::Gaussian => OutcomeModel::gaussian(link, phi, mu_c, mu_t),
            VarianceFamily::Poisson => OutcomeModel::poisson(link, mu_c, mu_t),
            VarianceFamily::Custom => OutcomeModel::custom(link, phi, mu_c, mu_t, kappas.0, kappas.1),
        };
        Ok(outcome?)
    }

    /// Full design; the ICC triple must give a positive definite matrix.
    pub fn resolve(&self) -> Result<DesignSpec, ApiError> {
        let mut errors = Vec::new();
        if self.icc.is_none() {
            errors.push(missing("icc"));
        }
        if self.dims.is_none() {
            errors.push(missing("dims"));
        }
        let outcome = match self.outcome() {
            Ok(o) => Some(o),
            Err(ApiError::Validation(f)) => {
                errors.extend(f);
                None
            }
            Err(e) => return Err(e),
        };
        if !errors.is_empty() {
            return Err(ApiError::Validation(errors));
        }
        let dims = resolve_dims(self.dims)?;
        let a = self.icc.expect("checked above");
        let corr = CorrelationParams::new(a[0], a[1], a[2])?;
        require_valid(&corr, &dims)?;
        let mut spec = DesignSpec::new(dims, corr, outcome.expect("checked above"));
        if let Some(p) = self.pi_c {
            spec.pi_c = p;
        }
        if let Some(r) = self.rand_level {
            spec.rand_level = RandLevel::try_from(r).map_err(|e| ApiError::field("rand_level", e.to_string()))?;
        }
        if let Some(a) = self.alpha_level {
            spec.alpha_level = a;
        }
        if let Some(t) = self.target_power {
            spec.target_power = t;
        }
        spec.n_clusters = self.n;
        if let Some(a) = self.allocation {
            spec.allocation = a;
        }
        if let Some(m) = self.max_clusters {
            spec.max_clusters = m;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn power(&self) -> Result<PowerResponse, ApiError> {
        let spec = self.resolve()?;
        let n_clusters = spec.n_clusters.ok_or_else(|| ApiError::field("n", "is required"))?;
        Ok(PowerResponse {
            power: predicted_power(&spec)?,
            n_clusters,
            effect_size: effect_size(&spec.outcome)?.b,
            sigma2: variance_sigma_beta2(&spec)?,
            design_effect: design_effect(&spec)?,
            spec,
        })
    }

    pub fn sample_size(&self) -> Result<SampleSizeResponse, ApiError> {
        let spec = self.resolve()?;
        let s = required_clusters(&spec)?;
        Ok(SampleSizeResponse {
            n_clusters: s.n_clusters,
            power: s.power,
            n_real: s.n_real,
            step: s.step,
            normal_start: s.normal_start,
            spec: spec.with_clusters(s.n_clusters),
        })
    }

    /// Also converts `individual` into a cluster count when given.
    pub fn design_effect(&self) -> Result<DesignEffectResponse, ApiError> {
        let spec = self.resolve()?;
        let route = self.individual.map(|n| clusters_from_individual(&spec, n)).transpose()?;
        Ok(DesignEffectResponse {
            design_effect: design_effect(&spec)?,
            spectrum: eigen_spectrum(&spec.corr, &spec.dims),
            route,
            spec,
        })
    }

    /// Needs only the outcome fields.
    pub fn allocation(&self) -> Result<AllocationResponse, ApiError> {
        let outcome = self.outcome()?;
        let pi_c = optimal_allocation(&outcome)?;
        let (rho_c, rho_t) = outcome.rho()?;
        Ok(AllocationResponse {
            pi_c,
            rho_c,
            rho_t,
            outcome,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResponse {
    pub power: f64,
    pub n_clusters: u64,
    pub effect_size: f64,
    pub sigma2: f64,
    pub design_effect: f64,
    pub spec: DesignSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeResponse {
    pub n_clusters: u64,
    pub power: f64,
    pub n_real: f64,
    pub step: u64,
    pub normal_start: f64,
    pub spec: DesignSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEffectResponse {
    pub design_effect: f64,
    pub spectrum: EigenSpectrum,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route: Option<DesignEffectRoute>,
    pub spec: DesignSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResponse {
    pub pi_c: f64,
    pub rho_c: f64,
    pub rho_t: f64,
    pub outcome: OutcomeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateRequest {
    pub icc: [f64; 3],
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateResponse {
    pub icc: [f64; 3],
    pub dims: [usize; 3],
    pub valid: bool,
    pub spectrum: EigenSpectrum,
    /// Names of non-positive eigenvalues, e.g. `lambda2`.
    pub violated: Vec<String>,
    pub repeated: Vec<(usize, usize)>,
    pub message: String,
}

impl ValidateRequest {
    pub fn evaluate(&self) -> Result<ValidateResponse, ApiError> {
        let dims = resolve_dims(Some(self.dims))?;
        let [a0, a1, a2] = self.icc;
        let corr = CorrelationParams::signed(a0, a1, a2)?;
        let v = is_valid(&corr, &dims);
        Ok(ValidateResponse {
            icc: self.icc,
            dims: self.dims,
            valid: v.valid,
            message: v.message(),
            violated: v.violated.iter().map(|i| format!("lambda{i}")).collect(),
            repeated: v.repeated.clone(),
            spectrum: v.spectrum,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRequest {
    pub spec: DesignInput,
    pub axis1: GridAxis,
    pub axis2: GridAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResponse {
    pub grid: SensitivityGrid,
    pub masked: usize,
    pub spec: DesignSpec,
}

impl GridRequest {
    pub fn evaluate(&self) -> Result<GridResponse, ApiError> {
        for (name, axis) in [("axis1", &self.axis1), ("axis2", &self.axis2)] {
            if axis.steps == 0 || axis.steps > MAX_AXIS_STEPS {
                return Err(ApiError::field(
                    format!("{name}.steps"),
                    format!("{} not in 1..={MAX_AXIS_STEPS}", axis.steps),
                ));
            }
        }
        let spec = self.spec.resolve()?;
        let grid = sensitivity_grid(&spec, &self.axis1, &self.axis2)?;
        Ok(GridResponse {
            masked: grid.masked_count(),
            grid,
            spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<GridReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
