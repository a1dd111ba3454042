//! Monte Carlo runner for empirical size and power of the GEE t-tests.
//!
//! A replication draws a layout and a binary dataset, fits every requested
//! working structure and records the Wald decision of every requested
//! variance estimator. Rates are taken over converged fits only.
//!
//! Seeds: scenario `i` of a grid uses `derive(master_seed, i)` unless the
//! scenario pins its own seed; replication `r` uses
//! `derive(scenario_seed, r)` for its layout and `derive(rep_seed, 1)` for
//! its outcomes. Replications run in parallel but results are collected in
//! replication order, so reports do not depend on the thread count.

pub mod presets;
pub mod report;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{BlockDims, CorrelationParams};
use crate::datagen::{make_layout, BinaryGenerator, PanelSizeModel};
use crate::design::{predicted_power, DesignSpec, Link, OutcomeModel, RandLevel};
use crate::error::{Error, Result};
use crate::estimation::{fit, wald_t_test, Estimator, FitOptions, FitStatus, WorkingCorrelation};
use crate::rng::derive;

pub use report::{GridEntry, GridReport, REPORT_COLUMNS};

/// Acceptable band for empirical size at a 5% nominal level.
pub const SIZE_BOUNDS: (f64, f64) = (0.036, 0.064);
/// Acceptable absolute gap between empirical and predicted power.
pub const POWER_MARGIN: f64 = 0.026;

/// Named ICC triples used by the reference grid.
pub fn icc_set(label: &str) -> Option<[f64; 3]> {
    match label.to_ascii_uppercase().as_str() {
        "A1" => Some([0.4, 0.1, 0.03]),
        "A2" => Some([0.15, 0.08, 0.02]),
        "A3" => Some([0.1, 0.02, 0.01]),
        "A4" => Some([0.05, 0.05, 0.02]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IccSpec {
    Label(String),
    Values([f64; 3]),
}

impl IccSpec {
    pub fn alphas(&self) -> Result<[f64; 3]> {
        match self {
            IccSpec::Values(a) => Ok(*a),
            IccSpec::Label(l) => icc_set(l).ok_or_else(|| Error::Parse(format!("unknown ICC set `{l}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    Independence,
    Ene,
}

impl Analysis {
    pub fn working(self) -> WorkingCorrelation {
        match self {
            Analysis::Independence => WorkingCorrelation::Independence,
            Analysis::Ene => WorkingCorrelation::ExtendedNested,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Analysis::Independence => "independence",
            Analysis::Ene => "ene",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Null,
    Alternative,
}

fn default_cv() -> f64 {
    0.0
}
fn default_floor() -> usize {
    2
}
fn default_pi_c() -> f64 {
    0.5
}
fn default_reps() -> usize {
    1000
}
fn default_analyses() -> Vec<Analysis> {
    vec![Analysis::Ene]
}
fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}
fn default_alpha_level() -> f64 {
    0.05
}

/// One simulation cell. `dims` is `[M, K, L]`; with `cv > 0` the panel
/// sizes are gamma draws with mean `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub p0: f64,
    pub p1: f64,
    pub icc: IccSpec,
    pub dims: [usize; 3],
    #[serde(rename = "n")]
    pub n_clusters: usize,
    #[serde(default = "default_cv")]
    pub cv: f64,
    #[serde(default = "default_floor")]
    pub panel_floor: usize,
    /// Draw panel sizes once per scenario instead of per replication.
    #[serde(default)]
    pub freeze_panels: bool,
    #[serde(default = "default_pi_c")]
    pub pi_c: f64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_analyses")]
    pub analyses: Vec<Analysis>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_alpha_level")]
    pub alpha_level: f64,
}

impl Scenario {
    pub fn new(name: impl Into<String>, p0: f64, p1: f64, icc: IccSpec, dims: [usize; 3], n_clusters: usize) -> Self {
        Self {
            name: name.into(),
            p0,
            p1,
            icc,
            dims,
            n_clusters,
            cv: 0.0,
            panel_floor: 2,
            freeze_panels: false,
            pi_c: 0.5,
            replications: 1000,
            seed: None,
            analyses: default_analyses(),
            estimators: default_estimators(),
            alpha_level: 0.05,
        }
    }

    pub fn hypothesis(&self) -> Hypothesis {
        if self.p0 == self.p1 {
            Hypothesis::Null
        } else {
            Hypothesis::Alternative
        }
    }

    pub fn block_dims(&self) -> Result<BlockDims> {
        BlockDims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn correlation(&self) -> Result<CorrelationParams> {
        let a = self.icc.alphas()?;
        CorrelationParams::new(a[0], a[1], a[2])
    }

    pub fn panel_model(&self) -> Result<Option<PanelSizeModel>> {
        if self.cv == 0.0 {
            return Ok(None);
        }
        PanelSizeModel::new(self.dims[2] as f64, self.cv)?
            .with_floor(self.panel_floor)
            .map(Some)
    }

    /// Closed-form power at the mean panel size, for alternatives only.
    pub fn predicted_power(&self) -> Result<Option<f64>> {
        if self.hypothesis() == Hypothesis::Null {
            return Ok(None);
        }
        let outcome = OutcomeModel::binary(Link::Logit, self.p0, self.p1)?;
        let mut spec = DesignSpec::new(self.block_dims()?, self.correlation()?, outcome)
            .with_clusters(self.n_clusters as u64)
            .with_allocation(self.pi_c);
        spec.alpha_level = self.alpha_level;
        predicted_power(&spec).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter {
                name: "replications",
                reason: "must be positive".into(),
            });
        }
        if self.analyses.is_empty() || self.estimators.is_empty() {
            return Err(Error::InvalidParameter {
                name: "analyses",
                reason: "need at least one analysis and one estimator".into(),
            });
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::InvalidParameter {
                name: "alpha_level",
                reason: format!("{} not in (0, 1)", self.alpha_level),
            });
        }
        if !(self.cv >= 0.0 && self.cv.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "cv",
                reason: format!("{} is negative", self.cv),
            });
        }
        self.correlation()?;
        self.block_dims()?;
        BinaryGenerator::new(&self.correlation()?, self.p0, self.p1)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimator: Estimator,
    pub rejections: usize,
    pub rate: f64,
    /// `sqrt(rate (1 - rate) / converged)`.
    pub mc_se: f64,
    /// `rate - alpha_level` under the null, `rate - predicted` otherwise.
    pub deviation: f64,
    pub acceptable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub analysis: Analysis,
    pub converged: usize,
    pub convergence_rate: f64,
    /// Counts of non-converged fits by status.
    pub failures: BTreeMap<String, usize>,
    pub mean_beta2: f64,
    pub mean_alpha: Option<[f64; 3]>,
    pub estimators: Vec<EstimatorResult>,
}

impl AnalysisResult {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorResult> {
        self.estimators.iter().find(|r| r.estimator == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub hypothesis: Hypothesis,
    pub alphas: [f64; 3],
    pub seed: u64,
    pub predicted_power: Option<f64>,
    pub analyses: Vec<AnalysisResult>,
}

impl ScenarioResult {
    pub fn analysis(&self, a: Analysis) -> Option<&AnalysisResult> {
        self.analyses.iter().find(|r| r.analysis == a)
    }

    pub fn rate(&self, a: Analysis, e: Estimator) -> Option<f64> {
        self.analysis(a)?.estimator(e).map(|r| r.rate)
    }
}

struct FitSummary {
    status: FitStatus,
    beta2: f64,
    alpha: Option<[f64; 3]>,
    rejects: Vec<bool>,
}

fn status_name(s: FitStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn replicate(
    s: &Scenario,
    generator: &BinaryGenerator,
    dims: BlockDims,
    panel: Option<&PanelSizeModel>,
    seed: u64,
    rep: usize,
) -> Result<Vec<FitSummary>> {
    let rep_seed = derive(seed, rep as u64);
    let layout_seed = if s.freeze_panels { seed } else { rep_seed };
    let layout = make_layout(s.n_clusters, dims, s.pi_c, RandLevel::Cluster, panel, layout_seed)?;
    let data = generator.generate(&layout, derive(rep_seed, 1))?;
    let opts = FitOptions::binary_logit();
    s.analyses
        .iter()
        .map(|a| {
            let f = fit(&data, a.working(), &opts)?;
            let rejects = if f.converged() {
                s.estimators
                    .iter()
                    .map(|&e| wald_t_test(&f, e, s.alpha_level).map(|w| w.reject).unwrap_or(false))
                    .collect()
            } else {
                Vec::new()
            };
            Ok(FitSummary {
                status: f.status,
                beta2: f.beta[1],
                alpha: f.alpha,
                rejects,
            })
        })
        .collect()
}

/// Runs every replication of `s` with the given scenario seed.
pub fn run_scenario(s: &Scenario, seed: u64) -> Result<ScenarioResult> {
    s.validate()?;
    let dims = s.block_dims()?;
    let alphas = s.icc.alphas()?;
    let generator = BinaryGenerator::new(&s.correlation()?, s.p0, s.p1)?;
    let panel = s.panel_model()?;
    if panel.is_none() {
        let layout = make_layout(s.n_clusters, dims, s.pi_c, RandLevel::Cluster, None, seed)?;
        generator.check_layout(&layout)?;
    }
    let predicted = s.predicted_power()?;

    let reps: Vec<Vec<FitSummary>> = (0..s.replications)
        .into_par_iter()
        .map(|r| replicate(s, &generator, dims, panel.as_ref(), seed, r))
        .collect::<Result<_>>()?;

    let mut analyses = Vec::with_capacity(s.analyses.len());
    for (ai, &analysis) in s.analyses.iter().enumerate() {
        let fits: Vec<&FitSummary> = reps.iter().map(|r| &r[ai]).collect();
        let ok: Vec<&FitSummary> = fits.iter().copied().filter(|f| f.status == FitStatus::Converged).collect();
        let mut failures = BTreeMap::new();
        for f in fits.iter().filter(|f| f.status != FitStatus::Converged) {
            *failures.entry(status_name(f.status)).or_insert(0) += 1;
        }
        let converged = ok.len();
        if 2 * converged < s.replications {
            return Err(Error::Aborted(format!(
                "`{}`: {} analysis converged in {converged} of {} replications; failures {failures:?}",
                s.name,
                analysis.name(),
                s.replications
            )));
        }
        let m = converged as f64;
        let mean_beta2 = ok.iter().map(|f| f.beta2).sum::<f64>() / m;
        let mean_alpha = (analysis == Analysis::Ene).then(|| {
            let mut acc = [0.0; 3];
            for f in &ok {
                let a = f.alpha.expect("nested fits carry alpha");
                for k in 0..3 {
                    acc[k] += a[k] / m;
                }
            }
            acc
        });
        let estimators = s
            .estimators
            .iter()
            .enumerate()
            .map(|(ei, &estimator)| {
                let rejections = ok.iter().filter(|f| f.rejects[ei]).count();
                let rate = rejections as f64 / m;
                let (deviation, acceptable) = match predicted {
                    None => (rate - s.alpha_level, (SIZE_BOUNDS.0..=SIZE_BOUNDS.1).contains(&rate)),
                    Some(p) => (rate - p, (rate - p).abs() <= POWER_MARGIN),
                };
                EstimatorResult {
                    estimator,
                    rejections,
                    rate,
                    mc_se: (rate * (1.0 - rate) / m).sqrt(),
                    deviation,
                    acceptable,
                }
            })
            .collect();
        analyses.push(AnalysisResult {
            analysis,
            converged,
            convergence_rate: m / s.replications as f64,
            failures,
            mean_beta2,
            mean_alpha,
            estimators,
        });
    }

    Ok(ScenarioResult {
        hypothesis: s.hypothesis(),
        alphas,
        seed,
        predicted_power: predicted,
        analyses,
        scenario: s.clone(),
    })
}

/// Seed used for scenario `index` of a grid.
pub fn scenario_seed(s: &Scenario, master_seed: u64, index: usize) -> u64 {
    s.seed.unwrap_or_else(|| derive(master_seed, index as u64))
}

/// Runs scenarios in order; a failing scenario is recorded and the grid
/// continues. `threads = 0` uses the global pool.
pub fn run_grid(scenarios: &[Scenario], master_seed: u64, threads: usize) -> Result<GridReport> {
    let run = || {
        let entries = scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = scenario_seed(s, master_seed, i);
                match run_scenario(s, seed) {
                    Ok(r) => GridEntry {
                        scenario: s.name.clone(),
                        seed,
                        result: Some(r),
                        error: None,
                    },
                    Err(e) => GridEntry {
                        scenario: s.name.clone(),
                        seed,
                        result: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect();
        GridReport { master_seed, entries }
    };
    if threads == 0 {
        return Ok(run());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    Ok(pool.install(run))
}

/// Declarative scenario file. Top-level keys give defaults applied to
/// every `[[scenario]]` that does not set them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub analyses: Option<Vec<Analysis>>,
    #[serde(default)]
    pub estimators: Option<Vec<Estimator>>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub scenario: Vec<toml::Table>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Preset scenarios first, then the listed ones, with file defaults
    /// filled in.
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        let mut out = match &self.preset {
            None => Vec::new(),
            Some(p) => presets::by_name(p).ok_or_else(|| Error::Parse(format!("unknown preset `{p}`")))?,
        };
        for (i, table) in self.scenario.iter().enumerate() {
            let mut t = table.clone();
            if let Some(r) = self.replications {
                t.entry("replications").or_insert(toml::Value::Integer(r as i64));
            }
            if let Some(a) = &self.analyses {
                t.entry("analyses")
                    .or_insert(toml::Value::try_from(a).map_err(|e| Error::Parse(e.to_string()))?);
            }
            if let Some(e) = &self.estimators {
                t.entry("estimators")
                    .or_insert(toml::Value::try_from(e).map_err(|e| Error::Parse(e.to_string()))?);
            }
            let s: Scenario = t
                .try_into()
                .map_err(|e: toml::de::Error| Error::Parse(format!("scenario {}: {e}", i + 1)))?;
            out.push(s);
        }
        if self.preset.is_some() {
            for s in &mut out {
                if let Some(r) = self.replications {
                    s.replications = r;
                }
                if let Some(a) = &self.analyses {
                    s.analyses = a.clone();
                }
                if let Some(e) = &self.estimators {
                    s.estimators = e.clone();
                }
            }
        }
        Ok(out)
    }
}
