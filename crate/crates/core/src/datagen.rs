//! Trial layouts and correlated binary outcomes.
//!
//! Outcomes are drawn one observation at a time from the conditional linear
//! family: with `e_k = (y_k - mu_k) / sd_k`,
//!
//! ```text
//! P(y_j = 1 | y_<j) = mu_j + sd_j * sum_k b_jk e_k,   b_j = R_<j^{-1} r_j
//! ```
//!
//! which reproduces the marginal means and the correlation matrix `R`
//! exactly. The coefficients depend only on `R`, so they are computed once
//! per cluster shape with an incrementally grown Cholesky factor.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::correlation::{BlockDims, CorrelationParams};
use crate::design::RandLevel;
use crate::error::{Error, Result};
use crate::rng::{stream, ASSIGNMENT_STREAM, PANEL_STREAM};
use crate::structure::{ClusterShape, NestedCorrelation};

/// Largest cluster the generator will factor densely.
pub const MAX_CLUSTER_OBS: usize = 4_000;

/// Slack allowed on conditional means before they count as out of range.
const RANGE_TOL: f64 = 1e-9;

/// Gamma-distributed patients per provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelSizeModel {
    pub mean_l: f64,
    pub cv: f64,
    /// Smallest panel after rounding.
    pub floor: usize,
}

impl PanelSizeModel {
    pub fn new(mean_l: f64, cv: f64) -> Result<Self> {
        if !(mean_l >= 1.0) || !mean_l.is_finite() {
            return Err(Error::invalid("mean_l", format!("{mean_l} must be at least 1")));
        }
        if !(cv >= 0.0) || !cv.is_finite() {
            return Err(Error::invalid("cv", format!("{cv} must be nonnegative")));
        }
        Ok(Self { mean_l, cv, floor: 2 })
    }

    pub fn with_floor(mut self, floor: usize) -> Result<Self> {
        if floor == 0 {
            return Err(Error::invalid("floor", "panels need at least one patient"));
        }
        self.floor = floor;
        Ok(self)
    }

    /// Unrounded gamma draw with shape `1 / cv^2` and scale `mean_l * cv^2`.
    pub fn draw_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.cv == 0.0 {
            return self.mean_l;
        }
        let v = self.cv * self.cv;
        Gamma::new(1.0 / v, self.mean_l * v)
            .expect("validated gamma parameters")
            .sample(rng)
    }

    /// Rounded to the nearest integer and floored; `cv = 0` gives exactly
    /// `round(mean_l)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let raw = self.draw_raw(rng).round() as usize;
        if self.cv == 0.0 {
            raw
        } else {
            raw.max(self.floor)
        }
    }
}

/// Cluster shapes and treatment assignment of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLayout {
    pub pi_c: f64,
    pub rand_level: RandLevel,
    pub shapes: Vec<ClusterShape>,
    /// One entry per randomized unit, clusters in order and units in
    /// Kronecker order within a cluster; 1 marks the intervention arm.
    pub assignment: Vec<u8>,
}

fn units_in(shape: &ClusterShape, level: RandLevel) -> usize {
    match level {
        RandLevel::Patient => shape.n_obs(),
        RandLevel::Provider => shape.n_providers(),
        RandLevel::Facility => shape.n_facilities(),
        RandLevel::Cluster => 1,
    }
}

impl TrialLayout {
    pub fn n_clusters(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_obs(&self) -> usize {
        self.shapes.iter().map(ClusterShape::n_obs).sum()
    }

    /// Common dimensions when every cluster has the same balanced shape.
    pub fn balanced_dims(&self) -> Option<BlockDims> {
        let dims = self.shapes.first()?.as_balanced()?;
        self.shapes.iter().all(|s| s.as_balanced() == Some(dims)).then_some(dims)
    }

    /// Per-observation treatment indicators of cluster `i`.
    pub fn treatment(&self, i: usize) -> Vec<u8> {
        let offset: usize = self.shapes[..i].iter().map(|s| units_in(s, self.rand_level)).sum();
        let units = &self.assignment[offset..];
        let shape = &self.shapes[i];
        let mut out = Vec::with_capacity(shape.n_obs());
        let mut provider = 0;
        for (f, fac) in shape.facilities().iter().enumerate() {
            for &n in fac {
                for _ in 0..n {
                    let u = match self.rand_level {
                        RandLevel::Patient => out.len(),
                        RandLevel::Provider => provider,
                        RandLevel::Facility => f,
                        RandLevel::Cluster => 0,
                    };
                    out.push(units[u]);
                }
                provider += 1;
            }
        }
        out
    }
}

/// Balanced layout when `panel` is `None`; otherwise `dims.l()` is replaced
/// by a gamma draw for every provider.
pub fn make_layout(
    n: usize,
    dims: BlockDims,
    pi_c: f64,
    rand_level: RandLevel,
    panel: Option<&PanelSizeModel>,
    seed: u64,
) -> Result<TrialLayout> {
    if n == 0 {
        return Err(Error::invalid("n_clusters", "must be positive"));
    }
    if !(pi_c > 0.0 && pi_c < 1.0) {
        return Err(Error::invalid("pi_c", format!("{pi_c} not in (0, 1)")));
    }
    let shapes: Vec<ClusterShape> = match panel {
        None => vec![ClusterShape::balanced(&dims); n],
        Some(model) => {
            let mut rng = stream(seed, PANEL_STREAM);
            (0..n)
                .map(|_| {
                    let f = (0..dims.m())
                        .map(|_| (0..dims.k()).map(|_| model.draw(&mut rng)).collect())
                        .collect();
                    ClusterShape::new(f)
                })
                .collect::<Result<_>>()?
        }
    };
    let total: usize = shapes.iter().map(|s| units_in(s, rand_level)).sum();
    let controls = pi_c * total as f64;
    if (controls - controls.round()).abs() > 1e-9 || controls.round() < 1.0 || controls.round() >= total as f64 {
        return Err(Error::Allocation(format!(
            "pi_c = {pi_c} does not split {total} randomized units into two nonempty arms"
        )));
    }
    let controls = controls.round() as usize;
    let mut assignment: Vec<u8> = (0..total).map(|u| u8::from(u >= controls)).collect();
    assignment.shuffle(&mut stream(seed, ASSIGNMENT_STREAM));
    Ok(TrialLayout {
        pi_c,
        rand_level,
        shapes,
        assignment,
    })
}

/// Outcomes of one cluster in Kronecker order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub shape: ClusterShape,
    pub treat: Vec<u8>,
    pub y: Vec<f64>,
}

/// Parameters a dataset was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub alphas: [f64; 3],
    pub p0: f64,
    pub p1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub clusters: Vec<ClusterData>,
    pub rand_level: RandLevel,
    pub pi_c: f64,
    pub seed: u64,
    pub params: Option<GenerationParams>,
}

impl Dataset {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.y.len()).sum()
    }

    pub fn is_balanced(&self) -> bool {
        match self.clusters.first().and_then(|c| c.shape.as_balanced()) {
            Some(d) => self.clusters.iter().all(|c| c.shape.as_balanced() == Some(d)),
            None => false,
        }
    }
}

/// `b_j = R_<j^{-1} r_j` for every observation of a shape.
#[derive(Debug)]
struct Coefficients {
    rows: Vec<Vec<f64>>,
}

impl Coefficients {
    fn new(alphas: [f64; 3], shape: &ClusterShape) -> Result<Self> {
        NestedCorrelation::new(alphas, shape)?;
        let n = shape.n_obs();
        if n > MAX_CLUSTER_OBS {
            return Err(Error::CapExceeded {
                order: n,
                cap: MAX_CLUSTER_OBS,
            });
        }
        let r = shape.dense_correlation(alphas);
        let mut chol: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for j in 0..n {
            // z = L^{-1} r_j
            let mut z = vec![0.0; j];
            for i in 0..j {
                let s: f64 = (0..i).map(|k| chol[i][k] * z[k]).sum();
                z[i] = (r[(i, j)] - s) / chol[i][i];
            }
            // b = L'^{-1} z
            let mut b = z.clone();
            for i in (0..j).rev() {
                let s: f64 = (i + 1..j).map(|k| chol[k][i] * b[k]).sum();
                b[i] = (z[i] - s) / chol[i][i];
            }
            let d = 1.0 - z.iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0) {
                return Err(Error::Singular(format!("correlation factor breaks down at observation {j}")));
            }
            z.push(d.sqrt());
            chol.push(z);
            rows.push(b);
        }
        Ok(Self { rows })
    }
}

/// Binary outcome generator with a per-shape coefficient cache; safe to
/// share across threads.
#[derive(Debug)]
pub struct BinaryGenerator {
    alphas: [f64; 3],
    p0: f64,
    p1: f64,
    cache: Mutex<HashMap<ClusterShape, Arc<Coefficients>>>,
}

impl BinaryGenerator {
    pub fn new(corr: &CorrelationParams, p0: f64, p1: f64) -> Result<Self> {
        for (name, p) in [("p0", p0), ("p1", p1)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(name, format!("{p} not in (0, 1)")));
            }
        }
        Ok(Self {
            alphas: corr.alphas(),
            p0,
            p1,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            alphas: self.alphas,
            p0: self.p0,
            p1: self.p1,
        }
    }

    fn coefficients(&self, shape: &ClusterShape) -> Result<Arc<Coefficients>> {
        if let Some(c) = self.cache.lock().expect("cache lock").get(shape) {
            return Ok(Arc::clone(c));
        }
        let c = Arc::new(Coefficients::new(self.alphas, shape)?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(shape.clone(), Arc::clone(&c));
        Ok(c)
    }

    fn mean(&self, treat: u8) -> f64 {
        if treat == 1 {
            self.p1
        } else {
            self.p0
        }
    }

    /// Worst case over all outcome histories: fails on the first
    /// observation whose conditional mean can leave `[0, 1]`.
    pub fn check_range(&self, shape: &ClusterShape, treat: &[u8]) -> Result<()> {
        let coef = self.coefficients(shape)?;
        let mu: Vec<f64> = treat.iter().map(|&t| self.mean(t)).collect();
        let sd: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).sqrt()).collect();
        for (j, b) in coef.rows.iter().enumerate() {
            let (mut lo, mut hi) = (0.0, 0.0);
            for (k, &bk) in b.iter().enumerate() {
                let up = bk * (1.0 - mu[k]) / sd[k];
                let down = -bk * mu[k] / sd[k];
                lo += up.min(down);
                hi += up.max(down);
            }
            for value in [mu[j] + sd[j] * lo, mu[j] + sd[j] * hi] {
                if !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&value) {
                    return Err(Error::OutOfRange {
                        cluster: 0,
                        index: j,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    /// Range check on every cluster of a layout.
    pub fn check_layout(&self, layout: &TrialLayout) -> Result<()> {
        for i in 0..layout.n_clusters() {
            self.check_range(&layout.shapes[i], &layout.treatment(i))
                .map_err(|e| match e {
                    Error::OutOfRange { index, value, .. } => Error::OutOfRange {
                        cluster: i,
                        index,
                        value,
                    },
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn generate_cluster<R: Rng + ?Sized>(
        &self,
        cluster: usize,
        shape: &ClusterShape,
        treat: &[u8],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let coef = self.coefficients(shape)?;
        let n = shape.n_obs();
        let mut y = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for (j, &t) in treat.iter().enumerate().take(n) {
            let mu = self.mean(t);
            let sd = (mu * (1.0 - mu)).sqrt();
            let shift: f64 = coef.rows[j].iter().zip(&e).map(|(b, e)| b * e).sum();
            let lambda = mu + sd * shift;
            if !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&lambda) {
                return Err(Error::OutOfRange {
                    cluster,
                    index: j,
                    value: lambda,
                });
            }
            let u: f64 = rng.random();
            let v = if u < lambda { 1.0 } else { 0.0 };
            y.push(v);
            e.push((v - mu) / sd);
        }
        Ok(y)
    }

    /// Cluster `i` draws from stream `i` of `seed`.
    pub fn generate(&self, layout: &TrialLayout, seed: u64) -> Result<Dataset> {
        let clusters = (0..layout.n_clusters())
            .map(|i| {
                let shape = &layout.shapes[i];
                let treat = layout.treatment(i);
                let y = self.generate_cluster(i, shape, &treat, &mut stream(seed, i as u64))?;
                Ok(ClusterData {
                    shape: shape.clone(),
                    treat,
                    y,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            clusters,
            rand_level: layout.rand_level,
            pi_c: layout.pi_c,
            seed,
            params: Some(self.params()),
        })
    }
}

pub fn generate_binary(layout: &TrialLayout, corr: &CorrelationParams, p0: f64, p1: f64, seed: u64) -> Result<Dataset> {
    BinaryGenerator::new(corr, p0, p1)?.generate(layout, seed)
}

pub const DATASET_HEADER: &str = "cluster,facility,provider,patient,treat,y";

/// Writes `# key=value` header lines followed by one CSV row per
/// observation.
pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "# nestcrt dataset v1")?;
    writeln!(
        out,
        "# rand_level={} pi_c={} seed={}",
        u8::from(data.rand_level),
        data.pi_c,
        data.seed
    )?;
    if let Some(p) = data.params {
        writeln!(
            out,
            "# alpha={},{},{} p0={} p1={}",
            p.alphas[0], p.alphas[1], p.alphas[2], p.p0, p.p1
        )?;
    }
    writeln!(out, "{DATASET_HEADER}")?;
    for (i, c) in data.clusters.iter().enumerate() {
        for (j, (f, p, l)) in c.shape.indices().enumerate() {
            writeln!(out, "{i},{f},{p},{l},{},{}", c.treat[j], c.y[j])?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct Row {
    cluster: usize,
    facility: usize,
    provider: usize,
    patient: usize,
    treat: u8,
    y: f64,
}

fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`")))
}

/// Reads the format of [`write_dataset`]. Rows must appear in Kronecker
/// order.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut rand_level = RandLevel::Cluster;
    let mut pi_c = 0.5;
    let mut seed = 0;
    let mut alphas = None;
    let (mut p0, mut p1) = (None, None);
    let mut body = String::new();
    for line in input.lines() {
        let line = line?;
        if let Some(h) = line.strip_prefix('#') {
            for kv in h.split_whitespace() {
                let Some((k, v)) = kv.split_once('=') else { continue };
                match k {
                    "rand_level" => rand_level = RandLevel::try_from(parse_field::<u8>(k, v)?)?,
                    "pi_c" => pi_c = parse_field(k, v)?,
                    "seed" => seed = parse_field(k, v)?,
                    "p0" => p0 = Some(parse_field(k, v)?),
                    "p1" => p1 = Some(parse_field(k, v)?),
                    "alpha" => {
                        let a: Vec<f64> = v.split(',').map(|x| parse_field(k, x)).collect::<Result<_>>()?;
                        let a: [f64; 3] = a
                            .try_into()
                            .map_err(|_| Error::Parse("alpha needs three values".into()))?;
                        alphas = Some(a);
                    }
                    _ => {}
                }
            }
        } else {
            body.push_str(&line);
            body.push('\n');
        }
    }

    let mut clusters: Vec<ClusterData> = Vec::new();
    let mut facilities: Vec<Vec<usize>> = Vec::new();
    let mut treat = Vec::new();
    let mut y = Vec::new();
    let mut last: Option<(usize, usize, usize, usize)> = None;
    let mut flush = |facilities: &mut Vec<Vec<usize>>, treat: &mut Vec<u8>, y: &mut Vec<f64>| -> Result<()> {
        clusters.push(ClusterData {
            shape: ClusterShape::new(std::mem::take(facilities))?,
            treat: std::mem::take(treat),
            y: std::mem::take(y),
        });
        Ok(())
    };
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let r = row.map_err(|e| Error::Parse(e.to_string()))?;
        let bad = || Error::Parse(format!("row {} is out of order", line + 1));
        match last {
            None if (r.cluster, r.facility, r.provider, r.patient) != (0, 0, 0, 0) => return Err(bad()),
            None => facilities.push(vec![1]),
            Some((c, f, p, l)) => {
                if r.cluster == c + 1 && (r.facility, r.provider, r.patient) == (0, 0, 0) {
                    flush(&mut facilities, &mut treat, &mut y)?;
                    facilities.push(vec![1]);
                } else if r.cluster != c {
                    return Err(bad());
                } else if r.facility == f + 1 && (r.provider, r.patient) == (0, 0) {
                    facilities.push(vec![1]);
                } else if r.facility != f {
                    return Err(bad());
                } else if r.provider == p + 1 && r.patient == 0 {
                    facilities.last_mut().unwrap().push(1);
                } else if r.provider == p && r.patient == l + 1 {
                    *facilities.last_mut().unwrap().last_mut().unwrap() += 1;
                } else {
                    return Err(bad());
                }
            }
        }
        if r.treat > 1 {
            return Err(Error::Parse(format!("treat must be 0 or 1, got {}", r.treat)));
        }
        treat.push(r.treat);
        y.push(r.y);
        last = Some((r.cluster, r.facility, r.provider, r.patient));
    }
    if last.is_some() {
        flush(&mut facilities, &mut treat, &mut y)?;
    }
    let params = match (alphas, p0, p1) {
        (Some(alphas), Some(p0), Some(p1)) => Some(GenerationParams { alphas, p0, p1 }),
        _ => None,
    };
    Ok(Dataset {
        clusters,
        rand_level,
        pi_c,
        seed,
        params,
    })
}
