//! CSV and JSON grid reports. One CSV row per (scenario, analysis,
//! estimator); a scenario that failed gets a single row with `error` set.

use serde::{Deserialize, Serialize};

use super::ScenarioResult;
use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 25] = [
    "scenario",
    "hypothesis",
    "p0",
    "p1",
    "alpha0",
    "alpha1",
    "alpha2",
    "m",
    "k",
    "l",
    "cv",
    "n",
    "replications",
    "seed",
    "analysis",
    "converged",
    "convergence_rate",
    "estimator",
    "rejections",
    "rate",
    "mc_se",
    "predicted_power",
    "deviation",
    "acceptable",
    "error",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub scenario: String,
    pub seed: u64,
    pub result: Option<ScenarioResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub master_seed: u64,
    pub entries: Vec<GridEntry>,
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

impl GridReport {
    pub fn results(&self) -> impl Iterator<Item = &ScenarioResult> {
        self.entries.iter().filter_map(|e| e.result.as_ref())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(REPORT_COLUMNS).map_err(err)?;
        for entry in &self.entries {
            let Some(r) = &entry.result else {
                let mut row = vec![String::new(); REPORT_COLUMNS.len()];
                row[0] = entry.scenario.clone();
                row[13] = entry.seed.to_string();
                row[24] = entry.error.clone().unwrap_or_default();
                w.write_record(&row).map_err(err)?;
                continue;
            };
            let s = &r.scenario;
            let hypothesis = match r.hypothesis {
                super::Hypothesis::Null => "null",
                super::Hypothesis::Alternative => "alternative",
            };
            for a in &r.analyses {
                for e in &a.estimators {
                    let row = [
                        s.name.clone(),
                        hypothesis.to_string(),
                        s.p0.to_string(),
                        s.p1.to_string(),
                        r.alphas[0].to_string(),
                        r.alphas[1].to_string(),
                        r.alphas[2].to_string(),
                        s.dims[0].to_string(),
                        s.dims[1].to_string(),
                        s.dims[2].to_string(),
                        s.cv.to_string(),
                        s.n_clusters.to_string(),
                        s.replications.to_string(),
                        r.seed.to_string(),
                        a.analysis.name().to_string(),
                        a.converged.to_string(),
                        num(a.convergence_rate),
                        e.estimator.name().to_string(),
                        e.rejections.to_string(),
                        num(e.rate),
                        num(e.mc_se),
                        r.predicted_power.map(num).unwrap_or_default(),
                        num(e.deviation),
                        e.acceptable.to_string(),
                        String::new(),
                    ];
                    w.write_record(&row).map_err(err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}
