use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::metrics::{normalized_return, normalized_success, paired_ttest, MetricRow};
use crate::error::{Error, Result};

/// Evaluation history of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub method: Method,
    pub seed: u64,
    pub oracle: String,
    pub rows: Vec<MetricRow>,
}

impl RunSummary {
    pub fn from_rows(config: &RunConfig, rows: Vec<MetricRow>) -> Self {
        RunSummary { env: config.env.name().into(), method: config.method, seed: config.seed, oracle: config.oracle.to_string(), rows }
    }

    /// Label used to group runs: the method, plus the oracle when it is not perfect.
    pub fn group(&self) -> String {
        if self.oracle == "perfect" || self.method == Method::Reference {
            self.method.to_string()
        } else {
            format!("{}@{}", self.method, self.oracle)
        }
    }

    fn keyed(&self) -> BTreeMap<(usize, usize), &MetricRow> {
        self.rows.iter().map(|r| ((r.step, r.episode), r)).collect()
    }
}

/// Reads `config.json` and `metrics.csv` from a run directory.
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let config = RunConfig::load(&dir.join("config.json"))?;
    let mut reader = csv::Reader::from_path(dir.join("metrics.csv"))?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
    Ok(RunSummary::from_rows(&config, rows))
}

/// Normalized scores of one run against the reference run with the same seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRun {
    pub group: String,
    pub env: String,
    pub seed: u64,
    pub normalized_return: Option<f64>,
    pub normalized_success: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub group: String,
    pub env: String,
    pub runs: usize,
    pub mean_normalized_return: Option<f64>,
    pub mean_normalized_success: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub env: String,
    pub a: String,
    pub b: String,
    pub metric: String,
    pub pairs: usize,
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<NormalizedRun>,
    pub methods: Vec<MethodSummary>,
    pub tests: Vec<PairwiseTest>,
}

fn aligned(run: &RunSummary, reference: &RunSummary) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let ref_rows = reference.keyed();
    let (mut pr, mut rr, mut ps, mut rs) = (vec![], vec![], vec![], vec![]);
    for (key, row) in run.keyed() {
        if let Some(r) = ref_rows.get(&key) {
            pr.push(row.eval_return);
            rr.push(r.eval_return);
            ps.push(row.eval_success as f64);
            rs.push(r.eval_success as f64);
        }
    }
    (pr, rr, ps, rs)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Normalizes every run against its seed's reference run, then compares
/// every pair of method groups with paired t-tests over shared seeds.
pub fn report(runs: &[RunSummary]) -> Result<Report> {
    let references: BTreeMap<(String, u64), &RunSummary> =
        runs.iter().filter(|r| r.method == Method::Reference).map(|r| ((r.env.clone(), r.seed), r)).collect();
    if references.is_empty() {
        return Err(Error::Metric("no reference runs to normalize against".into()));
    }
    let mut out = Report::default();
    for run in runs.iter().filter(|r| r.method != Method::Reference) {
        let Some(reference) = references.get(&(run.env.clone(), run.seed)) else {
            log::warn!("no reference run for {} seed {}; skipped", run.env, run.seed);
            continue;
        };
        let (pr, rr, ps, rs) = aligned(run, reference);
        let ok = |r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{} seed {}: {e}", run.group(), run.seed);
                None
            }
        };
        out.runs.push(NormalizedRun {
            group: run.group(),
            env: run.env.clone(),
            seed: run.seed,
            normalized_return: ok(normalized_return(&pr, &rr)),
            normalized_success: ok(normalized_success(&ps, &rs)),
        });
    }

    let mut groups: BTreeMap<(String, String), Vec<&NormalizedRun>> = BTreeMap::new();
    for r in &out.runs {
        groups.entry((r.env.clone(), r.group.clone())).or_default().push(r);
    }
    for ((env, group), rs) in &groups {
        let nr: Vec<f64> = rs.iter().filter_map(|r| r.normalized_return).collect();
        let ns: Vec<f64> = rs.iter().filter_map(|r| r.normalized_success).collect();
        out.methods.push(MethodSummary {
            group: group.clone(),
            env: env.clone(),
            runs: rs.len(),
            mean_normalized_return: mean(&nr),
            mean_normalized_success: mean(&ns),
        });
    }

    let keys: Vec<&(String, String)> = groups.keys().collect();
    for (i, ka) in keys.iter().enumerate() {
        for kb in &keys[i + 1..] {
            if ka.0 != kb.0 {
                continue;
            }
            for metric in ["return", "success"] {
                let pick = |r: &NormalizedRun| if metric == "return" { r.normalized_return } else { r.normalized_success };
                let by_seed: BTreeMap<u64, f64> = groups[*kb].iter().filter_map(|r| Some((r.seed, pick(r)?))).collect();
                let (a, b): (Vec<f64>, Vec<f64>) =
                    groups[*ka].iter().filter_map(|r| Some((pick(r)?, *by_seed.get(&r.seed)?))).unzip();
                match paired_ttest(&a, &b) {
                    Ok(t) => out.tests.push(PairwiseTest {
                        env: ka.0.clone(),
                        a: ka.1.clone(),
                        b: kb.1.clone(),
                        metric: metric.into(),
                        pairs: a.len(),
                        t: t.t,
                        p: t.p,
                        df: t.df,
                    }),
                    Err(e) => log::info!("{} vs {} ({metric}): {e}", ka.1, kb.1),
                }
            }
        }
    }
    Ok(out)
}

impl Report {
    /// Writes `methods.csv`, `runs.csv`, `ttests.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("methods.csv"))?;
        for m in &self.methods {
            w.serialize(m)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
        for r in &self.runs {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("ttests.csv"))?;
        for t in &self.tests {
            w.serialize(t)?;
        }
        w.flush()?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
