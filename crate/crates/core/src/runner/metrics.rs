use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Reference entries smaller than this are excluded from ratios.
const REF_EPS: f64 = 1e-8;

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub episode: usize,
    pub eval_return: f64,
    pub eval_success: u8,
    pub method: String,
    pub seed: u64,
}

fn normalized(pbrl: &[f64], reference: &[f64], what: &str) -> Result<f64> {
    if pbrl.len() != reference.len() {
        return Err(Error::Metric(format!("{what}: series lengths differ ({} vs {})", pbrl.len(), reference.len())));
    }
    let kept: Vec<f64> = pbrl.iter().zip(reference).filter(|(_, r)| r.abs() >= REF_EPS).map(|(p, r)| p / r).collect();
    let dropped = pbrl.len() - kept.len();
    if dropped > 0 {
        log::info!("{what}: excluded {dropped} of {} episodes with zero reference", pbrl.len());
    }
    if kept.is_empty() {
        return Err(Error::Metric(format!("{what}: every reference entry is zero")));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Mean per-episode ratio of PbRL to reference returns.
pub fn normalized_return(pbrl: &[f64], reference: &[f64]) -> Result<f64> {
    normalized(pbrl, reference, "normalized return")
}

/// Mean per-episode ratio of PbRL to reference success indicators.
pub fn normalized_success(pbrl: &[f64], reference: &[f64]) -> Result<f64> {
    normalized(pbrl, reference, "normalized success")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-tailed paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Metric("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 1.0, df });
        }
        log::warn!("paired differences have zero variance; reporting infinite t");
        return Ok(TTest { t: mean.signum() * f64::INFINITY, p: 0.0, df });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Metric(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(TTest { t, p, df })
}
