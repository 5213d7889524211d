//! End-to-end KeyDoor experiments shared by A5, A6 and A7.

use std::time::Instant;

use hindsight_prior::oracle::OracleKind;
use hindsight_prior::reward::RewardConfig;
use hindsight_prior::runner::{paired_ttest, report, train, Method, RunConfig, RunOptions, RunSummary, EVAL_SEEDS};

use super::Verdict;

/// Desk-scale KeyDoor settings used by the experiment criteria.
pub fn desk_config(method: Method, oracle: OracleKind, seed: u64) -> RunConfig {
    RunConfig {
        method,
        oracle,
        seed,
        reward: RewardConfig { hidden: vec![64, 64, 64], ..Default::default() },
        ..Default::default()
    }
}

struct Arm {
    label: &'static str,
    method: Method,
    oracle: OracleKind,
}

fn arms() -> Vec<Arm> {
    vec![
        Arm { label: "reference", method: Method::Reference, oracle: OracleKind::Perfect },
        Arm { label: "prior", method: Method::Prior, oracle: OracleKind::Perfect },
        Arm { label: "rvar", method: Method::Rvar, oracle: OracleKind::Perfect },
        Arm { label: "none", method: Method::None, oracle: OracleKind::Perfect },
        Arm { label: "prior@mistake:0.2", method: Method::Prior, oracle: OracleKind::Mistake { epsilon: 0.2 } },
        Arm { label: "prior-only", method: Method::PriorOnly, oracle: OracleKind::Perfect },
    ]
}

fn per_seed(summaries: &[RunSummary], group: &str) -> Vec<Option<f64>> {
    let rep = report(summaries).expect("reference runs present");
    EVAL_SEEDS
        .iter()
        .map(|&s| rep.runs.iter().find(|r| r.group == group && r.seed == s).and_then(|r| r.normalized_success))
        .collect()
}

fn mean(xs: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn run() -> Vec<Verdict> {
    let keep = std::env::var_os("ACCEPTANCE_OUT").map(std::path::PathBuf::from);
    let mut summaries = Vec::new();
    for arm in arms() {
        for &seed in &EVAL_SEEDS {
            let cfg = desk_config(arm.method, arm.oracle, seed);
            let started = Instant::now();
            let out_dir = keep.as_ref().map(|d| d.join(format!("{}-{seed}", arm.label.replace([':', '@'], "_"))));
            let record = train(&cfg, RunOptions { out_dir, ..Default::default() }).expect("run completes");
            let s = RunSummary::from_rows(&cfg, record.metrics);
            let last: Vec<_> = s.rows.iter().rev().take(cfg.eval_episodes).collect();
            eprintln!(
                "  {:<18} seed {seed}: final success {:.2} ({:.0}s)",
                arm.label,
                last.iter().map(|r| r.eval_success as f64).sum::<f64>() / last.len().max(1) as f64,
                started.elapsed().as_secs_f64()
            );
            summaries.push(s);
        }
    }

    let prior = per_seed(&summaries, "prior");
    let rvar = per_seed(&summaries, "rvar");
    let none = per_seed(&summaries, "none");
    let noisy = per_seed(&summaries, "prior@mistake:0.2");
    let only = per_seed(&summaries, "prior-only");
    let (mp, mr, mn, mm, mo) = (mean(&prior), mean(&rvar), mean(&none), mean(&noisy), mean(&only));
    let fill = |xs: &[Option<f64>]| xs.iter().map(|x| x.unwrap_or(0.0)).collect::<Vec<_>>();
    let test = paired_ttest(&fill(&prior), &fill(&none));
    let (t, p) = test.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.t, r.p));

    vec![
        Verdict {
            id: "A5",
            pass: mp >= mr && mr >= mn && t > 0.0 && p < 0.1,
            detail: format!("normalized success prior {mp:.3}, rvar {mr:.3}, none {mn:.3}; prior vs none t = {t:.3}, p = {p:.4}"),
        },
        Verdict {
            id: "A6",
            pass: mm >= mn,
            detail: format!("normalized success prior with 20% mistakes {mm:.3} vs none (perfect) {mn:.3}"),
        },
        Verdict {
            id: "A7",
            pass: mo < 0.2 * mp,
            detail: format!("normalized success prior-only {mo:.3} vs 0.2 x prior = {:.3}", 0.2 * mp),
        },
    ]
}
