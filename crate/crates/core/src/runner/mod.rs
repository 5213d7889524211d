//! Experiment driver: configuration, the training loop, run directories,
//! the query service and cross-run reports.

mod config;
mod metrics;
mod report;
mod service;
mod train;

pub use config::{Method, RunConfig, EVAL_SEEDS};
pub use metrics::{normalized_return, normalized_success, paired_ttest, MetricRow, TTest};
pub use report::{load_run, report, MethodSummary, NormalizedRun, PairwiseTest, Report, RunSummary};
pub use service::QueryService;
pub use train::{train, RunOptions, RunRecord, SessionRecord};

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stream {
    Init,
    WorldModelInit,
    Env,
    Agent,
    Eval,
    Reward,
    Query,
    WorldModel,
    Oracle,
}

/// Seed of one stream; streams of one run never share a seed.
pub(crate) fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let k = (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut z = seed ^ k;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
