//! Bootstrap distributions of mean precision and recall, summarized as box
//! plots and percentile intervals.
//!
//! Iteration `i` draws from a ChaCha20 generator seeded with the configured
//! seed on stream `i`, so results are identical whether iterations run
//! serially or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{CaseScore, KindScore, MetricsError};
use crate::stats;

/// Identifier recorded in every result so runs can be replicated.
pub const RNG_ALGORITHM: &str = "chacha20/seed_from_u64/stream=iteration";

pub const METRIC_NAMES: [&str; 6] = [
    "icd10_precision",
    "icd10_recall",
    "cpt_precision",
    "cpt_recall",
    "modifier_precision",
    "modifier_recall",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    /// Cases drawn per iteration; `None` draws as many as the cohort has.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 1000,
            sample_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub mean: f64,
    pub sd: f64,
    /// 2.5th and 97.5th percentiles of the iteration means.
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme values within 1.5 IQR of the quartiles.
    pub lo_whisker: f64,
    pub hi_whisker: f64,
    pub outliers: Vec<f64>,
}

impl BoxSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let sorted = stats::sorted_copy(values);
        let q1 = stats::quantile_sorted(&sorted, 0.25);
        let q3 = stats::quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = || sorted.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence);
        BoxSummary {
            mean: stats::mean(values),
            sd: stats::sample_sd(values),
            ci_lower: stats::quantile_sorted(&sorted, 0.025),
            ci_upper: stats::quantile_sorted(&sorted, 0.975),
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
            q1,
            median: stats::quantile_sorted(&sorted, 0.5),
            q3,
            lo_whisker: inside().next().unwrap_or(q1),
            hi_whisker: inside().next_back().unwrap_or(q3),
            outliers: sorted.iter().copied().filter(|v| *v < lo_fence || *v > hi_fence).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDistribution {
    pub metric: String,
    /// Mean over the full cohort.
    pub point_estimate: f64,
    /// One mean per iteration, in iteration order.
    pub means: Vec<f64>,
    pub summary: BoxSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub algorithm: String,
    pub seed: u64,
    pub iterations: usize,
    pub sample_size: usize,
    pub cohort_size: usize,
    pub metrics: Vec<MetricDistribution>,
}

impl BootstrapResult {
    pub fn metric(&self, name: &str) -> Option<&MetricDistribution> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

fn metric_values(c: &CaseScore) -> [f64; 6] {
    let pr = |k: &KindScore| [k.precision, k.recall];
    let [a, b] = pr(&c.icd10);
    let [cc, d] = pr(&c.cpt);
    let [e, f] = pr(&c.modifier);
    [a, b, cc, d, e, f]
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BootstrapError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("iterations and sample size must be at least 1")]
    BadConfig,
}

pub fn bootstrap_metrics(cases: &[CaseScore], config: &BootstrapConfig) -> Result<BootstrapResult, BootstrapError> {
    if cases.is_empty() {
        return Err(MetricsError::EmptyCohort.into());
    }
    let sample_size = config.sample_size.unwrap_or(cases.len());
    if config.iterations == 0 || sample_size == 0 {
        return Err(BootstrapError::BadConfig);
    }
    let values: Vec<[f64; 6]> = cases.iter().map(metric_values).collect();
    let n = values.len();

    let per_iteration: Vec<[f64; 6]> = (0..config.iterations)
        .into_par_iter()
        .map(|iteration| {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(iteration as u64);
            let mut sums = [0f64; 6];
            for _ in 0..sample_size {
                let row = &values[rng.random_range(0..n)];
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            sums.map(|s| s / sample_size as f64)
        })
        .collect();

    let metrics = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let means: Vec<f64> = per_iteration.iter().map(|it| it[m]).collect();
            let column: Vec<f64> = values.iter().map(|v| v[m]).collect();
            MetricDistribution {
                metric: name.to_string(),
                point_estimate: stats::mean(&column),
                summary: BoxSummary::from_values(&means),
                means,
            }
        })
        .collect();

    Ok(BootstrapResult {
        algorithm: RNG_ALGORITHM.to_string(),
        seed: config.seed,
        iterations: config.iterations,
        sample_size,
        cohort_size: n,
        metrics,
    })
}

/// Box-plot rows: `metric,model,q1,median,q3,lo_whisker,hi_whisker,outliers`,
/// with outliers `;`-separated in one field.
pub fn boxplot_csv<'a>(results: impl IntoIterator<Item = (&'a str, &'a BootstrapResult)>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "model", "q1", "median", "q3", "lo_whisker", "hi_whisker", "outliers"])
        .unwrap();
    for (model, result) in results {
        for m in &result.metrics {
            let s = &m.summary;
            let outliers: Vec<String> = s.outliers.iter().map(|v| format!("{v:.6}")).collect();
            w.write_record([
                m.metric.as_str(),
                model,
                &format!("{:.6}", s.q1),
                &format!("{:.6}", s.median),
                &format!("{:.6}", s.q3),
                &format!("{:.6}", s.lo_whisker),
                &format!("{:.6}", s.hi_whisker),
                &outliers.join(";"),
            ])
            .unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
