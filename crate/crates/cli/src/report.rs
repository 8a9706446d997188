//! Versioned JSON report and tidy CSV emission.

use otcr::metrics::EvalReport;
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA: &str = "otcr-report";
pub const REPORT_VERSION: u32 = 1;

/// Metric names accepted in sweeps and aggregates.
pub const METRICS: &[&str] = &[
    "pehe_sqrt", "pehe_sq", "ate_err", "att_err", "auuc", "rmse_f", "rmse_cf", "r2_f", "r2_cf",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub variant: String,
    pub seed: u64,
    /// λ actually used (selected when a grid was given).
    pub lambda: f64,
    /// `(λ, best validation AUUC)` per grid point; empty without a grid.
    pub lambda_scores: Vec<(f64, Option<f64>)>,
    pub sweep_value: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub unconverged_solves: usize,
    pub skipped_discrepancy_batches: usize,
    /// Training split.
    pub within: EvalReport,
    /// Test split.
    pub out_of_sample: EvalReport,
    pub train_seconds: f64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub sweep_value: Option<f64>,
    /// `within` or `out_of_sample`.
    pub split: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub std: f64,
    pub n: usize,
    /// Empirical 5% and 95% quantiles across seeds.
    pub q05: f64,
    pub q95: f64,
}

/// Paired-seed comparison of a variant against a baseline on one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: String,
    pub baseline: String,
    pub metric: String,
    /// Mean of `variant - baseline` over shared seeds.
    pub mean_delta: f64,
    /// Seeds where the variant is strictly lower.
    pub lower_in: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub n: usize,
    pub d: usize,
    pub repeats: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Student-t 99% interval for the mean.
    pub ci99: (f64, f64),
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub d: usize,
    /// Mean runtime strictly increases along the sorted N grid.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub schema_version: u32,
    pub command: String,
    pub library_version: String,
    pub config: serde_json::Value,
    pub rows: Vec<SeedRow>,
    pub aggregates: Vec<Aggregate>,
    pub comparisons: Vec<Comparison>,
    pub bench: Vec<BenchCell>,
    pub bench_monotone: Vec<MonotoneCheck>,
    pub total_seconds: f64,
}

impl RunReport {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            schema_version: REPORT_VERSION,
            command: command.into(),
            library_version: env!("CARGO_PKG_VERSION").into(),
            config,
            rows: Vec::new(),
            aggregates: Vec::new(),
            comparisons: Vec::new(),
            bench: Vec::new(),
            bench_monotone: Vec::new(),
            total_seconds: 0.0,
        }
    }

    /// Rows with their timing fields cleared, for reproducibility checks.
    pub fn metrics_only(&self) -> Vec<SeedRow> {
        self.rows
            .iter()
            .map(|r| SeedRow {
                train_seconds: 0.0,
                ..r.clone()
            })
            .collect()
    }
}

pub fn metric(rep: &EvalReport, name: &str) -> Option<f64> {
    rep.get(name)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Linear-interpolation quantile of unsorted `xs`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Mean, std and 5–95% band per (variant, sweep value, split, metric), in
/// first-appearance order.
pub fn aggregate(rows: &[SeedRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, Option<f64>)> = Vec::new();
    for r in rows {
        let k = (r.variant.clone(), r.sweep_value);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (variant, sv) in keys {
        let group: Vec<&SeedRow> = rows.iter().filter(|r| r.variant == variant && r.sweep_value == sv).collect();
        for split in ["within", "out_of_sample"] {
            for &m in METRICS {
                let xs: Vec<f64> = group
                    .iter()
                    .filter_map(|r| metric(if split == "within" { &r.within } else { &r.out_of_sample }, m))
                    .collect();
                if xs.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&xs);
                out.push(Aggregate {
                    variant: variant.clone(),
                    sweep_value: sv,
                    split: split.into(),
                    metric: m.into(),
                    mean,
                    std,
                    n: xs.len(),
                    q05: quantile(&xs, 0.05),
                    q95: quantile(&xs, 0.95),
                });
            }
        }
    }
    out
}

/// Paired out-of-sample comparison of every other variant against `baseline`.
pub fn compare(rows: &[SeedRow], baseline: &str, metric_name: &str) -> Vec<Comparison> {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if r.variant != baseline && !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut out = Vec::new();
    for v in variants {
        let mut deltas = Vec::new();
        for r in rows.iter().filter(|r| r.variant == v) {
            let base = rows.iter().find(|b| b.variant == baseline && b.seed == r.seed);
            if let Some(b) = base {
                if let (Some(x), Some(y)) = (metric(&r.out_of_sample, metric_name), metric(&b.out_of_sample, metric_name)) {
                    deltas.push(x - y);
                }
            }
        }
        if deltas.is_empty() {
            continue;
        }
        out.push(Comparison {
            variant: v.into(),
            baseline: baseline.into(),
            metric: metric_name.into(),
            mean_delta: deltas.iter().sum::<f64>() / deltas.len() as f64,
            lower_in: deltas.iter().filter(|d| **d < 0.0).count(),
            seeds: deltas.len(),
        });
    }
    out
}

/// Tidy sweep CSV: `param,value,seed,metric,score`, out-of-sample scores.
pub fn sweep_csv(param: &str, rows: &[SeedRow], metrics: &[String]) -> String {
    let mut s = String::from("param,value,seed,metric,score\n");
    for r in rows {
        for m in metrics {
            let score = metric(&r.out_of_sample, m).map_or(String::from("NA"), |v| format!("{v:?}"));
            s += &format!("{param},{:?},{},{m},{score}\n", r.sweep_value.unwrap_or(f64::NAN), r.seed);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert!((quantile(&[0.0, 10.0], 0.05) - 0.5).abs() < 1e-12);
    }
}
