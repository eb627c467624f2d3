use selftag::eval::MetricsReport;
use serde::Serialize;

/// Contents of `metrics.json`. No timestamps, so identical runs produce
/// identical files.
#[derive(Debug, Serialize)]
pub struct RunMetrics {
    pub mode: String,
    pub head: String,
    /// Hash of the shared config; per-seed hashes sit in `runs`.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub config_hash: String,
    pub best_iteration: usize,
    pub validation_f1: f64,
    pub test: MetricsReport,
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
