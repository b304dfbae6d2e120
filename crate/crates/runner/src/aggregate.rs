//! Across-seed summaries of cumulative regret.

use hyperagent_core::agents::RegretTrace;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub agent: String,
    /// Steps completed (1-based).
    pub t: usize,
    pub mean_cum: f64,
    /// Standard error of the mean across seeds; 0 for a single seed.
    pub se: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Percentile with linear interpolation between order statistics. `sorted` must be ascending.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One row per step for one agent. Traces must share a horizon.
pub fn aggregate(agent: &str, traces: &[&RegretTrace]) -> Vec<AggregateRow> {
    let horizon = traces.iter().map(|t| t.horizon()).min().unwrap_or(0);
    debug_assert!(traces.iter().all(|t| t.horizon() == horizon));
    let mut column = Vec::with_capacity(traces.len());
    (0..horizon)
        .map(|t| {
            column.clear();
            column.extend(traces.iter().map(|tr| tr.cumulative[t]));
            let (mean_cum, se) = mean_se(&column);
            column.sort_by(f64::total_cmp);
            AggregateRow {
                agent: agent.to_string(),
                t: t + 1,
                mean_cum,
                se,
                p10: percentile(&column, 0.1),
                p90: percentile(&column, 0.9),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.1) - 1.4).abs() < 1e-12);
        assert!((percentile(&v, 0.9) - 4.6).abs() < 1e-12);
    }

    #[test]
    fn mean_se_small_cases() {
        assert_eq!(mean_se(&[3.0]), (3.0, 0.0));
        let (m, se) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}
