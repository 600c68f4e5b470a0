//! Per-job metrics, summary statistics, and finish-time fairness.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::workload::Category;

use super::SimError;

pub const METRICS_CSV_HEADER: &str =
    "job_id,category,submit_s,start_s,complete_s,jct_s,restarts,rho";

/// One completed job's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct JobMetrics {
    pub job_id: String,
    pub category: Category,
    pub submit_s: u64,
    pub start_s: Option<u64>,
    pub complete_s: u64,
    pub jct_s: f64,
    pub restarts: u32,
    /// Finish-time fairness: shared JCT over isolated JCT.
    pub rho: Option<f64>,
}

/// Aggregates reported alongside the per-job rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    #[serde(skip)]
    pub num_jobs: usize,
    pub avg_jct: f64,
    pub p99_jct: f64,
    pub makespan: f64,
    pub avg_rho: Option<f64>,
    pub max_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<JobMetrics>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn new(rows: Vec<JobMetrics>) -> Self {
        let mut report = MetricsReport {
            rows,
            summary: Summary {
                num_jobs: 0,
                avg_jct: 0.0,
                p99_jct: 0.0,
                makespan: 0.0,
                avg_rho: None,
                max_rho: None,
            },
        };
        report.recompute_summary();
        report
    }

    pub fn recompute_summary(&mut self) {
        let n = self.rows.len();
        self.summary.num_jobs = n;
        if n == 0 {
            return;
        }
        let mut jcts: Vec<f64> = self.rows.iter().map(|r| r.jct_s).collect();
        jcts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        self.summary.avg_jct = jcts.iter().sum::<f64>() / n as f64;
        let p99_idx = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
        self.summary.p99_jct = jcts[p99_idx];
        let first_submit = self.rows.iter().map(|r| r.submit_s).min().unwrap_or(0);
        let last_complete = self.rows.iter().map(|r| r.complete_s).max().unwrap_or(0);
        self.summary.makespan = last_complete.saturating_sub(first_submit) as f64;
        let rhos: Vec<f64> = self.rows.iter().filter_map(|r| r.rho).collect();
        if rhos.len() == self.rows.len() {
            self.summary.avg_rho = Some(rhos.iter().sum::<f64>() / rhos.len() as f64);
            self.summary.max_rho = rhos.iter().copied().fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
        }
    }

    /// CSV rows ordered by job id, with the fixed header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let start = r
                .start_s
                .map(|s| s.to_string())
                .unwrap_or_default();
            let rho = r.rho.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.1},{},{}\n",
                r.job_id, r.category, r.submit_s, start, r.complete_s, r.jct_s, r.restarts, rho
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

/// Fill per-job finish-time fairness from isolated JCTs: rho = shared JCT /
/// isolated JCT. Every job must have an isolated measurement.
pub fn finish_time_fairness(
    report: &mut MetricsReport,
    isolated_jcts: &BTreeMap<String, f64>,
) -> Result<Vec<f64>, SimError> {
    let mut rhos = Vec::with_capacity(report.rows.len());
    for row in &mut report.rows {
        let iso = isolated_jcts
            .get(&row.job_id)
            .copied()
            .ok_or_else(|| SimError::MissingIsolated(row.job_id.clone()))?;
        let rho = row.jct_s / iso.max(1e-9);
        row.rho = Some(rho);
        rhos.push(rho);
    }
    report.recompute_summary();
    Ok(rhos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, submit: u64, complete: u64) -> JobMetrics {
        JobMetrics {
            job_id: id.to_string(),
            category: Category::Small,
            submit_s: submit,
            start_s: Some(submit),
            complete_s: complete,
            jct_s: (complete - submit) as f64,
            restarts: 0,
            rho: None,
        }
    }

    #[test]
    fn summary_statistics() {
        let report = MetricsReport::new(vec![
            row("a", 0, 100),
            row("b", 50, 350),
            row("c", 60, 160),
        ]);
        assert_eq!(report.summary.avg_jct, (100.0 + 300.0 + 100.0) / 3.0);
        assert_eq!(report.summary.p99_jct, 300.0);
        assert_eq!(report.summary.makespan, 350.0);
        assert!(report.summary.avg_rho.is_none());
    }

    #[test]
    fn fairness_fills_rho_and_flags_missing_jobs() {
        let mut report = MetricsReport::new(vec![row("a", 0, 100), row("b", 0, 300)]);
        let isolated = BTreeMap::from([("a".to_string(), 200.0), ("b".to_string(), 150.0)]);
        let rhos = finish_time_fairness(&mut report, &isolated).unwrap();
        assert_eq!(rhos, vec![0.5, 2.0]);
        assert_eq!(report.summary.max_rho, Some(2.0));
        assert_eq!(report.summary.avg_rho, Some(1.25));

        let mut report = MetricsReport::new(vec![row("zz", 0, 10)]);
        assert!(matches!(
            finish_time_fairness(&mut report, &isolated),
            Err(SimError::MissingIsolated(_))
        ));
    }

    #[test]
    fn csv_shape_is_stable() {
        let mut report = MetricsReport::new(vec![row("a", 0, 100)]);
        report.rows[0].rho = Some(0.75);
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
        assert_eq!(lines.next(), Some("a,small,0,0,100,100.0,0,0.750000"));
    }
}
