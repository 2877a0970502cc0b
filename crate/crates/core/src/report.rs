//! Table and scan-curve CSVs built from experiment results, plus posterior
//! and selection summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{x_grid, PooledPosterior, SelectionReport};
use crate::simulation::{Arm, ArmSummary, ExperimentResult, MetricStat};

/// Serializes rows (first row is the header) to a CSV string.
pub fn csv_string(rows: &[Vec<String>]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wr.write_record(r).map_err(|e| Error::csv("<report>", e))?;
    }
    let bytes = wr.into_inner().map_err(|e| Error::io("<report>", e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Schema(e.to_string()))
}

/// What the parenthesized value in a table cell shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorBar {
    /// Sample sd over replications divided by `sqrt(R)`.
    #[default]
    Se,
    /// Sample sd over replications.
    Sd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableReport {
    /// Rounded `mean (err)` cells; SEN, SPE and F1 are scaled by 100.
    pub formatted: String,
    /// Unrounded means, standard errors and sds.
    pub raw: String,
}

fn bar(s: &MetricStat, n: usize, kind: ErrorBar) -> f64 {
    match kind {
        ErrorBar::Se => s.se,
        ErrorBar::Sd => s.se * (n as f64).sqrt(),
    }
}

fn cell(s: &MetricStat, n: usize, scale: f64, kind: ErrorBar) -> String {
    format!("{:.1} ({:.1})", s.mean * scale, bar(s, n, kind) * scale)
}

/// One row per arm in `arms` order. Arms absent from the result (or with
/// no successful replication) get blank cells.
pub fn table_report(result: &ExperimentResult, arms: &[Arm], kind: ErrorBar) -> Result<TableReport> {
    let mut fmt = vec![["Model", "x%", "SEN", "SPE", "F1", "MSE", "n"].map(String::from).to_vec()];
    let mut raw = vec![[
        "arm", "label", "n", "x_pct", "sen_mean", "sen_se", "spe_mean", "spe_se", "f1_mean", "f1_se", "mse_mean", "mse_se",
    ]
    .map(String::from)
    .to_vec()];
    for &arm in arms {
        let s: Option<&ArmSummary> = result.summary(arm).filter(|s| s.n > 0);
        let Some(s) = s else {
            let mut row = vec![arm.label().to_string()];
            row.extend(std::iter::repeat_n(String::new(), 6));
            fmt.push(row);
            let mut row = vec![snake(arm), arm.label().to_string()];
            row.extend(std::iter::repeat_n(String::new(), 10));
            raw.push(row);
            continue;
        };
        let x = s.x_pct.map(|x| format!("{x:.1}")).unwrap_or_default();
        fmt.push(vec![
            s.label.clone(),
            x,
            cell(&s.sen, s.n, 100.0, kind),
            cell(&s.spe, s.n, 100.0, kind),
            cell(&s.f1, s.n, 100.0, kind),
            cell(&s.mse, s.n, 1.0, kind),
            s.n.to_string(),
        ]);
        let mut row = vec![
            snake(arm),
            s.label.clone(),
            s.n.to_string(),
            s.x_pct.map(|x| x.to_string()).unwrap_or_default(),
        ];
        for m in [&s.sen, &s.spe, &s.f1, &s.mse] {
            row.push(m.mean.to_string());
            row.push(m.se.to_string());
        }
        raw.push(row);
    }
    Ok(TableReport {
        formatted: csv_string(&fmt)?,
        raw: csv_string(&raw)?,
    })
}

fn snake(arm: Arm) -> String {
    serde_json::to_value(arm)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Averages over replications of one scan arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCurve {
    pub arm: Arm,
    pub x_pct: Vec<f64>,
    pub sen: Vec<f64>,
    pub spe: Vec<f64>,
    pub distance: Vec<f64>,
    /// Index of the largest mean distance; ties go to the larger x%.
    pub best: usize,
    pub replications: usize,
}

impl ScanCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut rows = vec![["x_pct", "mean_sen", "mean_spe", "mean_distance", "best"].map(String::from).to_vec()];
        for i in 0..self.x_pct.len() {
            rows.push(vec![
                self.x_pct[i].to_string(),
                self.sen[i].to_string(),
                self.spe[i].to_string(),
                self.distance[i].to_string(),
                u8::from(i == self.best).to_string(),
            ]);
        }
        csv_string(&rows)
    }
}

/// Scan curves for every scan arm present in `result`, in arm order.
/// Arms with no successful replication are skipped.
pub fn scan_curve_report(result: &ExperimentResult) -> Vec<ScanCurve> {
    let xs = x_grid();
    let mut out = Vec::new();
    for s in &result.summaries {
        if !s.arm.is_scan() {
            continue;
        }
        let scans: Vec<_> = result
            .replications
            .iter()
            .filter_map(|l| l.outcome(s.arm))
            .filter(|o| o.scan.len() == xs.len())
            .collect();
        if scans.is_empty() {
            continue;
        }
        let r = scans.len() as f64;
        let mean = |i: usize, f: &dyn Fn(f64, f64) -> f64| {
            scans.iter().map(|o| f(o.scan[i].metrics.sen, o.scan[i].metrics.spe)).sum::<f64>() / r
        };
        let sen: Vec<f64> = (0..xs.len()).map(|i| mean(i, &|a, _| a)).collect();
        let spe: Vec<f64> = (0..xs.len()).map(|i| mean(i, &|_, b| b)).collect();
        let distance: Vec<f64> = (0..xs.len()).map(|i| mean(i, &|a, b| (a * a + b * b).sqrt())).collect();
        let mut best = 0;
        for i in 1..distance.len() {
            if distance[i] >= distance[best] {
                best = i;
            }
        }
        out.push(ScanCurve {
            arm: s.arm,
            x_pct: xs.clone(),
            sen,
            spe,
            distance,
            best,
            replications: scans.len(),
        });
    }
    out
}

/// Per-covariate posterior summary on the original scale.
pub fn posterior_summary_csv(pooled: &PooledPosterior) -> Result<String> {
    let mut rows = vec![["covariate", "mean", "sd", "q2.5", "median", "q97.5", "inclusion"]
        .map(String::from)
        .to_vec()];
    for j in 0..pooled.p() {
        let s = &pooled.samples[j];
        let m = pooled.mean(j);
        let sd = if s.len() > 1 {
            (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(vec![
            pooled.column_names[j].clone(),
            m.to_string(),
            sd.to_string(),
            pooled.quantile(j, 0.025).to_string(),
            pooled.quantile(j, 0.5).to_string(),
            pooled.quantile(j, 0.975).to_string(),
            pooled.inclusion.as_ref().map(|v| v[j].to_string()).unwrap_or_default(),
        ]);
    }
    csv_string(&rows)
}

/// Flat CSV view of a selection report.
pub fn selection_csv(report: &SelectionReport) -> Result<String> {
    let mut rows = vec![["covariate", "selected", "estimate", "lo", "hi"].map(String::from).to_vec()];
    for c in &report.covariates {
        rows.push(vec![
            c.name.clone(),
            u8::from(c.selected).to_string(),
            c.estimate.to_string(),
            c.lo.to_string(),
            c.hi.to_string(),
        ]);
    }
    csv_string(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{aggregate, ArmOutcome, ExperimentConfig, MetricsRow, ReplicationLog, ScanMetrics};

    fn row(sen: f64, spe: f64) -> MetricsRow {
        MetricsRow {
            sen,
            spe,
            f1: 0.5,
            mse: 1.25,
            selected_count: 3,
        }
    }

    fn log(r: usize, arms: Vec<ArmOutcome>) -> ReplicationLog {
        ReplicationLog {
            replication: r,
            seed: r as u64,
            complete_cases: 60,
            arms,
            error: None,
        }
    }

    fn fixed(arm: Arm, m: MetricsRow) -> ArmOutcome {
        ArmOutcome {
            arm,
            metrics: Some(m),
            scan: vec![],
            converged: None,
            max_rhat: None,
            error: None,
        }
    }

    fn scanned(arm: Arm, f: impl Fn(f64) -> MetricsRow) -> ArmOutcome {
        ArmOutcome {
            arm,
            metrics: None,
            scan: x_grid().into_iter().map(|x| ScanMetrics { x_pct: x, metrics: f(x) }).collect(),
            converged: Some(true),
            max_rhat: Some(1.0),
            error: None,
        }
    }

    fn cfg(arms: Vec<Arm>) -> ExperimentConfig {
        ExperimentConfig {
            arms,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn two_replications_mean_and_se() {
        let c = cfg(vec![Arm::MiLasso, Arm::Lasso]);
        let res = aggregate(
            &c,
            vec![log(0, vec![fixed(Arm::MiLasso, row(0.9, 0.947))]), log(1, vec![fixed(Arm::MiLasso, row(1.0, 0.947))])],
        );
        let t = table_report(&res, &[Arm::MiLasso, Arm::Lasso], ErrorBar::Se).unwrap();
        let lines: Vec<&str> = t.formatted.lines().collect();
        assert_eq!(lines[0], "Model,x%,SEN,SPE,F1,MSE,n");
        assert_eq!(lines[1], "MI-LASSO,,95.0 (5.0),94.7 (0.0),50.0 (0.0),1.2 (0.0),2");
        // missing arm stays blank
        assert_eq!(lines[2], "LASSO,,,,,,");
        let raw: Vec<&str> = t.raw.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(&raw[..4], &["mi_lasso", "MI-LASSO", "2", ""]);
        let (m, se): (f64, f64) = (raw[4].parse().unwrap(), raw[5].parse().unwrap());
        assert!((m - 0.95).abs() < 1e-12 && (se - 0.05).abs() < 1e-12);

        let sd = table_report(&res, &[Arm::MiLasso], ErrorBar::Sd).unwrap();
        assert!(sd.formatted.contains("95.0 (7.1)"));
    }

    #[test]
    fn single_replication_curve_equals_values() {
        let c = cfg(vec![Arm::Horseshoe]);
        let f = |x: f64| row(1.0 - x / 200.0, 0.5 + x / 200.0);
        let res = aggregate(&c, vec![log(0, vec![scanned(Arm::Horseshoe, f)])]);
        let curves = scan_curve_report(&res);
        assert_eq!(curves.len(), 1);
        let cv = &curves[0];
        assert_eq!(cv.x_pct.len(), 19);
        for (i, x) in cv.x_pct.iter().enumerate() {
            assert_eq!(cv.sen[i], f(*x).sen);
            assert_eq!(cv.spe[i], f(*x).spe);
        }
        let csv = cv.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 20);
        assert_eq!(csv.lines().filter(|l| l.ends_with(",1")).count(), 1);
    }

    #[test]
    fn curve_argmax_ties_go_to_larger_x() {
        let c = cfg(vec![Arm::Ard]);
        let res = aggregate(&c, vec![log(0, vec![scanned(Arm::Ard, |_| row(0.8, 0.8))])]);
        assert_eq!(scan_curve_report(&res)[0].best, 18);
    }
}
