//! Tidy long-format plot data: one `(x, series, y_mean, y_stderr)` row per point.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::sweep::{fmt_f64, SummaryRow};
use crate::error::{Error, Result};

pub const PLOT_COLUMNS: [&str; 4] = ["x", "series", "y_mean", "y_stderr"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// MSE against `p_c`, one series per SNR.
    PcCurve,
    /// MSE against SNR, one series per `p_c`.
    SnrCurve,
    /// Test error of the WFALD ensemble and the WFedAvg last iterate against SNR.
    BaselineCompare,
}

impl Figure {
    pub const ALL: [Figure; 3] = [Figure::PcCurve, Figure::SnrCurve, Figure::BaselineCompare];

    pub fn name(self) -> &'static str {
        match self {
            Figure::PcCurve => "pc_curve",
            Figure::SnrCurve => "snr_curve",
            Figure::BaselineCompare => "baseline_compare",
        }
    }

    pub fn file_name(self) -> String {
        format!("fig_{}.csv", self.name())
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("figure", format!("unknown figure `{s}`; expected pc_curve, snr_curve or baseline_compare")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub series: String,
    pub y_mean: f64,
    pub y_stderr: f64,
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Picks the sampler whose MSE curves are plotted: WFALD when present.
fn mse_algorithm(rows: &[SummaryRow]) -> &str {
    if rows.iter().any(|r| r.algorithm == "wfald") {
        "wfald"
    } else {
        &rows[0].algorithm
    }
}

/// Builds the points of `figure` from summary rows.
pub fn plot_points(rows: &[SummaryRow], figure: Figure) -> Result<Vec<PlotPoint>> {
    if rows.is_empty() {
        return Err(Error::config("plotdata", "the sweep result has no rows"));
    }
    let mut points = Vec::new();
    match figure {
        Figure::PcCurve | Figure::SnrCurve => {
            let alg = mse_algorithm(rows);
            let mut sel: Vec<&SummaryRow> = rows.iter().filter(|r| r.algorithm == alg).collect();
            let by_pc = figure == Figure::PcCurve;
            sel.sort_by(|a, b| {
                let (sa, xa) = if by_pc { (a.snr_db, a.p_c) } else { (a.p_c, a.snr_db) };
                let (sb, xb) = if by_pc { (b.snr_db, b.p_c) } else { (b.p_c, b.snr_db) };
                sa.total_cmp(&sb).then(xa.total_cmp(&xb))
            });
            for r in sel {
                let (x, series) = if by_pc {
                    (r.p_c, format!("snr_db={}", fmt_f64(r.snr_db)))
                } else {
                    (r.snr_db, format!("p_c={}", fmt_f64(r.p_c)))
                };
                points.push(PlotPoint {
                    x,
                    series,
                    y_mean: r.mse_mean,
                    y_stderr: r.mse_se,
                });
            }
        }
        Figure::BaselineCompare => {
            for alg in ["wfald", "wfedavg"] {
                if !rows.iter().any(|r| r.algorithm == alg) {
                    return Err(Error::config(
                        "sweep.algorithms",
                        format!("baseline_compare needs `{alg}` rows in the sweep"),
                    ));
                }
            }
            let several_pc = distinct(rows.iter().map(|r| r.p_c)).len() > 1;
            for alg in ["wfald", "wfedavg"] {
                let mut sel: Vec<&SummaryRow> = rows.iter().filter(|r| r.algorithm == alg).collect();
                sel.sort_by(|a, b| a.p_c.total_cmp(&b.p_c).then(a.snr_db.total_cmp(&b.snr_db)));
                for r in sel {
                    let base = if alg == "wfald" { "wfald_ensemble" } else { "wfedavg_last_iterate" };
                    let series = if several_pc {
                        format!("{base} p_c={}", fmt_f64(r.p_c))
                    } else {
                        base.to_string()
                    };
                    let (y_mean, y_stderr) = if alg == "wfald" {
                        (r.test_ensemble_mean, r.test_ensemble_se)
                    } else {
                        (r.test_frequentist_mean, r.test_frequentist_se)
                    };
                    points.push(PlotPoint {
                        x: r.snr_db,
                        series,
                        y_mean,
                        y_stderr,
                    });
                }
            }
        }
    }
    Ok(points)
}

/// Writes `fig_<name>.csv` for `figure` into `dir`.
pub fn emit_plotdata(rows: &[SummaryRow], figure: Figure, dir: &Path) -> Result<PathBuf> {
    let points = plot_points(rows, figure)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(figure.file_name());
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(PLOT_COLUMNS).map_err(|e| Error::csv(&path, e))?;
    for p in &points {
        w.write_record([fmt_f64(p.x), p.series.clone(), fmt_f64(p.y_mean), fmt_f64(p.y_stderr)])
            .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alg: &str, p_c: f64, snr_db: f64, mse: f64) -> SummaryRow {
        SummaryRow {
            algorithm: alg.into(),
            p_c,
            snr_db,
            replicates: 2,
            mse_mean: mse,
            mse_se: 0.1,
            test_ensemble_mean: 1.0,
            test_ensemble_se: 0.01,
            test_frequentist_mean: 1.5,
            test_frequentist_se: 0.02,
            w2_sq: None,
            bound: None,
            bound_literal: None,
            v_theta_mean: 0.0,
            v_theta_se: 0.0,
            rhs27: None,
            v_c_mean: 0.0,
            v_c_se: 0.0,
            rhs26: None,
            aggregation_rounds_mean: 0.0,
            power_limited_fraction: 0.0,
            power_checks: 0,
            power_violations: 0,
        }
    }

    #[test]
    fn pc_curve_series_are_snr_levels() {
        let rows = vec![row("wfald", 0.5, 10.0, 2.0), row("wfald", 0.1, 10.0, 3.0), row("wfald", 0.1, 40.0, 1.0)];
        let pts = plot_points(&rows, Figure::PcCurve).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].series, "snr_db=10");
        assert_eq!((pts[0].x, pts[1].x), (0.1, 0.5));
        assert_eq!(pts[2].series, "snr_db=40");
    }

    #[test]
    fn snr_curve_series_are_rates() {
        let rows = vec![row("wfald", 0.5, 10.0, 2.0), row("wfald", 0.5, 40.0, 1.0)];
        let pts = plot_points(&rows, Figure::SnrCurve).unwrap();
        assert!(pts.iter().all(|p| p.series == "p_c=0.5"));
        assert_eq!(pts[1].x, 40.0);
    }

    #[test]
    fn baseline_compare_needs_both_samplers() {
        let rows = vec![row("wfald", 0.5, 10.0, 2.0)];
        assert!(matches!(plot_points(&rows, Figure::BaselineCompare), Err(Error::Config { .. })));
        let rows = vec![row("wfald", 0.5, 10.0, 2.0), row("wfedavg", 0.5, 10.0, 2.0)];
        let pts = plot_points(&rows, Figure::BaselineCompare).unwrap();
        assert_eq!(pts[0].series, "wfald_ensemble");
        assert_eq!(pts[0].y_mean, 1.0);
        assert_eq!(pts[1].series, "wfedavg_last_iterate");
        assert_eq!(pts[1].y_mean, 1.5);
    }

    #[test]
    fn empty_result_is_an_error() {
        assert!(plot_points(&[], Figure::PcCurve).is_err());
        assert!("fig5".parse::<Figure>().is_err());
        assert_eq!("snr_curve".parse::<Figure>().unwrap(), Figure::SnrCurve);
    }
}
