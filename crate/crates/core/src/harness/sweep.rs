//! Grid sweeps: replicate scheduling, aggregation and persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::SweepSpec;
use crate::analysis::{self, mean_se, BoundInputs, BoundTerms};
use crate::channel::ChannelRound;
use crate::error::{Error, Result};
use crate::model::RegularityConstants;
use crate::protocol::{Problem, RunConfig, RunOptions, RunResult, SamplerRegistry};
use crate::rng::{replicate_seed, Purpose};

/// Version of the CSV and manifest layouts written by [`run_sweep`].
pub const SCHEMA_VERSION: u32 = 1;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const CHANNEL_FILE: &str = "channel_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Replicate-aggregated metrics of one `(algorithm, p_c, snr)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: String,
    pub p_c: f64,
    pub snr_db: f64,
    pub replicates: usize,
    pub mse_mean: f64,
    pub mse_se: f64,
    pub test_ensemble_mean: f64,
    pub test_ensemble_se: f64,
    pub test_frequentist_mean: f64,
    pub test_frequentist_se: f64,
    /// Estimated squared W2 distance of the averaged particle at `S` to the posterior.
    pub w2_sq: Option<f64>,
    pub bound: Option<f64>,
    pub bound_literal: Option<f64>,
    /// Iteration-averaged drift, mean and standard error over replicates.
    pub v_theta_mean: f64,
    pub v_theta_se: f64,
    pub rhs27: Option<f64>,
    pub v_c_mean: f64,
    pub v_c_se: f64,
    pub rhs26: Option<f64>,
    pub aggregation_rounds_mean: f64,
    pub power_limited_fraction: f64,
    pub power_checks: usize,
    pub power_violations: usize,
}

pub const SUMMARY_COLUMNS: [&str; 23] = [
    "algorithm",
    "p_c",
    "snr_db",
    "replicates",
    "mse_mean",
    "mse_se",
    "test_ensemble_mean",
    "test_ensemble_se",
    "test_frequentist_mean",
    "test_frequentist_se",
    "w2_sq",
    "bound",
    "bound_literal",
    "v_theta_mean",
    "v_theta_se",
    "rhs27",
    "v_c_mean",
    "v_c_se",
    "rhs26",
    "aggregation_rounds_mean",
    "power_limited_fraction",
    "power_checks",
    "power_violations",
];

/// Replicate-aggregated metrics of one grid point at iteration `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub algorithm: String,
    pub p_c: f64,
    pub snr_db: f64,
    pub s: usize,
    /// MSE of the running post-burn-in averages; empty for `s <= S_b`.
    pub mse: Option<f64>,
    pub mse_se: Option<f64>,
    pub w2_sq: Option<f64>,
    /// Bound with the realized per-round residual noise.
    pub bound: Option<f64>,
    /// Bound with one constant residual noise level.
    pub bound_literal: Option<f64>,
    /// Drift of the particles entering iteration `s`; empty at `s = S`.
    pub v_theta: Option<f64>,
    pub v_c: Option<f64>,
    pub rhs26: Option<f64>,
    pub rhs27: Option<f64>,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
}

pub const TRACE_COLUMNS: [&str; 15] = [
    "algorithm",
    "p_c",
    "snr_db",
    "s",
    "mse",
    "mse_se",
    "w2_sq",
    "bound",
    "bound_literal",
    "v_theta",
    "v_c",
    "rhs26",
    "rhs27",
    "beta",
    "alpha",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPoint {
    pub algorithm: String,
    pub p_c: f64,
    pub snr_db: String,
    /// Seed-stream index of the `(p_c, snr)` pair, shared by all algorithms.
    pub point_index: u64,
    pub seeds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seed_derivation: String,
    pub spec: serde_json::Value,
    pub constants: RegularityConstants,
    pub w2_init: f64,
    pub points: Vec<ManifestPoint>,
    pub files: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SummaryRow>,
    pub trace: Vec<TraceRow>,
    pub channel_log: Vec<(String, f64, f64, ChannelRound)>,
    pub manifest: Manifest,
}

/// Formats a float so that it round-trips and never depends on locale or platform.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else if x == 0.0 || (1e-4..1e15).contains(&x.abs()) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Lowercase hex SHA-256 of the spec's canonical JSON (output paths and worker count excluded).
pub fn config_hash(spec: &SweepSpec) -> Result<String> {
    let json = serde_json::to_string(spec)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Seed-stream index of grid pair `(pc_index, snr_index)`.
pub fn point_index(spec: &SweepSpec, pc_index: usize, snr_index: usize) -> u64 {
    (pc_index * spec.snr_db_grid.len() + snr_index) as u64
}

/// Runs `replicates` replicates of `config` in parallel on `pool`.
pub fn run_replicates(
    problem: &Problem,
    config: &RunConfig,
    point: u64,
    replicates: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<RunResult>> {
    let registry = SamplerRegistry::with_builtin();
    let sampler = registry.get(&config.algorithm)?;
    let results: Vec<Result<RunResult>> = pool.install(|| {
        (0..replicates as u64)
            .into_par_iter()
            .map(|r| {
                let seed = replicate_seed(config.master_seed, point, r);
                sampler
                    .run(problem, config, seed, RunOptions::default())
                    .map_err(|e| Error::RunFailed {
                        seed,
                        context: format!(
                            "{} p_c={} snr_db={} replicate {r}",
                            config.algorithm,
                            config.p_c,
                            fmt_f64(config.snr_db)
                        ),
                        source: Box::new(e),
                    })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Bound at iteration `s` for a given residual-noise sequence, `None` if vacuous.
pub fn bound_at(problem: &Problem, config: &RunConfig, beta: &[f64], s: usize) -> Option<BoundTerms> {
    let inputs = BoundInputs::from_constants(
        &problem.constants,
        config.eta,
        config.p_c,
        config.data.devices,
        config.data.dim,
        beta[..s.min(beta.len())].to_vec(),
        problem.w2_init,
        s,
    );
    analysis::theorem1_bound(&inputs).ok()
}

/// Realized residual noise per round averaged over replicates (zero on local rounds).
pub fn realized_beta(results: &[RunResult]) -> Vec<f64> {
    let n = results[0].iterations.len();
    (0..n)
        .map(|j| results.iter().map(|r| r.iterations[j].beta).sum::<f64>() / results.len() as f64)
        .collect()
}

/// Constant residual-noise level for the bound at iteration `s`: the average
/// residual noise over aggregation rounds before `s`.
pub fn literal_beta(results: &[RunResult], s: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for r in results {
        for rec in r.iterations.iter().take(s).filter(|rec| rec.aggregated) {
            sum += rec.beta;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Squared W2 between the across-replicate Gaussian summary of the averaged
/// particle at `s` and the posterior.
pub fn w2_at(problem: &Problem, results: &[RunResult], s: usize) -> Option<f64> {
    let samples: Vec<DVector<f64>> = results.iter().map(|r| r.mean_trajectory[s].clone()).collect();
    let summary = analysis::empirical_gaussian(&samples).ok()?;
    analysis::w2_gaussian(&summary, &problem.posterior).ok()
}

fn opt(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Summary row and trace rows of one grid point.
pub fn summarize(
    problem: &Problem,
    config: &RunConfig,
    results: &[RunResult],
    trace_stride: usize,
) -> Result<(SummaryRow, Vec<TraceRow>)> {
    if results.is_empty() {
        return Err(Error::invalid("no replicates to summarize"));
    }
    let s_total = config.iterations;
    let collect = |f: &dyn Fn(&RunResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let (mse_mean, mse_se) = mean_se(&collect(&|r| r.metrics.mse));
    let (test_ensemble_mean, test_ensemble_se) = mean_se(&collect(&|r| r.metrics.test_error_ensemble));
    let (test_frequentist_mean, test_frequentist_se) = mean_se(&collect(&|r| r.metrics.test_error_frequentist));
    let (v_theta_mean, v_theta_se) = mean_se(&collect(&|r| r.metrics.mean_v_theta));
    let (v_c_mean, v_c_se) = mean_se(&collect(&|r| r.metrics.mean_v_c));
    let (aggregation_rounds_mean, _) = mean_se(&collect(&|r| r.metrics.aggregation_rounds as f64));
    let power_checks: usize = results.iter().map(|r| r.metrics.power_checks).sum();
    let limited: usize = results.iter().map(|r| r.metrics.power_limited_rounds).sum();

    let beta = realized_beta(results);
    let drift = |v_theta: f64| {
        analysis::drift_bounds(
            &problem.constants,
            config.eta,
            config.p_c,
            config.data.devices,
            config.data.dim,
            v_theta,
        )
        .ok()
    };
    let bound_pair = |s: usize| {
        let realized = bound_at(problem, config, &beta, s).map(|b| b.total());
        let constant = vec![literal_beta(results, s); s];
        let literal = bound_at(problem, config, &constant, s).map(|b| b.total());
        (realized, literal)
    };

    let (bound, bound_literal) = bound_pair(s_total);
    let bounds = drift(v_theta_mean);
    let row = SummaryRow {
        algorithm: config.algorithm.clone(),
        p_c: config.p_c,
        snr_db: config.snr_db,
        replicates: results.len(),
        mse_mean,
        mse_se,
        test_ensemble_mean,
        test_ensemble_se,
        test_frequentist_mean,
        test_frequentist_se,
        w2_sq: w2_at(problem, results, s_total),
        bound,
        bound_literal,
        v_theta_mean,
        v_theta_se,
        rhs27: bounds.map(|b| b.rhs27),
        v_c_mean,
        v_c_se,
        rhs26: bounds.map(|b| b.rhs26),
        aggregation_rounds_mean,
        power_limited_fraction: if power_checks == 0 {
            0.0
        } else {
            limited as f64 / power_checks as f64
        },
        power_checks,
        power_violations: results.iter().map(|r| r.metrics.power_violations).sum(),
    };

    let mut trace = Vec::new();
    for s in (0..=s_total).filter(|s| s % trace_stride == 0 || *s == s_total) {
        let (mse, mse_se) = if s > config.burn_in {
            let vals: Vec<f64> = results.iter().filter_map(|r| r.running_mse[s - 1]).collect();
            let (m, se) = mean_se(&vals);
            (opt(m), opt(se))
        } else {
            (None, None)
        };
        let (v_theta, v_c, beta_s, alpha) = if s < s_total {
            let v_theta = results.iter().map(|r| r.iterations[s].v_theta).sum::<f64>() / results.len() as f64;
            let v_c = results.iter().map(|r| r.iterations[s].v_c).sum::<f64>() / results.len() as f64;
            let alphas: Vec<f64> = results.iter().filter_map(|r| r.iterations[s].alpha).collect();
            let alpha = (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64);
            (Some(v_theta), Some(v_c), Some(beta[s]), alpha)
        } else {
            (None, None, None, None)
        };
        let b = v_theta.and_then(drift);
        let (bound, bound_literal) = bound_pair(s);
        trace.push(TraceRow {
            algorithm: config.algorithm.clone(),
            p_c: config.p_c,
            snr_db: config.snr_db,
            s,
            mse,
            mse_se,
            w2_sq: w2_at(problem, results, s),
            bound,
            bound_literal,
            v_theta,
            v_c,
            rhs26: b.map(|b| b.rhs26),
            rhs27: b.map(|b| b.rhs27),
            beta: beta_s,
            alpha,
        });
    }
    Ok((row, trace))
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Runs every grid point in memory without writing files.
pub fn execute_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let problem = Problem::prepare(&spec.base)?;
    let pool = build_pool(spec.workers)?;
    let mut rows = Vec::with_capacity(spec.grid_len());
    let mut trace = Vec::new();
    let mut channel_log = Vec::new();
    let mut points = Vec::with_capacity(spec.grid_len());
    for algorithm in &spec.algorithms {
        for (i, &p_c) in spec.pc_grid.iter().enumerate() {
            for (j, &snr_db) in spec.snr_db_grid.iter().enumerate() {
                let config = RunConfig {
                    algorithm: algorithm.clone(),
                    p_c,
                    snr_db,
                    replicates: spec.replicates,
                    ..spec.base.clone()
                };
                config.validate()?;
                let point = point_index(spec, i, j);
                log::info!("{algorithm} p_c={p_c} snr_db={}: {} replicates", fmt_f64(snr_db), spec.replicates);
                let results = run_replicates(&problem, &config, point, spec.replicates, &pool)?;
                let (row, tr) = summarize(&problem, &config, &results, spec.trace_stride)?;
                rows.push(row);
                trace.extend(tr);
                channel_log.extend(
                    results[0]
                        .channel_log
                        .iter()
                        .map(|c| (algorithm.clone(), p_c, snr_db, c.clone())),
                );
                points.push(ManifestPoint {
                    algorithm: algorithm.clone(),
                    p_c,
                    snr_db: fmt_f64(snr_db),
                    point_index: point,
                    seeds: (0..spec.replicates as u64)
                        .map(|r| format!("{:#018x}", replicate_seed(spec.base.master_seed, point, r)))
                        .collect(),
                });
            }
        }
    }

    let mut files = BTreeMap::new();
    files.insert(SUMMARY_FILE.to_string(), SUMMARY_COLUMNS.iter().map(|c| c.to_string()).collect());
    files.insert(TRACE_FILE.to_string(), TRACE_COLUMNS.iter().map(|c| c.to_string()).collect());
    files.insert(CHANNEL_FILE.to_string(), channel_columns());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(spec)?,
        master_seed: spec.base.master_seed,
        seed_derivation: format!(
            "seed = mix(master_seed, [{}, point_index, replicate]) with mix(h, ws) = fold of \
             h <- splitmix64(h ^ splitmix64(w)) starting from splitmix64(master_seed); \
             point_index = pc_index * {} + snr_index; data, test sets and constants use \
             streams of master_seed itself",
            Purpose::Replicate as u64,
            spec.snr_db_grid.len()
        ),
        spec: serde_json::to_value(spec)?,
        constants: problem.constants.clone(),
        w2_init: problem.w2_init,
        points,
        files,
    };
    Ok(SweepResult {
        rows,
        trace,
        channel_log,
        manifest,
    })
}

fn channel_columns() -> Vec<String> {
    ["algorithm", "p_c"]
        .iter()
        .chain(ChannelRound::CSV_HEADER.iter())
        .map(|c| c.to_string())
        .collect()
}

fn summary_record(r: &SummaryRow) -> Vec<String> {
    vec![
        r.algorithm.clone(),
        fmt_f64(r.p_c),
        fmt_f64(r.snr_db),
        r.replicates.to_string(),
        fmt_f64(r.mse_mean),
        fmt_f64(r.mse_se),
        fmt_f64(r.test_ensemble_mean),
        fmt_f64(r.test_ensemble_se),
        fmt_f64(r.test_frequentist_mean),
        fmt_f64(r.test_frequentist_se),
        fmt_opt(r.w2_sq),
        fmt_opt(r.bound),
        fmt_opt(r.bound_literal),
        fmt_f64(r.v_theta_mean),
        fmt_f64(r.v_theta_se),
        fmt_opt(r.rhs27),
        fmt_f64(r.v_c_mean),
        fmt_f64(r.v_c_se),
        fmt_opt(r.rhs26),
        fmt_f64(r.aggregation_rounds_mean),
        fmt_f64(r.power_limited_fraction),
        r.power_checks.to_string(),
        r.power_violations.to_string(),
    ]
}

fn trace_record(r: &TraceRow) -> Vec<String> {
    vec![
        r.algorithm.clone(),
        fmt_f64(r.p_c),
        fmt_f64(r.snr_db),
        r.s.to_string(),
        fmt_opt(r.mse),
        fmt_opt(r.mse_se),
        fmt_opt(r.w2_sq),
        fmt_opt(r.bound),
        fmt_opt(r.bound_literal),
        fmt_opt(r.v_theta),
        fmt_opt(r.v_c),
        fmt_opt(r.rhs26),
        fmt_opt(r.rhs27),
        fmt_opt(r.beta),
        fmt_opt(r.alpha),
    ]
}

fn write_csv<T>(path: &Path, header: &[String], rows: &[T], record: impl Fn(&T) -> Vec<String>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(record(r)).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the CSV files and manifest of `result` into `dir`.
pub fn write_sweep(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let strings = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let summary = dir.join(SUMMARY_FILE);
    write_csv(&summary, &strings(&SUMMARY_COLUMNS), &result.rows, summary_record)?;
    let trace = dir.join(TRACE_FILE);
    write_csv(&trace, &strings(&TRACE_COLUMNS), &result.trace, trace_record)?;
    let channel = dir.join(CHANNEL_FILE);
    write_csv(&channel, &channel_columns(), &result.channel_log, |(a, p, _, c)| {
        let mut rec = vec![a.clone(), fmt_f64(*p)];
        rec.extend(c.csv_record());
        rec
    })?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&result.manifest)?;
    json.push('\n');
    fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    Ok(vec![summary, trace, channel, manifest])
}

/// Executes `spec` and writes its outputs to `spec.output_dir`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    let result = execute_sweep(spec)?;
    write_sweep(&result, &spec.output_dir)?;
    Ok(result)
}

/// Reads a summary CSV written by [`write_sweep`].
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}
