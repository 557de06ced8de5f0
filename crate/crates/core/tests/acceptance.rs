//! End-to-end acceptance checks, one `PASS`/`FAIL` line per criterion. Names given as arguments select criteria by substring.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use wfald::analysis::{mean_se, spearman};
use wfald::channel::{GainBranch, GainModel};
use wfald::harness::sweep::{bound_at, literal_beta, run_replicates, run_sweep, summarize, w2_at, CHANNEL_FILE, MANIFEST_FILE, SUMMARY_FILE, TRACE_FILE};
use wfald::harness::SweepSpec;
use wfald::model::{exact_posterior, Dataset};
use wfald::protocol::{run_sgld, DataConfig, Problem, RunConfig, RunResult};
use wfald::rng::{self, replicate_seed, Purpose};

use common::{max_z, moments};

fn report(id: u32, name: &str, passed: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let in_time = elapsed <= limit;
    let verdict = if passed && in_time { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {id:>2} {name}: {detail} ({:.2} s, limit {} s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(passed, "{name}: {detail}");
    assert!(in_time, "{name}: took {:.1} s", elapsed.as_secs_f64());
}

fn pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().build().unwrap()
}

fn replicates(problem: &Problem, cfg: &RunConfig, point: u64, n: usize) -> Vec<RunResult> {
    run_replicates(problem, cfg, point, n, &pool()).unwrap()
}

fn at(base: &RunConfig, algorithm: &str, p_c: f64, snr_db: f64) -> RunConfig {
    RunConfig {
        algorithm: algorithm.into(),
        p_c,
        snr_db,
        ..base.clone()
    }
}

/// Composite Simpson integral of `f` on `n` (even) intervals of `[a, b]`.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        sum += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn posterior_oracle() {
    let start = Instant::now();
    let mut rng = rng::stream(2024, Purpose::Data, 99);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let n = rng.random_range(1..=20);
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|xi| 1.5 * xi + rng.sample::<f64, _>(StandardNormal)).collect();
        let log_density = |t: f64| -0.5 * t * t - 0.5 * x.iter().zip(&y).map(|(a, b)| (b - a * t).powi(2)).sum::<f64>();
        let mode = (-4000..=4000)
            .map(|i| i as f64 * 0.005)
            .max_by(|a, b| log_density(*a).total_cmp(&log_density(*b)))
            .unwrap();
        let shift = log_density(mode);
        let density = |t: f64| (log_density(t) - shift).exp();
        let (lo, hi, m) = (mode - 15.0, mode + 15.0, 60_000);
        let z = simpson(density, lo, hi, m);
        let mean = simpson(|t| t * density(t), lo, hi, m) / z;
        let var = simpson(|t| (t - mean).powi(2) * density(t), lo, hi, m) / z;

        let data = Dataset::new(DMatrix::from_row_slice(1, n, &x), DVector::from_vec(y.clone()), None).unwrap();
        let post = exact_posterior(&data).unwrap();
        worst = worst
            .max((post.mean()[0] - mean).abs() / mean.abs())
            .max((post.covariance()[(0, 0)] - var).abs() / var);
    }
    report(
        1,
        "posterior_oracle",
        worst < 1e-6,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("max relative deviation {worst:.2e} over 5 problems"),
    );
}

/// Standard error of a chain average from non-overlapping batch means.
fn batch_se(values: &[f64], batches: usize) -> f64 {
    let size = values.len() / batches;
    let means: Vec<f64> = values.chunks_exact(size).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    mean_se(&means).1
}

fn centralized_sgld_calibration() {
    let start = Instant::now();
    let cfg = RunConfig {
        data: DataConfig {
            devices: 1,
            dim: 2,
            samples: 50,
            theta_star: vec![0.8, -0.4],
            noise_std: 1.0,
            test_per_device: 10,
        },
        algorithm: "sgld".into(),
        eta: 1e-3,
        p_b: 1.0,
        iterations: 50_000,
        burn_in: 10_000,
        master_seed: 3,
        ..RunConfig::default()
    };
    let problem = Problem::prepare(&cfg).unwrap();
    let run = run_sgld(&problem, &cfg, 17).unwrap();
    let chain = &run.mean_trajectory[cfg.burn_in + 1..];
    let mu = problem.posterior.mean();
    let sigma = problem.posterior.covariance();
    let n = chain.len() as f64;

    let mut worst_z: f64 = 0.0;
    let mut mean = [0.0; 2];
    for i in 0..2 {
        let xs: Vec<f64> = chain.iter().map(|t| t[i]).collect();
        mean[i] = xs.iter().sum::<f64>() / n;
        worst_z = worst_z.max((mean[i] - mu[i]).abs() / batch_se(&xs, 40));
    }
    let mut worst_rel: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let c = chain.iter().map(|t| (t[i] - mean[i]) * (t[j] - mean[j])).sum::<f64>() / (n - 1.0);
            let scale = if i == j { sigma[(i, i)] } else { (sigma[(i, i)] * sigma[(j, j)]).sqrt() };
            worst_rel = worst_rel.max((c - sigma[(i, j)]).abs() / scale);
        }
    }
    report(
        2,
        "centralized_sgld_calibration",
        worst_z <= 3.0 && worst_rel <= 0.10,
        start.elapsed(),
        Duration::from_secs(30),
        &format!("mean max |z| {worst_z:.2}, covariance max relative error {:.1}%", 100.0 * worst_rel),
    );
}

fn high_snr_equivalence() {
    let start = Instant::now();
    let base = RunConfig {
        snr_db: f64::INFINITY,
        ..RunConfig::default()
    };
    let problem = Problem::prepare(&base).unwrap();
    let reps = 500;
    let wireless = replicates(&problem, &at(&base, "wfald", base.p_c, base.snr_db), 0, reps);
    let noiseless = replicates(&problem, &at(&base, "fald", base.p_c, base.snr_db), 1, reps);
    let mut worst_z: f64 = 0.0;
    for s in [50, 100, 200] {
        let a: Vec<DVector<f64>> = wireless.iter().map(|r| r.mean_trajectory[s].clone()).collect();
        let b: Vec<DVector<f64>> = noiseless.iter().map(|r| r.mean_trajectory[s].clone()).collect();
        worst_z = worst_z.max(max_z(&moments(&a), &moments(&b)));
    }

    // With the noise level of a 30 dB channel at unit power, a million-fold
    // power budget leaves the constraint slack.
    let n0 = 1.0 / (base.data.dim as f64 * 1e3);
    let power = 1e6;
    let slack = RunConfig {
        power,
        snr_db: 10.0 * (power / (base.data.dim as f64 * n0)).log10(),
        ..base.clone()
    };
    let runs = replicates(&problem, &slack, 2, 20);
    let rounds: Vec<_> = runs.iter().flat_map(|r| &r.channel_log).collect();
    let all_zero = !rounds.is_empty()
        && rounds.iter().all(|c| c.beta == 0.0 && c.branch == GainBranch::Langevin)
        && runs.iter().flat_map(|r| &r.iterations).all(|i| i.beta == 0.0);

    report(
        3,
        "high_snr_equivalence",
        worst_z < 4.0 && all_zero,
        start.elapsed(),
        Duration::from_secs(120),
        &format!(
            "max |z| {worst_z:.2} over means and covariances at s = 50, 100, 200; \
             residual noise zero on {} slack rounds: {all_zero}",
            rounds.len()
        ),
    );
}

fn pc_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// MSE means over a `p_c` grid, with replicate streams offset by `sweep`.
fn mse_over_pc(problem: &Problem, base: &RunConfig, snr_db: f64, sweep: u64, reps: usize) -> Vec<f64> {
    pc_grid()
        .iter()
        .enumerate()
        .map(|(i, &p_c)| {
            let cfg = at(base, "wfald", p_c, snr_db);
            let results = replicates(problem, &cfg, sweep * 100 + i as u64, reps);
            mean_se(&results.iter().map(|r| r.metrics.mse).collect::<Vec<_>>()).0
        })
        .collect()
}

fn aggregation_rate_trend() {
    let start = Instant::now();
    let base = RunConfig::default();
    let problem = Problem::prepare(&base).unwrap();
    let high = mse_over_pc(&problem, &base, 40.0, 0, 100);
    let sp = spearman(&pc_grid(), &high).unwrap();
    let monotone = sp.rho <= 0.0 && sp.p_value < 0.05;

    let low_snr = -10.0;
    let mut interior = 0;
    let mut argmins = Vec::new();
    for sweep in 1..=10 {
        let mse = mse_over_pc(&problem, &base, low_snr, sweep, 100);
        let best = (0..mse.len()).min_by(|&a, &b| mse[a].total_cmp(&mse[b])).unwrap();
        argmins.push(pc_grid()[best]);
        if best + 1 < mse.len() {
            interior += 1;
        }
    }
    report(
        4,
        "aggregation_rate_trend",
        monotone && interior >= 8,
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "40 dB: Spearman rho {:.3}, p {:.2e}; {low_snr} dB: interior argmin in {interior}/10 sweeps {argmins:?}",
            sp.rho, sp.p_value
        ),
    );
}

fn snr_trend() {
    let start = Instant::now();
    let base = RunConfig::default();
    let problem = Problem::prepare(&base).unwrap();
    let snrs = [10.0, 15.0, 20.0, 25.0, 30.0, 40.0];
    let mut passed = true;
    let mut detail = Vec::new();
    for (i, p_c) in [0.5, 1.0].into_iter().enumerate() {
        let mse: Vec<f64> = snrs
            .iter()
            .enumerate()
            .map(|(j, &snr)| {
                let results = replicates(&problem, &at(&base, "wfald", p_c, snr), (i * snrs.len() + j) as u64, 100);
                mean_se(&results.iter().map(|r| r.metrics.mse).collect::<Vec<_>>()).0
            })
            .collect();
        let reference = mse[5];
        let flat = mse[3..].iter().all(|m| (m / reference - 1.0).abs() <= 0.10);
        let rise = mse[0] / mse[3];
        passed &= flat && rise >= 2.0;
        detail.push(format!(
            "p_c={p_c}: mse {:?}, flat from 40 to 25 dB: {flat}, 10 dB / 25 dB = {rise:.2}",
            mse.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>()
        ));
    }
    report(5, "snr_trend", passed, start.elapsed(), Duration::from_secs(300), &detail.join("; "));
}

fn low_snr_baseline_gain() {
    let start = Instant::now();
    let base = RunConfig::default();
    let problem = Problem::prepare(&base).unwrap();
    let mut passed = true;
    let mut detail = Vec::new();
    for (j, snr) in [5.0, 10.0, 15.0].into_iter().enumerate() {
        let ours = replicates(&problem, &at(&base, "wfald", base.p_c, snr), j as u64, 100);
        let theirs = replicates(&problem, &at(&base, "wfedavg", base.p_c, snr), j as u64, 100);
        let (a, sa) = mean_se(&ours.iter().map(|r| r.metrics.test_error_ensemble).collect::<Vec<_>>());
        let (b, sb) = mean_se(&theirs.iter().map(|r| r.metrics.test_error_frequentist).collect::<Vec<_>>());
        let sep = (b - a) / (sa * sa + sb * sb).sqrt();
        passed &= sep > 2.0;
        detail.push(format!("{snr} dB: ensemble {a:.5} vs last iterate {b:.5} ({sep:.1} SE)"));
    }
    report(6, "low_snr_baseline_gain", passed, start.elapsed(), Duration::from_secs(300), &detail.join("; "));
}

fn bound_soundness() {
    let start = Instant::now();
    let base = RunConfig::default();
    let problem = Problem::prepare(&base).unwrap();
    let mut checked = 0;
    let mut violations = Vec::new();
    let mut tightest = f64::INFINITY;
    for (i, p_c) in [0.2, 0.5, 1.0].into_iter().enumerate() {
        for (j, snr) in [-10.0, 10.0, 25.0, 40.0].into_iter().enumerate() {
            let cfg = at(&base, "wfald", p_c, snr);
            let results = replicates(&problem, &cfg, (i * 4 + j) as u64, 200);
            let beta = wfald::harness::sweep::realized_beta(&results);
            for s in [25, 50, 100, 200] {
                let w2 = w2_at(&problem, &results, s).unwrap();
                let realized = bound_at(&problem, &cfg, &beta, s).map(|b| b.total());
                let literal = bound_at(&problem, &cfg, &vec![literal_beta(&results, s); s], s).map(|b| b.total());
                for b in [realized, literal] {
                    checked += 1;
                    match b {
                        Some(b) if b >= w2 => tightest = tightest.min(b / w2),
                        _ => violations.push(format!("p_c={p_c} snr={snr} s={s}: {b:?} < {w2:.3e}")),
                    }
                }
            }
        }
    }
    report(
        7,
        "bound_soundness",
        violations.is_empty(),
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "{checked} comparisons, {} violations {violations:?}, smallest bound/W2^2 ratio {tightest:.1}",
            violations.len()
        ),
    );
}

fn drift_soundness() {
    let start = Instant::now();
    let base = RunConfig::default();
    let problem = Problem::prepare(&base).unwrap();
    let mut passed = true;
    let mut detail = Vec::new();
    for (i, p_c) in [0.2, 0.5, 1.0].into_iter().enumerate() {
        for algorithm in ["wfald", "fald"] {
            let cfg = at(&base, algorithm, p_c, base.snr_db);
            let results = replicates(&problem, &cfg, i as u64, 500);
            let (row, _) = summarize(&problem, &cfg, &results, cfg.iterations).unwrap();
            let (rhs27, rhs26) = (row.rhs27.unwrap(), row.rhs26.unwrap());
            let ok = row.v_theta_mean <= rhs27 && row.v_c_mean <= rhs26;
            passed &= ok;
            detail.push(format!(
                "{algorithm} p_c={p_c}: V_theta {:.3e} <= {rhs27:.3e}, V_c {:.3e} <= {rhs26:.3e}",
                row.v_theta_mean, row.v_c_mean
            ));
            if p_c == 1.0 {
                let after_aggregation = results.iter().all(|r| {
                    r.iterations.windows(2).all(|w| !w[0].aggregated || w[1].v_theta == 0.0)
                });
                passed &= after_aggregation;
                detail.push(format!("{algorithm} p_c=1: zero drift after every aggregation: {after_aggregation}"));
            }
        }
    }
    report(8, "drift_soundness", passed, start.elapsed(), Duration::from_secs(180), &detail.join("; "));
}

fn power_constraint_invariant() {
    let start = Instant::now();
    let mut checks = 0;
    let mut violations = 0;
    for gain in [GainModel::Constant { value: 1.0 }, GainModel::Rayleigh { scale: 1.0 }] {
        let spec = SweepSpec {
            base: RunConfig { gain, ..RunConfig::default() },
            pc_grid: vec![0.1, 0.5, 1.0],
            snr_db_grid: vec![-10.0, 0.0, 10.0, 20.0, 40.0, f64::INFINITY],
            algorithms: vec!["wfald".into(), "wfedavg".into()],
            replicates: 20,
            ..SweepSpec::default()
        };
        let result = wfald::harness::execute_sweep(&spec).unwrap();
        checks += result.rows.iter().map(|r| r.power_checks).sum::<usize>();
        violations += result.rows.iter().map(|r| r.power_violations).sum::<usize>();
    }
    report(
        9,
        "power_constraint_invariant",
        checks > 0 && violations == 0,
        start.elapsed(),
        Duration::from_secs(600),
        &format!("{violations} violations in {checks} wireless rounds"),
    );
}

fn determinism() {
    let start = Instant::now();
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, workers) in dirs.iter().zip([1, 1, 4]) {
        let spec = SweepSpec {
            pc_grid: vec![0.3, 1.0],
            snr_db_grid: vec![0.0, 20.0, f64::INFINITY],
            algorithms: vec!["wfald".into(), "wfedavg".into(), "fald".into(), "sgld".into()],
            replicates: 6,
            output_dir: dir.path().to_path_buf(),
            workers,
            ..SweepSpec::default()
        };
        run_sweep(&spec).unwrap();
    }
    let mut identical = true;
    for file in [SUMMARY_FILE, TRACE_FILE, CHANNEL_FILE, MANIFEST_FILE] {
        let first = std::fs::read(dirs[0].path().join(file)).unwrap();
        for d in &dirs[1..] {
            identical &= std::fs::read(d.path().join(file)).unwrap() == first;
        }
    }
    let seeds_distinct = replicate_seed(1, 0, 0) != replicate_seed(1, 0, 1);
    report(
        10,
        "determinism",
        identical && seeds_distinct,
        start.elapsed(),
        Duration::from_secs(60),
        &format!("repeat and 1 vs 4 worker sweeps bitwise identical: {identical}"),
    );
}

fn main() {
    let criteria: [(&str, fn()); 10] = [
        ("posterior_oracle", posterior_oracle),
        ("centralized_sgld_calibration", centralized_sgld_calibration),
        ("high_snr_equivalence", high_snr_equivalence),
        ("aggregation_rate_trend", aggregation_rate_trend),
        ("snr_trend", snr_trend),
        ("low_snr_baseline_gain", low_snr_baseline_gain),
        ("bound_soundness", bound_soundness),
        ("drift_soundness", drift_soundness),
        ("power_constraint_invariant", power_constraint_invariant),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if std::panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
