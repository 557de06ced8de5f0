//! Quick invariant checks on a tiny problem, run by the `validate` subcommand.

use nalgebra::DVector;

use crate::analysis;
use crate::channel::{check_power, residual_noise};
use crate::error::Result;
use crate::model::local_grad;
use crate::protocol::{run_fald, run_wfald, run_wfedavg, DataConfig, Problem, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn tiny() -> RunConfig {
    RunConfig {
        data: DataConfig {
            devices: 4,
            dim: 3,
            samples: 80,
            theta_star: vec![1.0, -1.0, 0.5],
            noise_std: 1.0,
            test_per_device: 25,
        },
        eta: 5e-3,
        iterations: 60,
        burn_in: 30,
        replicates: 1,
        ..RunConfig::default()
    }
}

/// Runs every check; errors only when a run itself cannot be executed.
pub fn run_validation() -> Result<Vec<Check>> {
    let cfg = tiny();
    let problem = Problem::prepare(&cfg)?;
    let mut checks = Vec::new();

    let theta = DVector::from_vec(vec![0.3, -0.2, 0.9]);
    let sum = problem
        .shards
        .iter()
        .try_fold(DVector::zeros(3), |acc, s| local_grad(&theta, s, cfg.data.devices).map(|g| acc + g))?;
    let gap = (sum - problem.cost.gradient(&theta)).amax();
    checks.push(check("gradient_sum_identity", gap < 1e-10, format!("max deviation {gap:e}")));

    let cov = problem.posterior.covariance();
    let (lo, _) = crate::linalg::eig_extremes(cov);
    checks.push(check("posterior_positive_definite", lo > 0.0, format!("min eigenvalue {lo:e}")));

    let a = problem.posterior.clone();
    let b = crate::model::GaussianDist::new(DVector::zeros(3), cov * 2.0)?;
    let (ab, ba) = (analysis::w2_gaussian(&a, &b)?, analysis::w2_gaussian(&b, &a)?);
    checks.push(check(
        "w2_symmetry",
        (ab - ba).abs() < 1e-10 && analysis::w2_gaussian(&a, &a)?.abs() < 1e-10,
        format!("{ab} vs {ba}"),
    ));

    let mut worst_energy: f64 = 0.0;
    let mut beta_gap: f64 = 0.0;
    let mut rounds = 0;
    for snr in [-10.0, 10.0, 40.0] {
        for run in [run_wfald, run_wfedavg] {
            let c = RunConfig { snr_db: snr, ..cfg.clone() };
            let r = run(&problem, &c, 7)?;
            let n0 = c.channel()?.noise_power;
            for round in &r.channel_log {
                rounds += 1;
                let signals: Vec<DVector<f64>> = round
                    .gains
                    .iter()
                    .zip(&round.payload_norms)
                    .map(|(h, n)| DVector::from_element(1, round.alpha / h * n))
                    .collect();
                if check_power(&signals, c.power).iter().any(|ok| !ok) {
                    worst_energy = f64::INFINITY;
                }
                worst_energy = worst_energy.max(signals.iter().map(|s| s.norm_squared()).fold(0.0, f64::max));
                if r.algorithm == "wfald" {
                    beta_gap = beta_gap.max((round.beta - residual_noise(n0, round.alpha, c.eta, 4)).abs());
                }
            }
        }
    }
    checks.push(check(
        "power_constraint",
        worst_energy <= cfg.power * (1.0 + 1e-12),
        format!("{rounds} wireless rounds, max energy {worst_energy}"),
    ));
    checks.push(check("residual_noise_identity", beta_gap < 1e-12, format!("max gap {beta_gap:e}")));

    let full = RunConfig { p_c: 1.0, ..cfg.clone() };
    let r = run_fald(&problem, &full, 3)?;
    let drift = r.iterations.iter().map(|i| i.v_theta).fold(0.0, f64::max);
    checks.push(check(
        "no_drift_with_full_aggregation",
        drift == 0.0,
        format!("max V_theta {drift:e}"),
    ));

    let first = run_wfald(&problem, &cfg, 11)?;
    let second = run_wfald(&problem, &cfg, 11)?;
    checks.push(check(
        "deterministic_replay",
        first.mean_trajectory == second.mean_trajectory,
        "same seed, same trajectory",
    ));

    let w = run_wfald(&problem, &cfg, 5)?;
    let f = run_fald(&problem, &cfg, 5)?;
    let same = w.iterations.iter().zip(&f.iterations).all(|(a, b)| a.aggregated == b.aggregated);
    checks.push(check("shared_schedule", same, "WFALD and FALD aggregate on the same rounds"));
    Ok(checks)
}
