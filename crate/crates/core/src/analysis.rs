//! Evaluation quantities: Gaussian W2, empirical summaries, posterior-mean
//! MSE, predictive error, the convergence bound and client drift.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GaussianDist, LocalDataset, QuadraticCost, RegularityConstants};

/// Eigenvalues of an empirical covariance below this are reported before clamping.
pub const NEGATIVE_EIGEN_WARN: f64 = -1e-8;

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussian(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    linalg::check_psd(p.covariance(), "first covariance")?;
    linalg::check_psd(q.covariance(), "second covariance")?;
    let mean_part = (p.mean() - q.mean()).norm_squared();
    let root_q = linalg::sqrt_psd(q.covariance());
    let cross = linalg::sqrt_psd(&(&root_q * p.covariance() * &root_q));
    let cov_part = p.covariance().trace() + q.covariance().trace() - 2.0 * cross.trace();
    Ok(mean_part + cov_part.max(0.0))
}

/// Sample mean and unbiased sample covariance, projected onto the PSD cone.
pub fn empirical_gaussian(samples: &[DVector<f64>]) -> Result<GaussianDist> {
    let n = samples.len();
    let d = samples
        .first()
        .map(|x| x.len())
        .ok_or_else(|| Error::invalid("no samples"))?;
    if n < d + 1 {
        return Err(Error::invalid(format!(
            "need at least {} samples in dimension {d}, got {n}",
            d + 1
        )));
    }
    if samples.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("samples have different lengths"));
    }
    let mean = samples.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in samples {
        let c = x - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    let cov = linalg::symmetrize(&cov);
    let (lo, _) = linalg::eig_extremes(&cov);
    if lo < NEGATIVE_EIGEN_WARN {
        log::warn!("empirical covariance has eigenvalue {lo:e}; clamping to the PSD cone");
    }
    GaussianDist::new(mean, linalg::project_psd(&cov))
}

/// `(1/K) sum_k || device_mean_k - posterior_mean ||^2`.
pub fn mse_from_means(device_means: &[DVector<f64>], posterior_mean: &DVector<f64>) -> Result<f64> {
    if device_means.is_empty() {
        return Err(Error::invalid("no devices"));
    }
    let mut total = 0.0;
    for m in device_means {
        if m.len() != posterior_mean.len() {
            return Err(Error::invalid("device mean length differs from posterior mean"));
        }
        total += (m - posterior_mean).norm_squared();
    }
    Ok(total / device_means.len() as f64)
}

/// MSE between per-device post-burn-in sample averages and the posterior mean.
///
/// `trajectories[k]` holds device `k`'s retained particles.
pub fn mse_metric(trajectories: &[Vec<DVector<f64>>], posterior_mean: &DVector<f64>) -> Result<f64> {
    let means = trajectories
        .iter()
        .map(|samples| {
            if samples.is_empty() {
                return Err(Error::invalid("device has no post-burn-in samples"));
            }
            let sum = samples
                .iter()
                .fold(DVector::zeros(posterior_mean.len()), |acc, x| acc + x);
            Ok(sum / samples.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    mse_from_means(&means, posterior_mean)
}

/// Predictor used for test error.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Posterior-averaged prediction over retained particles.
    Ensemble(&'a [DVector<f64>]),
    /// Prediction from a single parameter vector.
    PointEstimate(&'a DVector<f64>),
}

impl Predictor<'_> {
    /// The parameter vector whose prediction equals this predictor's.
    ///
    /// For the linear model the ensemble prediction is the prediction at the
    /// particle average.
    pub fn effective_parameter(&self) -> Result<DVector<f64>> {
        match *self {
            Predictor::Ensemble(particles) => {
                let first = particles
                    .first()
                    .ok_or_else(|| Error::invalid("ensemble has no particles"))?;
                let sum = particles.iter().fold(DVector::zeros(first.len()), |acc, x| acc + x);
                Ok(sum / particles.len() as f64)
            }
            Predictor::PointEstimate(theta) => Ok(theta.clone()),
        }
    }

    /// Predictions `theta^T u` for each column of `inputs`.
    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let theta = self.effective_parameter()?;
        if theta.len() != inputs.nrows() {
            return Err(Error::invalid("predictor and inputs disagree on dimension"));
        }
        Ok(inputs.tr_mul(&theta))
    }
}

/// Mean squared prediction error on one test set.
pub fn test_error(predictor: &Predictor<'_>, test_set: &LocalDataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let pred = predictor.predict(test_set.covariates())?;
    Ok((test_set.targets() - pred).norm_squared() / test_set.len() as f64)
}

/// Test error of each device's predictor on its own test set, averaged over devices.
pub fn predictive_error(predictors: &[Predictor<'_>], test_sets: &[LocalDataset]) -> Result<f64> {
    if predictors.len() != test_sets.len() || predictors.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictors for {} test sets",
            predictors.len(),
            test_sets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in predictors.iter().zip(test_sets) {
        total += test_error(p, t)?;
    }
    Ok(total / test_sets.len() as f64)
}

/// Contraction factor `gamma` of the gradient step.
pub fn contraction_gamma(eta: f64, strong_convexity: f64, smoothness: f64) -> Result<f64> {
    let (mu, l) = (strong_convexity, smoothness);
    if !(eta > 0.0 && mu > 0.0 && l >= mu) {
        return Err(Error::invalid(format!(
            "need eta > 0 and 0 < mu <= L, got eta = {eta}, mu = {mu}, L = {l}"
        )));
    }
    let gamma = if eta <= 2.0 / (mu + l) {
        1.0 - eta * mu
    } else if eta <= 2.0 / l {
        eta * l - 1.0
    } else {
        return Err(Error::BoundVacuous { gamma: eta * l - 1.0 });
    };
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::BoundVacuous { gamma });
    }
    Ok(gamma)
}

/// Everything the Wasserstein bound depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub gradient_bound: f64,
    /// `sum_k sigma_k^2`.
    pub gradient_noise_sq_sum: f64,
    pub eta: f64,
    pub p_c: f64,
    pub devices: usize,
    pub dim: usize,
    /// Residual noise of rounds `0..s`; only the first `s` entries are used.
    pub beta: Vec<f64>,
    /// Squared W2 distance of the initial distribution to the posterior.
    pub w2_init: f64,
    pub s: usize,
}

impl BoundInputs {
    #[allow(clippy::too_many_arguments)]
    pub fn from_constants(
        constants: &RegularityConstants,
        eta: f64,
        p_c: f64,
        devices: usize,
        dim: usize,
        beta: Vec<f64>,
        w2_init: f64,
        s: usize,
    ) -> Self {
        Self {
            smoothness: constants.smoothness,
            strong_convexity: constants.strong_convexity,
            gradient_bound: constants.gradient_bound,
            gradient_noise_sq_sum: constants.gradient_noise_sq_sum(),
            eta,
            p_c,
            devices,
            dim,
            beta,
            w2_init,
            s,
        }
    }
}

/// The bound split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub gamma: f64,
    pub contraction: f64,
    pub channel: f64,
    pub constant: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.contraction + self.channel + self.constant
    }
}

/// Evaluates the Wasserstein bound at iteration `s` term by term.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<BoundTerms> {
    let BoundInputs {
        smoothness: l,
        strong_convexity: mu,
        gradient_bound: g,
        gradient_noise_sq_sum: sigma_sq,
        eta,
        p_c,
        devices,
        dim,
        ref beta,
        w2_init,
        s,
    } = *inputs;
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(Error::invalid(format!("p_c must lie in (0, 1], got {p_c}")));
    }
    if devices == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    if beta.len() < s {
        return Err(Error::invalid(format!(
            "need {s} residual-noise values, got {}",
            beta.len()
        )));
    }
    let gamma = contraction_gamma(eta, mu, l)?;
    let r = (1.0 + gamma) / 2.0;
    let contraction = r.powi(2 * s as i32) * w2_init;
    let d = dim as f64;
    let channel = beta[..s]
        .iter()
        .enumerate()
        .map(|(j, b)| r.powi(2 * (s - j) as i32) * p_c * b * d)
        .sum();

    let k = devices as f64;
    let bracket = eta.powi(4) * l.powi(3) * d / (3.0 * k)
        + eta.powi(3) * l * l * d
        + (eta * eta / k + 4.0 * eta.powi(4) * l * l / (k * p_c)) * sigma_sq
        + 6.0 * eta.powi(4) * l * l * g * g / (p_c * p_c)
        + 4.0 * eta.powi(3) * l * l * (k - 1.0) * d / (k * p_c);
    let constant = 8.0 * (1.0 + gamma) / (3.0 * (1.0 - gamma).powi(2)) * bracket;
    Ok(BoundTerms {
        gamma,
        contraction,
        channel,
        constant,
    })
}

/// Measured client drift of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// `(1/K) sum_k ||theta_k - theta_avg||^2`.
    pub v_theta: f64,
    /// `||grad f(theta_avg) - sum_k grad_k||^2`.
    pub v_c: f64,
}

/// Client drift of particles `particles` with stochastic gradients `grads`.
pub fn client_drift(
    particles: &[DVector<f64>],
    avg: &DVector<f64>,
    grads: &[DVector<f64>],
    cost: &QuadraticCost,
) -> Result<Drift> {
    if particles.is_empty() || particles.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} particles but {} gradients",
            particles.len(),
            grads.len()
        )));
    }
    let d = avg.len();
    if particles.iter().chain(grads).any(|x| x.len() != d) {
        return Err(Error::invalid("inconsistent dimensions"));
    }
    let v_theta =
        particles.iter().map(|t| (t - avg).norm_squared()).sum::<f64>() / particles.len() as f64;
    let grad_sum = grads.iter().fold(DVector::zeros(d), |acc, g| acc + g);
    let v_c = (cost.gradient(avg) - grad_sum).norm_squared();
    Ok(Drift { v_theta, v_c })
}

/// Right-hand sides of the two client-drift bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftBounds {
    /// Bound on `E[V_c]` given `E[V_theta]`.
    pub rhs26: f64,
    /// Bound on `E[V_theta]`.
    pub rhs27: f64,
}

pub fn drift_bounds(
    constants: &RegularityConstants,
    eta: f64,
    p_c: f64,
    devices: usize,
    dim: usize,
    v_theta_expect: f64,
) -> Result<DriftBounds> {
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(Error::invalid(format!("p_c must lie in (0, 1], got {p_c}")));
    }
    let k = devices as f64;
    let l = constants.smoothness;
    let sigma_sq = constants.gradient_noise_sq_sum();
    let g = constants.gradient_bound;
    let rhs26 = k * k * l * l * v_theta_expect + k * sigma_sq;
    let rhs27 = 2.0 * (1.0 - p_c) / p_c
        * ((2.0 + p_c) * eta * eta / p_c * g * g
            + eta * eta / k * sigma_sq
            + 2.0 * (k - 1.0) * eta * dim as f64 / k);
    Ok(DriftBounds { rhs26, rhs27 })
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Ranks with ties given their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation and its two-sided p-value (t approximation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
    /// One-sided p-value for `rho < 0`.
    pub p_negative: f64,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::invalid("need at least three paired observations"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (rx.iter().sum::<f64>() / n as f64, ry.iter().sum::<f64>() / n as f64);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("rank correlation undefined for constant input"));
    }
    let rho = sxy / (sxx * syy).sqrt();
    let df = (n - 2) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let (p_value, p_negative) = if rho.abs() >= 1.0 {
        (0.0, if rho < 0.0 { 0.0 } else { 1.0 })
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        (2.0 * dist.cdf(-t.abs()), dist.cdf(t))
    };
    Ok(Spearman {
        rho,
        p_value,
        p_negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GradientNoiseEstimate;
    use crate::rng::{standard_normal_vector, stream, Purpose};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(mean: &[f64], cov: &[f64]) -> GaussianDist {
        let d = mean.len();
        GaussianDist::new(DVector::from_row_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
    }

    fn constants(l: f64, mu: f64, g: f64, sigma: Vec<f64>) -> RegularityConstants {
        RegularityConstants {
            smoothness: l,
            strong_convexity: mu,
            gradient_bound: g,
            region_radius: 1.0,
            gradient_noise: sigma,
        }
    }

    #[test]
    fn w2_identity_and_mean_shift() {
        let p = gauss(&[1.0, -2.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!(w2_gaussian(&p, &p).unwrap().abs() < 1e-10);
        let d = 4;
        let a = GaussianDist::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
        let b = GaussianDist::new(DVector::from_element(d, 0.7), DMatrix::identity(d, d)).unwrap();
        assert!((w2_gaussian(&a, &b).unwrap() - d as f64 * 0.49).abs() < 1e-12);
        assert!(w2_gaussian(&a, &p).is_err());
    }

    #[test]
    fn w2_is_symmetric() {
        let p = gauss(&[0.0, 1.0, 2.0], &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.5]);
        let q = gauss(&[1.0, 0.0, -1.0], &[1.0, -0.3, 0.0, -0.3, 3.0, 0.4, 0.0, 0.4, 0.7]);
        let pq = w2_gaussian(&p, &q).unwrap();
        let qp = w2_gaussian(&q, &p).unwrap();
        assert!((pq - qp).abs() < 1e-10, "{pq} vs {qp}");
        assert!(pq > 0.0);
    }

    #[test]
    fn w2_scalar_against_sorted_samples() {
        // In one dimension the optimal coupling is monotone, so W2^2 is the mean
        // squared gap between sorted samples.
        let p = gauss(&[0.0], &[1.0]);
        let q = gauss(&[0.0], &[9.0]);
        let closed = w2_gaussian(&p, &q).unwrap();
        assert!((closed - 4.0).abs() < 1e-12);

        let n = 1_000_000;
        let mut rng = stream(21, Purpose::Data, 0);
        let mut a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let empirical = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
        assert!((empirical - closed).abs() < 0.02 * closed, "{empirical}");
    }

    #[test]
    fn w2_diagonal_matches_coordinatewise_projections() {
        let p = gauss(&[0.5, 0.0], &[4.0, 0.0, 0.0, 0.25]);
        let q = gauss(&[0.0, -1.0], &[1.0, 0.0, 0.0, 1.0]);
        let expected = 0.25 + 1.0 + (2.0f64 - 1.0).powi(2) + (0.5f64 - 1.0).powi(2);
        assert!((w2_gaussian(&p, &q).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empirical_constant_samples() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let g = empirical_gaussian(&vec![c.clone(); 10]).unwrap();
        assert_eq!(g.mean(), &c);
        assert!(g.covariance().amax() < 1e-15);
    }

    #[test]
    fn empirical_concentration() {
        let mut rng = stream(22, Purpose::Data, 0);
        let samples: Vec<_> = (0..1_000_000).map(|_| standard_normal_vector(2, &mut rng)).collect();
        let g = empirical_gaussian(&samples).unwrap();
        assert!(g.mean().amax() < 0.005);
        assert!((g.covariance() - DMatrix::identity(2, 2)).amax() < 0.01);
    }

    #[test]
    fn empirical_needs_enough_samples() {
        let x = DVector::zeros(5);
        assert!(empirical_gaussian(&[x.clone(), x]).is_err());
        assert!(empirical_gaussian(&[]).is_err());
    }

    #[test]
    fn mse_examples() {
        let mu = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(mse_metric(&[vec![mu.clone(); 3], vec![mu.clone()]], &mu).unwrap(), 0.0);

        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let cancel = vec![vec![&mu + &e1, &mu - &e1]];
        assert!(mse_metric(&cancel, &mu).unwrap().abs() < 1e-15);

        let spread = vec![vec![&mu + &e1], vec![&mu - &e1]];
        assert!((mse_metric(&spread, &mu).unwrap() - 1.0).abs() < 1e-15);
        assert!(mse_metric(&[vec![]], &mu).is_err());
    }

    fn test_shard(theta: &DVector<f64>, n: usize, seed: u64) -> LocalDataset {
        let mut rng = stream(seed, Purpose::TestSet, 0);
        let u = DMatrix::from_fn(theta.len(), n, |_, _| rng.sample(StandardNormal));
        let v = u.tr_mul(theta);
        LocalDataset::new(0, u, v).unwrap()
    }

    #[test]
    fn predictive_examples() {
        let theta = DVector::from_vec(vec![-0.5, 1.5, 2.0]);
        let t = test_shard(&theta, 50, 1);
        assert!(test_error(&Predictor::PointEstimate(&theta), &t).unwrap() < 1e-24);

        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let pair = [&theta + &e1, &theta - &e1];
        assert!(test_error(&Predictor::Ensemble(&pair), &t).unwrap() < 1e-24);

        let one = LocalDataset::new(0, DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]), DVector::from_vec(vec![1.0])).unwrap();
        let zero = DVector::zeros(3);
        assert_eq!(test_error(&Predictor::PointEstimate(&zero), &one).unwrap(), 1.0);
        assert!(test_error(&Predictor::Ensemble(&[]), &one).is_err());
    }

    #[test]
    fn ensemble_prediction_is_linear() {
        let mut rng = stream(23, Purpose::Data, 0);
        let particles: Vec<_> = (0..40).map(|_| standard_normal_vector(4, &mut rng)).collect();
        let inputs = DMatrix::from_fn(4, 30, |_, _| rng.sample(StandardNormal));
        let fast = Predictor::Ensemble(&particles).predict(&inputs).unwrap();
        let direct = particles
            .iter()
            .fold(DVector::zeros(30), |acc, th| acc + inputs.tr_mul(th))
            / particles.len() as f64;
        assert!((fast - direct).amax() < 1e-12);
    }

    #[test]
    fn predictive_error_averages_devices() {
        let theta = DVector::from_vec(vec![1.0, 0.0]);
        let zero = DVector::zeros(2);
        let one = LocalDataset::new(0, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), DVector::from_vec(vec![1.0])).unwrap();
        let preds = [Predictor::PointEstimate(&theta), Predictor::PointEstimate(&zero)];
        let err = predictive_error(&preds, &[one.clone(), one]).unwrap();
        assert!((err - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gamma_branches() {
        assert!((contraction_gamma(0.5, 1.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
        let r = (1.0 + 0.5) / 2.0;
        assert!((r * r - 0.5625f64).abs() < 1e-15);
        // 2/(mu+L) = 2/3 < eta = 0.9 <= 2/L = 1
        assert!((contraction_gamma(0.9, 1.0, 2.0).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            contraction_gamma(1.5, 1.0, 2.0).unwrap_err(),
            Error::BoundVacuous { .. }
        ));
    }

    fn base_inputs() -> BoundInputs {
        BoundInputs {
            smoothness: 2.0,
            strong_convexity: 1.0,
            gradient_bound: 3.0,
            gradient_noise_sq_sum: 0.0,
            eta: 0.1,
            p_c: 0.5,
            devices: 1,
            dim: 2,
            beta: vec![0.0; 5000],
            w2_init: 7.0,
            s: 0,
        }
    }

    #[test]
    fn bound_at_start() {
        let terms = theorem1_bound(&base_inputs()).unwrap();
        assert_eq!(terms.contraction, 7.0);
        assert_eq!(terms.channel, 0.0);
        assert!(terms.constant > 0.0);
    }

    #[test]
    fn bound_long_run_single_device() {
        let mut inputs = base_inputs();
        inputs.s = 5000;
        let terms = theorem1_bound(&inputs).unwrap();
        let (eta, l, d, g, p_c) = (0.1f64, 2.0f64, 2.0, 3.0, 0.5);
        let gamma = 1.0 - eta * 1.0;
        let expected = 8.0 * (1.0 + gamma) / (3.0 * (1.0 - gamma).powi(2))
            * (eta.powi(4) * l.powi(3) * d / 3.0 + eta.powi(3) * l * l * d + 6.0 * eta.powi(4) * l * l * g * g / (p_c * p_c));
        assert!((terms.total() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn bound_channel_term_by_hand() {
        let mut inputs = base_inputs();
        inputs.s = 2;
        inputs.beta = vec![1.0, 2.0];
        let terms = theorem1_bound(&inputs).unwrap();
        let r: f64 = (1.0 + 0.9) / 2.0;
        let expected = r.powi(4) * 0.5 * 1.0 * 2.0 + r.powi(2) * 0.5 * 2.0 * 2.0;
        assert!((terms.channel - expected).abs() < 1e-12);
        inputs.beta = vec![1.0];
        assert!(theorem1_bound(&inputs).is_err());
    }

    #[test]
    fn drift_examples() {
        let cost = QuadraticCost::from_parts(&DMatrix::zeros(2, 0), &DVector::zeros(0));
        let avg = DVector::from_vec(vec![0.3, 0.1]);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let drift = client_drift(&[&avg + &e1, &avg - &e1], &avg, &[avg.clone() / 2.0, avg.clone() / 2.0], &cost).unwrap();
        assert!((drift.v_theta - 1.0).abs() < 1e-15);
        assert!(drift.v_c < 1e-30);

        let c = constants(1.0, 0.5, 2.0, vec![1.0, 2.0f64.sqrt()]);
        let b = drift_bounds(&c, 0.01, 1.0, 2, 3, 0.5).unwrap();
        assert!((b.rhs26 - 8.0).abs() < 1e-12);
        assert_eq!(b.rhs27, 0.0);
        let quiet = constants(1.0, 0.5, 2.0, vec![0.0, 0.0]);
        assert_eq!(drift_bounds(&quiet, 0.01, 0.3, 2, 3, 0.0).unwrap().rhs26, 0.0);
        assert!(drift_bounds(&c, 0.01, 0.0, 2, 3, 0.5).is_err());
    }

    #[test]
    fn drift_vanishes_for_equal_full_batch_devices() {
        use crate::model::{generate_synthetic, local_grad, partition_even};
        let mut rng = stream(24, Purpose::Data, 0);
        let theta_star = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let data = generate_synthetic(60, 3, &theta_star, 0.5, &mut rng).unwrap();
        let cost = QuadraticCost::from_dataset(&data);
        for k in [1, 4] {
            let shards = partition_even(&data, k).unwrap();
            let theta = DVector::from_vec(vec![0.2, 0.0, -0.3]);
            let grads: Vec<_> = shards.iter().map(|s| local_grad(&theta, s, k).unwrap()).collect();
            let drift = client_drift(&vec![theta.clone(); k], &theta, &grads, &cost).unwrap();
            assert_eq!(drift.v_theta, 0.0);
            assert!(drift.v_c < 1e-20, "{}", drift.v_c);
        }
        let _ = GradientNoiseEstimate::ClosedForm;
    }

    #[test]
    fn stats_helpers() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);

        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| -v * v).collect();
        let s = spearman(&x, &y).unwrap();
        assert_eq!(s.rho, -1.0);
        assert!(s.p_negative < 1e-6);
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let b = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 10.0, 9.0, 8.0, 7.0];
        let s = spearman(&a, &b).unwrap();
        let r = 1.0 - 6.0 * 26.0 / (10.0 * 99.0);
        assert!((s.rho - r).abs() < 1e-12);
        // Reference two-sided p-value from scipy.stats.spearmanr.
        assert!((s.p_value - 0.0022200312259168407).abs() < 1e-9);
    }
}
