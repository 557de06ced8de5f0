//! Gaussian linear-regression benchmark.
//!
//! Targets follow `v = theta^T u + eps` with `eps ~ N(0, noise_std^2)` and a
//! standard-normal prior on `theta`. Device `k` owns the local cost
//! `f_k(theta) = -log p(D_k | theta) - (1/K) log p(theta)`, whose gradient is
//! `sum_n (theta^T u_n - v_n) u_n + theta / K`, and the local costs sum to the
//! global negative log posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Covariates stored column-wise (`d x N`) with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: DMatrix<f64>,
    targets: DVector<f64>,
    theta_star: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(
        covariates: DMatrix<f64>,
        targets: DVector<f64>,
        theta_star: Option<DVector<f64>>,
    ) -> Result<Self> {
        if covariates.nrows() == 0 {
            return Err(Error::invalid("dataset dimension must be at least 1"));
        }
        if covariates.ncols() == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if covariates.ncols() != targets.len() {
            return Err(Error::invalid(format!(
                "{} covariate columns but {} targets",
                covariates.ncols(),
                targets.len()
            )));
        }
        if let Some(t) = &theta_star {
            if t.len() != covariates.nrows() {
                return Err(Error::invalid(format!(
                    "theta_star has length {} but d = {}",
                    t.len(),
                    covariates.nrows()
                )));
            }
        }
        Ok(Self {
            covariates,
            targets,
            theta_star,
        })
    }

    pub fn dim(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn theta_star(&self) -> Option<&DVector<f64>> {
        self.theta_star.as_ref()
    }
}

/// The slice of the global dataset held by one device.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    owner: usize,
    covariates: DMatrix<f64>,
    targets: DVector<f64>,
}

impl LocalDataset {
    pub fn new(owner: usize, covariates: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if covariates.ncols() != targets.len() {
            return Err(Error::invalid(format!(
                "shard {owner}: {} covariate columns but {} targets",
                covariates.ncols(),
                targets.len()
            )));
        }
        Ok(Self {
            owner,
            covariates,
            targets,
        })
    }

    /// Treats a whole dataset as a single shard (centralized sampling).
    pub fn whole(data: &Dataset) -> Self {
        Self {
            owner: 0,
            covariates: data.covariates.clone(),
            targets: data.targets.clone(),
        }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn dim(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }
}

/// Multivariate normal summary: mean and symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::invalid(format!(
                "covariance is {}x{} but mean has length {d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if !linalg::is_symmetric(&covariance, linalg::PSD_TOL) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        linalg::check_psd(&covariance, "covariance")?;
        Ok(Self { mean, covariance })
    }

    /// Degenerate distribution concentrated at `mean`.
    pub fn point_mass(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            covariance: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Largest marginal standard deviation along any direction.
    pub fn max_std(&self) -> f64 {
        let (_, max) = linalg::eig_extremes(&self.covariance);
        max.max(0.0).sqrt()
    }
}

/// Measured regularity constants of the local costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    /// Smoothness `L`: largest local Hessian eigenvalue.
    pub smoothness: f64,
    /// Strong convexity `mu`: smallest local Hessian eigenvalue.
    pub strong_convexity: f64,
    /// Gradient bound `G`, valid on the ball of `region_radius` around the posterior mean.
    pub gradient_bound: f64,
    pub region_radius: f64,
    /// Per-device stochastic-gradient standard deviations `sigma_k`.
    pub gradient_noise: Vec<f64>,
}

impl RegularityConstants {
    pub fn gradient_noise_sq_sum(&self) -> f64 {
        self.gradient_noise.iter().map(|s| s * s).sum()
    }
}

/// Draws `n` samples with `u ~ N(0, I_d)` and `v = theta_star^T u + noise_std * eps`.
///
/// Each sample consumes `d` normals for the covariate followed by one for the noise.
pub fn generate_synthetic<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    theta_star: &DVector<f64>,
    noise_std: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("need n >= 1 and d >= 1"));
    }
    if theta_star.len() != d {
        return Err(Error::invalid(format!(
            "theta_star has length {} but d = {d}",
            theta_star.len()
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut covariates = DMatrix::zeros(d, n);
    let mut targets = DVector::zeros(n);
    for j in 0..n {
        for i in 0..d {
            covariates[(i, j)] = rng.sample(StandardNormal);
        }
        let eps: f64 = noise.sample(rng);
        targets[j] = covariates.column(j).dot(theta_star) + eps;
    }
    Dataset::new(covariates, targets, Some(theta_star.clone()))
}

/// One independent test set of `per_device` samples for each of `devices` devices.
pub fn generate_test_sets<R: Rng + ?Sized>(
    devices: usize,
    per_device: usize,
    theta_star: &DVector<f64>,
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    (0..devices)
        .map(|_| generate_synthetic(per_device, theta_star.len(), theta_star, noise_std, rng))
        .collect()
}

/// Splits `data` into `k` contiguous shards; the first `N mod k` shards get one extra sample.
pub fn partition_even(data: &Dataset, k: usize) -> Result<Vec<LocalDataset>> {
    let n = data.len();
    if k == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot split {n} samples across {k} devices")));
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    (0..k)
        .map(|owner| {
            let size = base + usize::from(owner < extra);
            let cols = data.covariates.columns(start, size).into_owned();
            let targets = data.targets.rows(start, size).into_owned();
            start += size;
            LocalDataset::new(owner, cols, targets)
        })
        .collect()
}

fn check_theta(theta: &DVector<f64>, d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::invalid(format!(
            "parameter has length {} but data dimension is {d}",
            theta.len()
        )));
    }
    Ok(())
}

#[inline]
fn add_residual_term(shard: &LocalDataset, theta: &DVector<f64>, n: usize, out: &mut DVector<f64>) {
    let u = shard.covariates.column(n);
    let r = u.dot(theta) - shard.targets[n];
    out.axpy(r, &u, 1.0);
}

/// Exact gradient of the local cost `f_k` at `theta`.
pub fn local_grad(theta: &DVector<f64>, shard: &LocalDataset, k: usize) -> Result<DVector<f64>> {
    check_theta(theta, shard.dim())?;
    if k == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    let mut g = DVector::zeros(theta.len());
    for n in 0..shard.len() {
        add_residual_term(shard, theta, n, &mut g);
    }
    g.axpy(1.0 / k as f64, theta, 1.0);
    Ok(g)
}

/// Mini-batch size `max(1, round(p_b * n_k))`.
pub fn batch_size(n_k: usize, p_b: f64) -> Result<usize> {
    if !(p_b > 0.0 && p_b <= 1.0) {
        return Err(Error::invalid(format!("p_b must lie in (0, 1], got {p_b}")));
    }
    if n_k == 0 {
        return Err(Error::invalid("empty shard gives an empty mini-batch"));
    }
    Ok(((p_b * n_k as f64).round() as usize).clamp(1, n_k))
}

/// Mini-batch gradient estimate: a uniform batch drawn without replacement,
/// rescaled by the nominal `1 / p_b`, plus the prior share `theta / K`.
///
/// A batch that covers the whole shard consumes no randomness and reproduces
/// [`local_grad`] bit for bit when `p_b = 1`.
pub fn stochastic_grad<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    shard: &LocalDataset,
    p_b: f64,
    rng: &mut R,
    k: usize,
) -> Result<DVector<f64>> {
    check_theta(theta, shard.dim())?;
    if k == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    let n_k = shard.len();
    let b = batch_size(n_k, p_b)?;
    let mut g = DVector::zeros(theta.len());
    if b == n_k {
        for n in 0..n_k {
            add_residual_term(shard, theta, n, &mut g);
        }
    } else {
        for n in rand::seq::index::sample(rng, n_k, b) {
            add_residual_term(shard, theta, n, &mut g);
        }
    }
    g *= 1.0 / p_b;
    g.axpy(1.0 / k as f64, theta, 1.0);
    Ok(g)
}

/// The global cost `f = sum_k f_k` written as `1/2 theta^T H theta - b^T theta + const`
/// with `H = U U^T + I` and `b = U v`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
}

impl QuadraticCost {
    pub fn from_parts(covariates: &DMatrix<f64>, targets: &DVector<f64>) -> Self {
        let d = covariates.nrows();
        Self {
            hessian: covariates * covariates.transpose() + DMatrix::identity(d, d),
            linear: covariates * targets,
        }
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        Self::from_parts(&data.covariates, &data.targets)
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.hessian * theta - &self.linear
    }

    pub fn posterior(&self) -> Result<GaussianDist> {
        let chol = self
            .hessian
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("posterior precision is not positive definite"))?;
        let mean = chol.solve(&self.linear);
        let covariance = linalg::symmetrize(&chol.inverse());
        GaussianDist::new(mean, covariance)
    }
}

/// Closed-form posterior `N((UU^T + I)^{-1} U v, (UU^T + I)^{-1})`.
pub fn exact_posterior(data: &Dataset) -> Result<GaussianDist> {
    QuadraticCost::from_dataset(data).posterior()
}

/// Same as [`exact_posterior`] but accepts zero samples, in which case the prior comes back.
pub fn posterior_from_parts(covariates: &DMatrix<f64>, targets: &DVector<f64>) -> Result<GaussianDist> {
    if covariates.ncols() != targets.len() {
        return Err(Error::invalid("covariate/target length mismatch"));
    }
    QuadraticCost::from_parts(covariates, targets).posterior()
}

/// How the per-device gradient-noise bounds `sigma_k` are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientNoiseEstimate {
    /// Exact mini-batch variance at the posterior mean (finite-population corrected).
    ClosedForm,
    /// Largest Monte Carlo estimate over the posterior mean and the `2d` axis
    /// points on the region boundary.
    Empirical { batches: usize },
}

/// Exact `E || g_hat - grad f_k ||^2` at `theta` for the without-replacement batch scheme.
pub fn gradient_noise_closed_form(theta: &DVector<f64>, shard: &LocalDataset, p_b: f64) -> Result<f64> {
    check_theta(theta, shard.dim())?;
    let n_k = shard.len();
    let b = batch_size(n_k, p_b)?;
    let d = theta.len();
    let terms: Vec<DVector<f64>> = (0..n_k)
        .map(|n| {
            let mut g = DVector::zeros(d);
            add_residual_term(shard, theta, n, &mut g);
            g
        })
        .collect();
    let mean = terms.iter().fold(DVector::zeros(d), |acc, g| acc + g) / n_k as f64;
    let pop_var = terms.iter().map(|g| (g - &mean).norm_squared()).sum::<f64>() / n_k as f64;
    let fpc = if n_k > 1 {
        (n_k - b) as f64 / (n_k - 1) as f64
    } else {
        0.0
    };
    let sum_var = b as f64 * pop_var * fpc;
    let bias = (b as f64 / p_b - n_k as f64) * mean.norm();
    Ok(sum_var / (p_b * p_b) + bias * bias)
}

fn gradient_noise_empirical<R: Rng + ?Sized>(
    center: &DVector<f64>,
    radius: f64,
    shard: &LocalDataset,
    p_b: f64,
    k: usize,
    batches: usize,
    rng: &mut R,
) -> Result<f64> {
    if batches == 0 {
        return Err(Error::invalid("empirical gradient-noise estimate needs at least one batch"));
    }
    let d = center.len();
    let mut probes = vec![center.clone()];
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut p = center.clone();
            p[i] += sign * radius;
            probes.push(p);
        }
    }
    let mut worst = 0.0f64;
    for probe in &probes {
        let exact = local_grad(probe, shard, k)?;
        let mut acc = 0.0;
        for _ in 0..batches {
            acc += (stochastic_grad(probe, shard, p_b, rng, k)? - &exact).norm_squared();
        }
        worst = worst.max(acc / batches as f64);
    }
    Ok(worst)
}

/// Concatenation of all shards, in shard order.
pub fn merge_shards(shards: &[LocalDataset]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let first = shards
        .first()
        .ok_or_else(|| Error::invalid("need at least one shard"))?;
    let d = first.dim();
    let n: usize = shards.iter().map(LocalDataset::len).sum();
    let mut cov = DMatrix::zeros(d, n);
    let mut targets = DVector::zeros(n);
    let mut at = 0;
    for s in shards {
        if s.dim() != d {
            return Err(Error::invalid("shards disagree on dimension"));
        }
        cov.columns_mut(at, s.len()).copy_from(&s.covariates);
        targets.rows_mut(at, s.len()).copy_from(&s.targets);
        at += s.len();
    }
    Ok((cov, targets))
}

/// Measures `L`, `mu`, `G` and `sigma_k` for the quadratic local costs.
///
/// `L` and `mu` are the extreme eigenvalues of `U_k U_k^T + I/K` over all shards.
/// `G` bounds `||grad f_k||` on the ball of `region_radius` around the posterior
/// mean by `max_k ||grad f_k(mu_p)|| + L * region_radius`.
pub fn measure_constants<R: Rng + ?Sized>(
    shards: &[LocalDataset],
    k: usize,
    region_radius: f64,
    p_b: f64,
    noise_estimate: GradientNoiseEstimate,
    rng: &mut R,
) -> Result<RegularityConstants> {
    if !(region_radius > 0.0 && region_radius.is_finite()) {
        return Err(Error::invalid(format!(
            "region radius must be positive, got {region_radius}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    let (cov, targets) = merge_shards(shards)?;
    let d = cov.nrows();
    let posterior = posterior_from_parts(&cov, &targets)?;
    let prior_share = DMatrix::identity(d, d) / k as f64;

    let mut smoothness = f64::NEG_INFINITY;
    let mut strong_convexity = f64::INFINITY;
    for s in shards {
        let hessian = &s.covariates * s.covariates.transpose() + &prior_share;
        let (lo, hi) = linalg::eig_extremes(&hessian);
        smoothness = smoothness.max(hi);
        strong_convexity = strong_convexity.min(lo);
    }

    let mut center_grad: f64 = 0.0;
    for s in shards {
        center_grad = center_grad.max(local_grad(posterior.mean(), s, k)?.norm());
    }
    let gradient_bound = center_grad + smoothness * region_radius;

    let gradient_noise = shards
        .iter()
        .map(|s| {
            let var = match noise_estimate {
                GradientNoiseEstimate::ClosedForm => gradient_noise_closed_form(posterior.mean(), s, p_b)?,
                GradientNoiseEstimate::Empirical { batches } => {
                    gradient_noise_empirical(posterior.mean(), region_radius, s, p_b, k, batches, rng)?
                }
            };
            Ok(var.sqrt())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RegularityConstants {
        smoothness,
        strong_convexity,
        gradient_bound,
        region_radius,
        gradient_noise,
    })
}
