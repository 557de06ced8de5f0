//! Langevin kernels: centralized SGLD and the noiseless federated (FALD) round.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{stochastic_grad, LocalDataset};
use crate::rng::{self, standard_normal_vector, Purpose, Stream};

/// One device's particle and its private random streams.
///
/// Mini-batch selection and private Langevin noise use separate streams, so the
/// batch index sequence is the same for every algorithm sharing a seed no
/// matter how much noise each one draws.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub index: usize,
    pub theta: DVector<f64>,
    batch_rng: Stream,
    noise_rng: Stream,
}

impl DeviceState {
    pub fn new(index: usize, theta: DVector<f64>, run_seed: u64) -> Self {
        Self {
            index,
            theta,
            batch_rng: rng::stream(run_seed, Purpose::DeviceBatch, index as u64),
            noise_rng: rng::stream(run_seed, Purpose::DeviceNoise, index as u64),
        }
    }

    /// Mini-batch gradient of this device's local cost at its current particle.
    pub fn stochastic_grad(&mut self, shard: &LocalDataset, p_b: f64, k: usize) -> Result<DVector<f64>> {
        stochastic_grad(&self.theta, shard, p_b, &mut self.batch_rng, k)
    }

    pub fn noise_rng(&mut self) -> &mut Stream {
        &mut self.noise_rng
    }

    pub(crate) fn ensure_finite(&self, iteration: usize) -> Result<()> {
        if self.theta.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                device: self.index,
                iteration,
            })
        }
    }
}

/// Randomness every participant can regenerate from the common seed: the
/// aggregation flags `B^[s]` and the shared Gaussian draw of each round.
#[derive(Debug, Clone)]
pub struct SharedRandomness {
    seed: u64,
    round_flags: Stream,
    common_noise: Stream,
}

impl SharedRandomness {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            round_flags: rng::stream(seed, Purpose::RoundFlags, 0),
            common_noise: rng::stream(seed, Purpose::CommonNoise, 0),
        }
    }

    /// Flags from `flag_seed`'s stream and shared noise from `noise_seed`'s.
    pub fn from_parts(flag_seed: u64, noise_seed: u64) -> Self {
        Self {
            seed: flag_seed,
            round_flags: rng::stream(flag_seed, Purpose::RoundFlags, 0),
            common_noise: rng::stream(noise_seed, Purpose::CommonNoise, 0),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draw_common_noise(&mut self, dim: usize) -> DVector<f64> {
        standard_normal_vector(dim, &mut self.common_noise)
    }
}

/// `theta - eta * grad + sqrt(2 eta) * noise`.
pub fn langevin_update(theta: &DVector<f64>, grad: &DVector<f64>, eta: f64, noise: &DVector<f64>) -> DVector<f64> {
    let mut out = theta - grad * eta;
    out.axpy((2.0 * eta).sqrt(), noise, 1.0);
    out
}

/// Centralized SGLD step: one fresh standard-normal vector is drawn from `rng`.
pub fn sgld_step<R: Rng + ?Sized>(
    theta: &DVector<f64>,
    grad: &DVector<f64>,
    eta: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {eta}")));
    }
    if theta.len() != grad.len() {
        return Err(Error::invalid("parameter and gradient lengths differ"));
    }
    let xi = standard_normal_vector(theta.len(), rng);
    Ok(langevin_update(theta, grad, eta, &xi))
}

/// Device noise `sqrt(tau/K) * common + sqrt(1 - tau) * private`.
///
/// The private part is drawn from `private` only when `tau < 1`.
pub fn correlated_noise<R: Rng + ?Sized>(
    tau: f64,
    k: usize,
    common: &DVector<f64>,
    private: &mut R,
) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    if k == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    let mut xi = common * (tau / k as f64).sqrt();
    if tau < 1.0 {
        let own = standard_normal_vector(common.len(), private);
        xi.axpy((1.0 - tau).sqrt(), &own, 1.0);
    }
    Ok(xi)
}

/// Draws the shared aggregation flag `B^[s] ~ Bernoulli(p_c)`.
pub fn draw_round_flag(shared: &mut SharedRandomness, p_c: f64) -> Result<bool> {
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(Error::invalid(format!("p_c must lie in (0, 1], got {p_c}")));
    }
    let u: f64 = shared.round_flags.random();
    Ok(u < p_c)
}

/// How much of each round's injected noise is shared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSchedule {
    /// `tau = 1` on aggregation rounds and `0` otherwise.
    AggregationOnly,
    Constant(f64),
}

impl TauSchedule {
    pub fn tau(&self, aggregate: bool) -> f64 {
        match *self {
            TauSchedule::AggregationOnly => {
                if aggregate {
                    1.0
                } else {
                    0.0
                }
            }
            TauSchedule::Constant(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaldParams {
    pub eta: f64,
    pub p_b: f64,
    pub p_c: f64,
    pub tau: TauSchedule,
}

/// Result of one federated round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub aggregated: bool,
    /// The broadcast global particle when the round aggregated.
    pub aggregate: Option<DVector<f64>>,
    /// Mini-batch gradients evaluated at each device's particle at the start of the round.
    pub grads: Vec<DVector<f64>>,
}

/// Mini-batch gradients of every device at its current particle.
pub fn device_gradients(
    devices: &mut [DeviceState],
    shards: &[LocalDataset],
    p_b: f64,
) -> Result<Vec<DVector<f64>>> {
    if devices.len() != shards.len() {
        return Err(Error::invalid(format!(
            "{} devices but {} shards",
            devices.len(),
            shards.len()
        )));
    }
    let k = devices.len();
    devices
        .iter_mut()
        .zip(shards)
        .map(|(dev, shard)| dev.stochastic_grad(shard, p_b, k))
        .collect()
}

/// Average of the devices' particles, exact when they all coincide.
pub fn mean_particle(devices: &[DeviceState]) -> DVector<f64> {
    let first = &devices[0].theta;
    let offset = devices[1..]
        .iter()
        .fold(DVector::zeros(first.len()), |acc, dev| acc + (&dev.theta - first));
    first + offset / devices.len() as f64
}

/// One FALD iteration: local Langevin updates with `tau`-correlated noise,
/// followed by global averaging and broadcast when `B^[s] = 1`.
///
/// The flag is drawn first so the noise kernel knows which `tau` applies;
/// gradients do not depend on it. `force_aggregation` overrides the drawn flag
/// (the flag stream is still advanced).
pub fn fald_round(
    devices: &mut [DeviceState],
    shards: &[LocalDataset],
    params: &FaldParams,
    shared: &mut SharedRandomness,
    iteration: usize,
    force_aggregation: bool,
) -> Result<RoundOutcome> {
    if devices.is_empty() {
        return Err(Error::invalid("need at least one device"));
    }
    if !(params.eta > 0.0 && params.eta.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {}", params.eta)));
    }
    let d = devices[0].theta.len();
    if devices.iter().any(|dev| dev.theta.len() != d) {
        return Err(Error::invalid("devices disagree on parameter dimension"));
    }
    let k = devices.len();
    let aggregated = draw_round_flag(shared, params.p_c)? || force_aggregation;
    let tau = params.tau.tau(aggregated);
    let common = if tau > 0.0 {
        shared.draw_common_noise(d)
    } else {
        DVector::zeros(d)
    };

    let grads = device_gradients(devices, shards, params.p_b)?;
    for (dev, grad) in devices.iter_mut().zip(&grads) {
        let xi = correlated_noise(tau, k, &common, dev.noise_rng())?;
        dev.theta = langevin_update(&dev.theta, grad, params.eta, &xi);
        dev.ensure_finite(iteration)?;
    }

    let aggregate = if aggregated {
        let avg = mean_particle(devices);
        for dev in devices.iter_mut() {
            dev.theta.copy_from(&avg);
        }
        Some(avg)
    } else {
        None
    };
    Ok(RoundOutcome {
        aggregated,
        aggregate,
        grads,
    })
}
