//! Analog multiple-access uplink.
//!
//! Devices transmit uncoded, channel-inverted signals in the same block; the
//! server receives `y = sum_k h_k x_k + z` with `z ~ N(0, N0 I_d)` and rescales
//! by `1 / (K alpha)`. Gains are real scalars and CSI is perfect.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vector;

/// Relative slack allowed in `||x||^2 <= P` for floating-point rounding.
pub const POWER_RTOL: f64 = 1e-12;

/// Gains below this fraction of the round's median magnitude abort the round.
pub const DEEP_FADE_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GainModel {
    Constant { value: f64 },
    /// `|h|` Rayleigh distributed with the given scale, sign positive.
    Rayleigh { scale: f64 },
}

impl Default for GainModel {
    fn default() -> Self {
        GainModel::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Per-block transmit energy budget `P`.
    pub power: f64,
    /// Noise variance per channel use `N0`.
    pub noise_power: f64,
    /// Block length, equal to the model dimension.
    pub dim: usize,
    pub gain_model: GainModel,
}

/// Converts an SNR in dB to `N0 = P / (d * 10^(snr/10))`. `+inf` gives a noiseless channel.
pub fn noise_power_from_snr_db(power: f64, dim: usize, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        power / (dim as f64 * 10f64.powf(snr_db / 10.0))
    }
}

impl ChannelConfig {
    pub fn new(power: f64, noise_power: f64, dim: usize, gain_model: GainModel) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::invalid(format!("transmit power must be positive, got {power}")));
        }
        if !(noise_power >= 0.0 && noise_power.is_finite()) {
            return Err(Error::invalid(format!("noise power must be >= 0, got {noise_power}")));
        }
        if dim == 0 {
            return Err(Error::invalid("block length must be at least 1"));
        }
        match gain_model {
            GainModel::Constant { value } if value == 0.0 || !value.is_finite() => {
                return Err(Error::invalid("constant channel gain must be finite and nonzero"));
            }
            GainModel::Rayleigh { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return Err(Error::invalid("Rayleigh scale must be positive"));
            }
            _ => {}
        }
        Ok(Self {
            power,
            noise_power,
            dim,
            gain_model,
        })
    }

    pub fn from_snr_db(power: f64, dim: usize, snr_db: f64, gain_model: GainModel) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid(format!("SNR must be finite or +inf, got {snr_db}")));
        }
        Self::new(power, noise_power_from_snr_db(power, dim, snr_db), dim, gain_model)
    }

    /// `P / (d N0)`, infinite for a noiseless channel.
    pub fn snr(&self) -> f64 {
        if self.noise_power == 0.0 {
            f64::INFINITY
        } else {
            self.power / (self.dim as f64 * self.noise_power)
        }
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * self.snr().log10()
    }

    /// Draws this round's gains. Constant gains consume no randomness.
    pub fn draw_gains<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        match self.gain_model {
            GainModel::Constant { value } => vec![value; k],
            GainModel::Rayleigh { scale } => (0..k)
                .map(|_| {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    scale * a.hypot(b)
                })
                .collect(),
        }
    }
}

/// Rejects rounds in which some `|h_k|` is negligible relative to the median.
pub fn check_gains(gains: &[f64], round: usize) -> Result<()> {
    let mut mags: Vec<f64> = gains.iter().map(|h| h.abs()).collect();
    mags.sort_by(|a, b| a.total_cmp(b));
    let median = if mags.is_empty() {
        return Err(Error::invalid("no channel gains"));
    } else if mags.len() % 2 == 1 {
        mags[mags.len() / 2]
    } else {
        0.5 * (mags[mags.len() / 2 - 1] + mags[mags.len() / 2])
    };
    for (device, &h) in gains.iter().enumerate() {
        if !h.is_finite() || h == 0.0 || h.abs() < DEEP_FADE_RATIO * median {
            return Err(Error::DeepFade { device, round, gain: h });
        }
    }
    Ok(())
}

/// Which term of the gain rule was active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainBranch {
    /// `alpha = sqrt(N0 / (2 eta K))`: channel noise supplies exactly the Langevin noise.
    Langevin,
    /// A device's power budget caps `alpha`.
    PowerLimited,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerGain {
    pub alpha: f64,
    pub branch: GainBranch,
}

/// The local SGD payload `theta_k - eta * grad_k` carried by the transmit signal.
pub fn sgd_payload(theta: &DVector<f64>, grad: &DVector<f64>, eta: f64) -> DVector<f64> {
    theta - grad * eta
}

/// `x_k = alpha_k * payload_k`.
pub fn transmit_signal(payload: &DVector<f64>, alpha_k: f64) -> Result<DVector<f64>> {
    if !(alpha_k.is_finite() && alpha_k != 0.0) {
        return Err(Error::invalid(format!("device gain must be finite and nonzero, got {alpha_k}")));
    }
    Ok(payload * alpha_k)
}

/// Largest common gain allowed by the power budgets, `min_k sqrt(P) |h_k| / ||payload_k||`.
///
/// Zero payloads impose no constraint; `None` when no payload constrains `alpha`.
pub fn channel_inversion_cap(payloads: &[DVector<f64>], gains: &[f64], power: f64) -> Result<Option<f64>> {
    if payloads.len() != gains.len() {
        return Err(Error::invalid(format!(
            "{} payloads but {} gains",
            payloads.len(),
            gains.len()
        )));
    }
    let cap = payloads
        .iter()
        .zip(gains)
        .filter_map(|(p, h)| {
            let norm = p.norm();
            (norm > 0.0).then(|| power.sqrt() * h.abs() / norm)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(cap.is_finite().then_some(cap))
}

/// Common gain `alpha = min{ sqrt(N0 / (2 eta K)), min_k sqrt(P)|h_k| / ||payload_k|| }`.
pub fn power_gain(
    payloads: &[DVector<f64>],
    gains: &[f64],
    power: f64,
    noise_power: f64,
    eta: f64,
    k: usize,
) -> Result<PowerGain> {
    if !(eta > 0.0) || k == 0 {
        return Err(Error::invalid("need eta > 0 and K >= 1"));
    }
    let langevin = (noise_power / (2.0 * eta * k as f64)).sqrt();
    match channel_inversion_cap(payloads, gains, power)? {
        Some(cap) if cap < langevin => Ok(PowerGain {
            alpha: cap,
            branch: GainBranch::PowerLimited,
        }),
        _ => Ok(PowerGain {
            alpha: langevin,
            branch: GainBranch::Langevin,
        }),
    }
}

/// Residual noise power `max{0, N0 / (alpha K)^2 - 2 eta / K}`.
pub fn residual_noise(noise_power: f64, alpha: f64, eta: f64, k: usize) -> f64 {
    let k = k as f64;
    (noise_power / (alpha * k).powi(2) - 2.0 * eta / k).max(0.0)
}

/// `sum_k h_k x_k + z` for a given noise realization.
pub fn superpose_with(signals: &[DVector<f64>], gains: &[f64], noise: &DVector<f64>) -> Result<DVector<f64>> {
    if signals.len() != gains.len() {
        return Err(Error::invalid(format!(
            "{} signals but {} gains",
            signals.len(),
            gains.len()
        )));
    }
    let d = noise.len();
    let mut y = noise.clone();
    for (x, &h) in signals.iter().zip(gains) {
        if x.len() != d {
            return Err(Error::invalid("signal length differs from block length"));
        }
        y.axpy(h, x, 1.0);
    }
    Ok(y)
}

/// Superposition over the air with fresh noise `z = sqrt(N0) * zeta`, `zeta ~ N(0, I)`.
///
/// Returns `(y, z)`. Exactly `d` normals are drawn even when `N0 = 0`.
pub fn noma_superpose<R: Rng + ?Sized>(
    signals: &[DVector<f64>],
    gains: &[f64],
    noise_power: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = signals
        .first()
        .map(|x| x.len())
        .ok_or_else(|| Error::invalid("no signals to superpose"))?;
    let z = standard_normal_vector(d, rng) * noise_power.sqrt();
    let y = superpose_with(signals, gains, &z)?;
    Ok((y, z))
}

/// Server-side estimate `y / (K alpha)`.
pub fn receive_aggregate(y: &DVector<f64>, alpha: f64, k: usize) -> Result<DVector<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("receiver gain must be positive, got {alpha}")));
    }
    if k == 0 {
        return Err(Error::invalid("number of devices must be at least 1"));
    }
    Ok(y / (k as f64 * alpha))
}

/// Per-device feasibility of `||x_k||^2 <= P` (with [`POWER_RTOL`] slack).
pub fn check_power(signals: &[DVector<f64>], power: f64) -> Vec<bool> {
    signals
        .iter()
        .map(|x| x.norm_squared() <= power * (1.0 + POWER_RTOL))
        .collect()
}

/// Hard form of [`check_power`]: the first violating device becomes an error.
pub fn enforce_power(signals: &[DVector<f64>], power: f64, round: usize) -> Result<()> {
    for (device, ok) in check_power(signals, power).into_iter().enumerate() {
        if !ok {
            return Err(Error::PowerViolation {
                device,
                round,
                energy: signals[device].norm_squared(),
                budget: power,
            });
        }
    }
    Ok(())
}

/// Diagnostics of one over-the-air aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRound {
    pub s: usize,
    pub gains: Vec<f64>,
    /// The channel noise realization `z^[s]`.
    pub noise: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub branch: GainBranch,
    pub payload_norms: Vec<f64>,
    pub snr_db: f64,
}

impl ChannelRound {
    pub const CSV_HEADER: [&'static str; 7] = [
        "s",
        "alpha",
        "beta",
        "branch",
        "snr_db",
        "max_payload_norm",
        "payload_norms",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        let max_norm = self.payload_norms.iter().copied().fold(0.0, f64::max);
        let norms: Vec<String> = self.payload_norms.iter().map(f64::to_string).collect();
        vec![
            self.s.to_string(),
            self.alpha.to_string(),
            self.beta.to_string(),
            match self.branch {
                GainBranch::Langevin => "langevin".into(),
                GainBranch::PowerLimited => "power_limited".into(),
            },
            self.snr_db.to_string(),
            max_norm.to_string(),
            norms.join(";"),
        ]
    }
}

/// Gain rule of an over-the-air aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UplinkMode {
    /// Langevin-matched gain capped by the power budgets.
    Langevin,
    /// Scaled channel inversion only (frequentist over-the-air FedAvg).
    ChannelInversion,
}

/// An over-the-air aggregation step for a fixed channel, step size and population.
#[derive(Debug, Clone, Copy)]
pub struct Uplink {
    pub channel: ChannelConfig,
    pub eta: f64,
    pub devices: usize,
    pub mode: UplinkMode,
}

impl Uplink {
    /// Runs power control, transmission, superposition and receiver scaling.
    ///
    /// With `N0 = 0` in [`UplinkMode::Langevin`] the round is the `N0 -> 0`
    /// limit of the Langevin branch: signals are sent with the feasible
    /// channel-inversion gain (the received mean does not depend on `alpha`)
    /// and the rescaled channel noise takes its limiting law `N(0, 2 eta / K)`.
    pub fn aggregate<R1, R2>(
        &self,
        payloads: &[DVector<f64>],
        s: usize,
        gain_rng: &mut R1,
        noise_rng: &mut R2,
    ) -> Result<(DVector<f64>, ChannelRound)>
    where
        R1: Rng + ?Sized,
        R2: Rng + ?Sized,
    {
        let k = self.devices;
        if payloads.len() != k {
            return Err(Error::invalid(format!("{} payloads for {k} devices", payloads.len())));
        }
        let d = self.channel.dim;
        let n0 = self.channel.noise_power;
        let power = self.channel.power;
        let gains = self.channel.draw_gains(k, gain_rng);
        check_gains(&gains, s)?;
        let payload_norms: Vec<f64> = payloads.iter().map(|p| p.norm()).collect();

        // Without any nonzero payload the budgets do not bind; unit-norm
        // payloads stand in for the cap.
        let inversion = channel_inversion_cap(payloads, &gains, power)?.unwrap_or_else(|| {
            power.sqrt() * gains.iter().map(|h| h.abs()).fold(f64::INFINITY, f64::min)
        });
        let noiseless_limit = self.mode == UplinkMode::Langevin && n0 == 0.0;
        let (alpha, branch) = match self.mode {
            UplinkMode::Langevin if !noiseless_limit => {
                let pg = power_gain(payloads, &gains, power, n0, self.eta, k)?;
                (pg.alpha, pg.branch)
            }
            UplinkMode::Langevin => (inversion, GainBranch::Langevin),
            UplinkMode::ChannelInversion => (inversion, GainBranch::PowerLimited),
        };

        let signals = payloads
            .iter()
            .zip(&gains)
            .map(|(p, h)| transmit_signal(p, alpha / h))
            .collect::<Result<Vec<_>>>()?;
        enforce_power(&signals, power, s)?;

        let zeta = standard_normal_vector(d, noise_rng);
        let z = &zeta * n0.sqrt();
        let y = superpose_with(&signals, &gains, &z)?;
        let mut aggregate = receive_aggregate(&y, alpha, k)?;
        if noiseless_limit {
            aggregate.axpy((2.0 * self.eta / k as f64).sqrt(), &zeta, 1.0);
        }

        let beta = match branch {
            GainBranch::Langevin if self.mode == UplinkMode::Langevin => 0.0,
            _ => residual_noise(n0, alpha, self.eta, k),
        };
        let round = ChannelRound {
            s,
            gains,
            noise: z.iter().copied().collect(),
            alpha,
            beta,
            branch,
            payload_norms,
            snr_db: self.channel.snr_db(),
        };
        Ok((aggregate, round))
    }
}
