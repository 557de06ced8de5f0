//! Full training runs of the four samplers behind a common [`Sampler`] trait.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Serialize, Serializer};

use crate::analysis::{self, Drift, Predictor};
use crate::channel::{sgd_payload, ChannelConfig, ChannelRound, GainBranch, GainModel, Uplink, UplinkMode};
use crate::error::{Error, Result};
use crate::model::{
    self, generate_synthetic, generate_test_sets, measure_constants, partition_even, Dataset,
    GaussianDist, GradientNoiseEstimate, LocalDataset, QuadraticCost, RegularityConstants,
};
use crate::rng::{self, Purpose, Stream};
use crate::sampling::{
    self, correlated_noise, device_gradients, draw_round_flag, fald_round, mean_particle,
    DeviceState, FaldParams, SharedRandomness, TauSchedule,
};

/// Ground-truth model of the synthetic benchmark.
pub const DEFAULT_THETA_STAR: [f64; 5] = [-0.0615, -1.6057, 1.7629, 1.0240, -1.5902];

fn serialize_snr<S: Serializer>(snr: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if snr.is_finite() {
        s.serialize_f64(*snr)
    } else {
        s.serialize_str("inf")
    }
}

/// Synthetic data and its split across devices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub devices: usize,
    pub dim: usize,
    pub samples: usize,
    pub theta_star: Vec<f64>,
    pub noise_std: f64,
    pub test_per_device: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            devices: 30,
            dim: 5,
            samples: 1200,
            theta_star: DEFAULT_THETA_STAR.to_vec(),
            noise_std: 1.0,
            test_per_device: 500,
        }
    }
}

/// Everything needed to reproduce one run (up to its seed).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Registry name of the sampler.
    pub algorithm: String,
    pub eta: f64,
    pub p_c: f64,
    pub p_b: f64,
    /// Total number of iterations `S`.
    pub iterations: usize,
    /// Burn-in `S_b`; samples `S_b + 1 ..= S` are retained.
    pub burn_in: usize,
    /// Channel SNR `P / (d N0)` in dB; `+inf` is a noiseless channel.
    #[serde(serialize_with = "serialize_snr")]
    pub snr_db: f64,
    pub power: f64,
    pub gain: GainModel,
    pub master_seed: u64,
    pub replicates: usize,
    /// Radius of the gradient-bound region in posterior standard deviations.
    pub region_std_devs: f64,
    /// Explicit radius, overriding `region_std_devs`.
    pub region_radius: Option<f64>,
    /// Constant noise correlation for FALD instead of aggregation-only sharing.
    pub tau: Option<f64>,
    /// Force aggregation on the last iteration; unset uses the algorithm's default.
    pub force_final_aggregation: Option<bool>,
    /// Stride of stored device particles when particle recording is on.
    pub thin: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            algorithm: "wfald".into(),
            eta: 3e-3,
            p_c: 0.5,
            p_b: 0.4,
            iterations: 200,
            burn_in: 100,
            snr_db: 30.0,
            power: 1.0,
            gain: GainModel::default(),
            master_seed: 1,
            replicates: 100,
            region_std_devs: 5.0,
            region_radius: None,
            tau: None,
            force_final_aggregation: None,
            thin: 1,
        }
    }
}

impl RunConfig {
    /// Range checks; each failure names the offending key.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::config(key, msg));
        let d = &self.data;
        if d.devices == 0 {
            return fail("data.devices", "must be at least 1".into());
        }
        if d.dim == 0 {
            return fail("data.dim", "must be at least 1".into());
        }
        if d.samples < d.devices {
            return fail("data.samples", format!("{} samples cannot cover {} devices", d.samples, d.devices));
        }
        if d.theta_star.len() != d.dim {
            return fail(
                "data.theta_star",
                format!("has {} entries but data.dim = {}", d.theta_star.len(), d.dim),
            );
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return fail("data.noise_std", format!("must be finite and >= 0, got {}", d.noise_std));
        }
        if d.test_per_device == 0 {
            return fail("data.test_per_device", "must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail("run.eta", format!("must be positive, got {}", self.eta));
        }
        if !(self.p_c > 0.0 && self.p_c <= 1.0) {
            return fail("run.p_c", format!("must lie in (0, 1], got {}", self.p_c));
        }
        if !(self.p_b > 0.0 && self.p_b <= 1.0) {
            return fail("run.p_b", format!("must lie in (0, 1], got {}", self.p_b));
        }
        if self.burn_in >= self.iterations {
            return fail(
                "run.burn_in",
                format!("must be below run.iterations = {}, got {}", self.iterations, self.burn_in),
            );
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return fail("channel.snr_db", format!("must be finite or inf, got {}", self.snr_db));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return fail("channel.power", format!("must be positive, got {}", self.power));
        }
        match self.gain {
            GainModel::Constant { value } if value == 0.0 || !value.is_finite() => {
                return fail("channel.gain_value", format!("must be finite and nonzero, got {value}"));
            }
            GainModel::Rayleigh { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return fail("channel.rayleigh_scale", format!("must be positive, got {scale}"));
            }
            _ => {}
        }
        if self.replicates == 0 {
            return fail("run.replicates", "must be at least 1".into());
        }
        if !(self.region_std_devs > 0.0 && self.region_std_devs.is_finite()) {
            return fail("bound.region_std_devs", format!("must be positive, got {}", self.region_std_devs));
        }
        if let Some(r) = self.region_radius {
            if !(r > 0.0 && r.is_finite()) {
                return fail("bound.region_radius", format!("must be positive, got {r}"));
            }
        }
        if let Some(t) = self.tau {
            if !(0.0..=1.0).contains(&t) {
                return fail("run.tau", format!("must lie in [0, 1], got {t}"));
            }
        }
        if self.thin == 0 {
            return fail("run.thin", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn channel(&self) -> Result<ChannelConfig> {
        ChannelConfig::from_snr_db(self.power, self.data.dim, self.snr_db, self.gain)
    }

    pub fn retained_samples(&self) -> usize {
        self.iterations - self.burn_in
    }
}

/// Data, oracles and constants shared by every replicate of a configuration.
///
/// Data and test sets are drawn from the master seed, so all replicates and all
/// grid points of a sweep see the same problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub data: Dataset,
    pub shards: Vec<LocalDataset>,
    pub test_sets: Vec<LocalDataset>,
    pub posterior: GaussianDist,
    pub cost: QuadraticCost,
    pub constants: RegularityConstants,
    /// Squared W2 distance from the common zero initialization to the posterior.
    pub w2_init: f64,
}

impl Problem {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let dc = &config.data;
        let theta_star = DVector::from_column_slice(&dc.theta_star);
        let mut data_rng = rng::stream(config.master_seed, Purpose::Data, 0);
        let data = generate_synthetic(dc.samples, dc.dim, &theta_star, dc.noise_std, &mut data_rng)?;
        let mut test_rng = rng::stream(config.master_seed, Purpose::TestSet, 0);
        let test_sets = generate_test_sets(dc.devices, dc.test_per_device, &theta_star, dc.noise_std, &mut test_rng)?;
        let test_sets = test_sets.iter().map(LocalDataset::whole).collect();
        Self::from_data(data, test_sets, config)
    }

    /// Builds the oracles for a given dataset.
    pub fn from_data(data: Dataset, test_sets: Vec<LocalDataset>, config: &RunConfig) -> Result<Self> {
        let k = config.data.devices;
        let shards = partition_even(&data, k)?;
        let cost = QuadraticCost::from_dataset(&data);
        let posterior = cost.posterior()?;
        let radius = config
            .region_radius
            .unwrap_or(config.region_std_devs * posterior.max_std());
        let mut const_rng = rng::stream(config.master_seed, Purpose::Constants, 0);
        let constants = measure_constants(
            &shards,
            k,
            radius,
            config.p_b,
            GradientNoiseEstimate::ClosedForm,
            &mut const_rng,
        )?;
        let start = GaussianDist::point_mass(DVector::zeros(data.dim()));
        let w2_init = analysis::w2_gaussian(&start, &posterior)?;
        Ok(Self {
            data,
            shards,
            test_sets,
            posterior,
            cost,
            constants,
            w2_init,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }
}

/// Diagnostics of iteration `s` (the step from `theta^[s]` to `theta^[s+1]`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub s: usize,
    pub aggregated: bool,
    /// Drift of the particles `theta_k^[s]` entering the iteration.
    pub v_theta: f64,
    pub v_c: f64,
    /// Receiver gain of a wireless aggregation, `None` otherwise.
    pub alpha: Option<f64>,
    /// Residual channel noise; zero on rounds without a wireless aggregation.
    pub beta: f64,
}

/// Scalar summaries of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub mse: f64,
    pub test_error_ensemble: f64,
    pub test_error_frequentist: f64,
    pub aggregation_rounds: usize,
    pub power_limited_rounds: usize,
    /// Wireless rounds whose transmit signals passed the power check.
    pub power_checks: usize,
    pub power_violations: usize,
    pub mean_v_theta: f64,
    pub mean_v_c: f64,
}

/// Output of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: String,
    pub seed: u64,
    pub config: RunConfig,
    pub constants: RegularityConstants,
    /// Device-averaged particle `theta~^[s]` for `s = 0 ..= S`.
    pub mean_trajectory: Vec<DVector<f64>>,
    /// One record per iteration `s = 0 .. S`.
    pub iterations: Vec<IterationRecord>,
    /// Device particles at `s = 0, thin, 2 thin, ..` and `S`, when recorded.
    pub particles: Option<Vec<(usize, Vec<DVector<f64>>)>>,
    pub channel_log: Vec<ChannelRound>,
    /// Per-device averages of the retained samples.
    pub device_means: Vec<DVector<f64>>,
    pub final_particles: Vec<DVector<f64>>,
    /// MSE of the running post-burn-in averages after iteration `s`, for `s > S_b`.
    pub running_mse: Vec<Option<f64>>,
    pub metrics: RunMetrics,
}

impl RunResult {
    pub fn trajectory_len(&self) -> usize {
        self.mean_trajectory.len()
    }

    /// Per-round residual noise as realized (zero on local rounds).
    pub fn beta_sequence(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.beta).collect()
    }
}

/// Per-run switches that do not change the sampled law.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub record_particles: bool,
}

/// A sampler that can be selected by name.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the last iteration aggregates unless configured otherwise.
    fn forces_final_aggregation(&self) -> bool {
        false
    }

    fn run(&self, problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult>;
}

pub struct Wfald;
pub struct Fald;
pub struct Sgld;
pub struct WFedAvg;

impl Sampler for Wfald {
    fn name(&self) -> &'static str {
        "wfald"
    }

    fn run(&self, problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult> {
        let force = config.force_final_aggregation.unwrap_or(self.forces_final_aggregation());
        run_federated(problem, config, seed, options, Rule::Wireless { langevin: true }, force, self.name())
    }
}

impl Sampler for Fald {
    fn name(&self) -> &'static str {
        "fald"
    }

    fn run(&self, problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult> {
        let tau = config.tau.map_or(TauSchedule::AggregationOnly, TauSchedule::Constant);
        let force = config.force_final_aggregation.unwrap_or(self.forces_final_aggregation());
        run_federated(problem, config, seed, options, Rule::Noiseless(tau), force, self.name())
    }
}

impl Sampler for WFedAvg {
    fn name(&self) -> &'static str {
        "wfedavg"
    }

    fn forces_final_aggregation(&self) -> bool {
        true
    }

    fn run(&self, problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult> {
        let force = config.force_final_aggregation.unwrap_or(self.forces_final_aggregation());
        run_federated(problem, config, seed, options, Rule::Wireless { langevin: false }, force, self.name())
    }
}

impl Sampler for Sgld {
    fn name(&self) -> &'static str {
        "sgld"
    }

    fn run(&self, problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult> {
        run_centralized(problem, config, seed, options)
    }
}

/// Samplers addressable by name.
pub struct SamplerRegistry {
    samplers: BTreeMap<String, Box<dyn Sampler>>,
}

impl SamplerRegistry {
    pub fn empty() -> Self {
        Self {
            samplers: BTreeMap::new(),
        }
    }

    pub fn with_builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(Wfald));
        reg.register(Box::new(Fald));
        reg.register(Box::new(Sgld));
        reg.register(Box::new(WFedAvg));
        reg
    }

    /// Adds a sampler, replacing any previous one with the same name.
    pub fn register(&mut self, sampler: Box<dyn Sampler>) {
        self.samplers.insert(sampler.name().to_string(), sampler);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Sampler> {
        self.samplers.get(name).map(|s| s.as_ref()).ok_or_else(|| {
            Error::config(
                "run.algorithm",
                format!("unknown algorithm `{name}`; available: {}", self.names().join(", ")),
            )
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.samplers.keys().map(String::as_str).collect()
    }
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

fn run_with(name: &str, problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult> {
    let registry = SamplerRegistry::with_builtin();
    let mut cfg = config.clone();
    cfg.algorithm = name.to_string();
    registry.get(name)?.run(problem, &cfg, seed, options)
}

pub fn run_wfald(problem: &Problem, config: &RunConfig, seed: u64) -> Result<RunResult> {
    run_with("wfald", problem, config, seed, RunOptions::default())
}

pub fn run_fald(problem: &Problem, config: &RunConfig, seed: u64) -> Result<RunResult> {
    run_with("fald", problem, config, seed, RunOptions::default())
}

pub fn run_sgld(problem: &Problem, config: &RunConfig, seed: u64) -> Result<RunResult> {
    run_with("sgld", problem, config, seed, RunOptions::default())
}

pub fn run_wfedavg(problem: &Problem, config: &RunConfig, seed: u64) -> Result<RunResult> {
    run_with("wfedavg", problem, config, seed, RunOptions::default())
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    Noiseless(TauSchedule),
    /// Over-the-air aggregation; `langevin` selects WFALD over WFedAvg.
    Wireless { langevin: bool },
}

/// Streams driving the channel of one run.
pub struct ChannelStreams {
    pub gains: Stream,
    pub noise: Stream,
}

impl ChannelStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            gains: rng::stream(seed, Purpose::ChannelGain, 0),
            noise: rng::stream(seed, Purpose::ChannelNoise, 0),
        }
    }
}

/// Outcome of one wireless iteration.
#[derive(Debug, Clone)]
pub struct WirelessOutcome {
    pub aggregated: bool,
    pub grads: Vec<DVector<f64>>,
    pub channel: Option<ChannelRound>,
}

/// One WFALD (or, with `langevin = false`, WFedAvg) iteration.
///
/// Every device forms its SGD payload. On an aggregation round the payloads
/// are averaged over the air and the estimate is broadcast; otherwise each
/// device adds private Langevin noise (WFALD) or keeps the payload (WFedAvg).
#[allow(clippy::too_many_arguments)]
pub fn wireless_round(
    devices: &mut [DeviceState],
    shards: &[LocalDataset],
    uplink: &Uplink,
    p_b: f64,
    p_c: f64,
    shared: &mut SharedRandomness,
    streams: &mut ChannelStreams,
    iteration: usize,
    force_aggregation: bool,
) -> Result<WirelessOutcome> {
    let k = devices.len();
    let aggregated = draw_round_flag(shared, p_c)? || force_aggregation;
    let grads = device_gradients(devices, shards, p_b)?;
    let payloads: Vec<DVector<f64>> = devices
        .iter()
        .zip(&grads)
        .map(|(dev, g)| sgd_payload(&dev.theta, g, uplink.eta))
        .collect();

    if aggregated {
        let (aggregate, round) = uplink.aggregate(&payloads, iteration, &mut streams.gains, &mut streams.noise)?;
        if aggregate.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { device: 0, iteration });
        }
        for dev in devices.iter_mut() {
            dev.theta.copy_from(&aggregate);
        }
        return Ok(WirelessOutcome {
            aggregated,
            grads,
            channel: Some(round),
        });
    }

    let d = payloads[0].len();
    let no_common = DVector::zeros(d);
    for (dev, payload) in devices.iter_mut().zip(payloads) {
        dev.theta = match uplink.mode {
            UplinkMode::Langevin => {
                let xi = correlated_noise(0.0, k, &no_common, dev.noise_rng())?;
                let mut next = payload;
                next.axpy((2.0 * uplink.eta).sqrt(), &xi, 1.0);
                next
            }
            UplinkMode::ChannelInversion => payload,
        };
        dev.ensure_finite(iteration)?;
    }
    Ok(WirelessOutcome {
        aggregated,
        grads,
        channel: None,
    })
}

/// Running bookkeeping shared by the federated and centralized loops.
struct Recorder {
    burn_in: usize,
    thin: usize,
    iterations: usize,
    record_particles: bool,
    mean_trajectory: Vec<DVector<f64>>,
    particles: Vec<(usize, Vec<DVector<f64>>)>,
    sums: Vec<DVector<f64>>,
    retained: usize,
    running_mse: Vec<Option<f64>>,
}

impl Recorder {
    fn new(config: &RunConfig, options: RunOptions, devices: &[DVector<f64>]) -> Self {
        let d = devices[0].len();
        let mut rec = Self {
            burn_in: config.burn_in,
            thin: config.thin,
            iterations: config.iterations,
            record_particles: options.record_particles,
            mean_trajectory: Vec::with_capacity(config.iterations + 1),
            particles: Vec::new(),
            sums: vec![DVector::zeros(d); devices.len()],
            retained: 0,
            running_mse: Vec::with_capacity(config.iterations),
        };
        rec.observe(0, devices, None);
        rec
    }

    /// Records the particles `theta^[s]`.
    fn observe(&mut self, s: usize, devices: &[DVector<f64>], posterior_mean: Option<&DVector<f64>>) {
        let d = devices[0].len();
        let mean = devices.iter().fold(DVector::zeros(d), |acc, x| acc + x) / devices.len() as f64;
        self.mean_trajectory.push(mean);
        if self.record_particles && (s.is_multiple_of(self.thin) || s == self.iterations) {
            self.particles.push((s, devices.to_vec()));
        }
        if s == 0 {
            return;
        }
        if s > self.burn_in {
            for (sum, x) in self.sums.iter_mut().zip(devices) {
                *sum += x;
            }
            self.retained += 1;
            let mse = posterior_mean.map(|mu| {
                let scale = 1.0 / self.retained as f64;
                self.sums.iter().map(|sum| (sum * scale - mu).norm_squared()).sum::<f64>() / self.sums.len() as f64
            });
            self.running_mse.push(mse);
        } else {
            self.running_mse.push(None);
        }
    }

    fn device_means(&self) -> Vec<DVector<f64>> {
        let scale = 1.0 / self.retained.max(1) as f64;
        self.sums.iter().map(|s| s * scale).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    name: &str,
    problem: &Problem,
    config: &RunConfig,
    seed: u64,
    rec: Recorder,
    iterations: Vec<IterationRecord>,
    channel_log: Vec<ChannelRound>,
    final_particles: Vec<DVector<f64>>,
) -> Result<RunResult> {
    let device_means = rec.device_means();
    let mse = analysis::mse_from_means(&device_means, problem.posterior.mean())?;

    // A centralized chain predicts for every device with the same parameter.
    let per_device = |v: &[DVector<f64>]| -> Vec<DVector<f64>> {
        if v.len() == problem.test_sets.len() {
            v.to_vec()
        } else {
            vec![v[0].clone(); problem.test_sets.len()]
        }
    };
    let ens = per_device(&device_means);
    let last = per_device(&final_particles);
    let ens_pred: Vec<_> = ens.iter().map(Predictor::PointEstimate).collect();
    let last_pred: Vec<_> = last.iter().map(Predictor::PointEstimate).collect();
    let test_error_ensemble = analysis::predictive_error(&ens_pred, &problem.test_sets)?;
    let test_error_frequentist = analysis::predictive_error(&last_pred, &problem.test_sets)?;

    let n = iterations.len().max(1) as f64;
    let metrics = RunMetrics {
        mse,
        test_error_ensemble,
        test_error_frequentist,
        aggregation_rounds: iterations.iter().filter(|r| r.aggregated).count(),
        power_limited_rounds: channel_log
            .iter()
            .filter(|r| r.branch == GainBranch::PowerLimited)
            .count(),
        power_checks: channel_log.len(),
        power_violations: 0,
        mean_v_theta: iterations.iter().map(|r| r.v_theta).sum::<f64>() / n,
        mean_v_c: iterations.iter().map(|r| r.v_c).sum::<f64>() / n,
    };
    Ok(RunResult {
        algorithm: name.to_string(),
        seed,
        config: config.clone(),
        constants: problem.constants.clone(),
        mean_trajectory: rec.mean_trajectory,
        iterations,
        particles: rec.record_particles.then_some(rec.particles),
        channel_log,
        device_means,
        final_particles,
        running_mse: rec.running_mse,
        metrics,
    })
}

fn run_federated(
    problem: &Problem,
    config: &RunConfig,
    seed: u64,
    options: RunOptions,
    rule: Rule,
    force_final: bool,
    name: &str,
) -> Result<RunResult> {
    config.validate()?;
    let k = config.data.devices;
    let d = problem.dim();
    if problem.shards.len() != k || config.data.dim != d {
        return Err(Error::invalid("problem does not match the configuration"));
    }
    let mut devices: Vec<DeviceState> = (0..k).map(|i| DeviceState::new(i, DVector::zeros(d), seed)).collect();
    let mut shared = SharedRandomness::new(seed);
    let mut streams = ChannelStreams::new(seed);
    let uplink = match rule {
        Rule::Wireless { langevin } => Some(Uplink {
            channel: config.channel()?,
            eta: config.eta,
            devices: k,
            mode: if langevin {
                UplinkMode::Langevin
            } else {
                UplinkMode::ChannelInversion
            },
        }),
        Rule::Noiseless(_) => None,
    };

    let thetas = |devs: &[DeviceState]| devs.iter().map(|dv| dv.theta.clone()).collect::<Vec<_>>();
    let mut rec = Recorder::new(config, options, &thetas(&devices));
    let mut records = Vec::with_capacity(config.iterations);
    let mut channel_log = Vec::new();
    let mu = problem.posterior.mean();

    for s in 0..config.iterations {
        let force = force_final && s + 1 == config.iterations;
        let before = thetas(&devices);
        let avg = mean_particle(&devices);
        let (aggregated, grads, round) = match (rule, &uplink) {
            (Rule::Noiseless(tau), _) => {
                let params = FaldParams {
                    eta: config.eta,
                    p_b: config.p_b,
                    p_c: config.p_c,
                    tau,
                };
                let out = fald_round(&mut devices, &problem.shards, &params, &mut shared, s, force)?;
                (out.aggregated, out.grads, None)
            }
            (Rule::Wireless { .. }, Some(up)) => {
                let out = wireless_round(
                    &mut devices,
                    &problem.shards,
                    up,
                    config.p_b,
                    config.p_c,
                    &mut shared,
                    &mut streams,
                    s,
                    force,
                )?;
                (out.aggregated, out.grads, out.channel)
            }
            (Rule::Wireless { .. }, None) => unreachable!("wireless rule always builds an uplink"),
        };
        let Drift { v_theta, v_c } = analysis::client_drift(&before, &avg, &grads, &problem.cost)?;
        records.push(IterationRecord {
            s,
            aggregated,
            v_theta,
            v_c,
            alpha: round.as_ref().map(|r| r.alpha),
            beta: round.as_ref().map_or(0.0, |r| r.beta),
        });
        if let Some(r) = round {
            channel_log.push(r);
        }
        rec.observe(s + 1, &thetas(&devices), Some(mu));
    }
    let final_particles = thetas(&devices);
    finish(name, problem, config, seed, rec, records, channel_log, final_particles)
}

fn run_centralized(problem: &Problem, config: &RunConfig, seed: u64, options: RunOptions) -> Result<RunResult> {
    config.validate()?;
    let whole = LocalDataset::whole(&problem.data);
    let d = problem.dim();
    let mut chain = DeviceState::new(0, DVector::zeros(d), seed);
    let mut rec = Recorder::new(config, options, std::slice::from_ref(&chain.theta));
    let mut records = Vec::with_capacity(config.iterations);
    let mu = problem.posterior.mean();
    for s in 0..config.iterations {
        let grad = chain.stochastic_grad(&whole, config.p_b, 1)?;
        let v_c = (problem.cost.gradient(&chain.theta) - &grad).norm_squared();
        let theta = std::mem::take(&mut chain.theta);
        chain.theta = sampling::sgld_step(&theta, &grad, config.eta, chain.noise_rng())?;
        chain.ensure_finite(s)?;
        records.push(IterationRecord {
            s,
            aggregated: false,
            v_theta: 0.0,
            v_c,
            alpha: None,
            beta: 0.0,
        });
        rec.observe(s + 1, std::slice::from_ref(&chain.theta), Some(mu));
    }
    let final_particles = vec![chain.theta.clone()];
    finish("sgld", problem, config, seed, rec, records, Vec::new(), final_particles)
}

/// Batch size each device uses under `config`.
pub fn device_batch_sizes(problem: &Problem, p_b: f64) -> Result<Vec<usize>> {
    problem.shards.iter().map(|s| model::batch_size(s.len(), p_b)).collect()
}
