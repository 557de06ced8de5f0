//! Flat dotted-key configuration.
//!
//! A config file is TOML; nested tables are flattened to dotted keys, so
//! `[run]\neta = 0.01` and `run.eta = 0.01` are the same setting. Command-line
//! overrides use the same keys (`run.eta=0.01`) and are applied after the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::{Table, Value};

use crate::channel::GainModel;
use crate::error::{Error, Result};
use crate::protocol::{RunConfig, SamplerRegistry};

/// Every recognised key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.devices", "number of devices K"),
    ("data.dim", "model dimension d"),
    ("data.samples", "total training samples N"),
    ("data.theta_star", "ground-truth model used to generate data (array of d floats)"),
    ("data.noise_std", "target noise standard deviation"),
    ("data.test_per_device", "test examples per device"),
    ("run.algorithm", "sampler for `run`: wfald, fald, sgld or wfedavg"),
    ("run.eta", "step size"),
    ("run.p_c", "aggregation probability for `run`"),
    ("run.p_b", "mini-batch fraction"),
    ("run.iterations", "total iterations S"),
    ("run.burn_in", "burn-in S_b"),
    ("run.tau", "constant noise correlation for fald (default: 1 on aggregation rounds, 0 otherwise)"),
    ("run.force_final_aggregation", "aggregate on the last iteration (default: true for wfedavg only)"),
    ("run.thin", "stride of stored particles"),
    ("channel.snr_db", "SNR in dB for `run`; inf for a noiseless channel"),
    ("channel.power", "per-block transmit energy P"),
    ("channel.gain", "constant or rayleigh"),
    ("channel.gain_value", "gain of the constant model"),
    ("channel.rayleigh_scale", "scale of the Rayleigh model"),
    ("seed.master", "master seed"),
    ("bound.region_std_devs", "gradient-bound region radius in posterior standard deviations"),
    ("bound.region_radius", "explicit gradient-bound region radius"),
    ("sweep.pc_grid", "aggregation probabilities of a sweep"),
    ("sweep.snr_db_grid", "SNR levels of a sweep in dB"),
    ("sweep.algorithms", "samplers of a sweep"),
    ("sweep.replicates", "independent replicates per grid point"),
    ("sweep.output_dir", "directory receiving CSV and manifest files"),
    ("sweep.workers", "worker threads, 0 for one per core"),
    ("sweep.trace_stride", "iteration stride of trace rows"),
];

/// A grid of runs sharing one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub pc_grid: Vec<f64>,
    #[serde(serialize_with = "serialize_snr_list")]
    pub snr_db_grid: Vec<f64>,
    pub algorithms: Vec<String>,
    pub replicates: usize,
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub workers: usize,
    pub trace_stride: usize,
}

fn serialize_snr_list<S: serde::Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        if x.is_finite() {
            seq.serialize_element(x)?;
        } else {
            seq.serialize_element("inf")?;
        }
    }
    seq.end()
}

impl Default for SweepSpec {
    fn default() -> Self {
        let base = RunConfig::default();
        Self {
            replicates: base.replicates,
            base,
            pc_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            snr_db_grid: vec![10.0, 20.0, 30.0, 40.0],
            algorithms: vec!["wfald".into()],
            output_dir: PathBuf::from("out"),
            workers: 0,
            trace_stride: 1,
        }
    }
}

impl SweepSpec {
    /// A one-point sweep running the base configuration as given.
    pub fn single(&self) -> SweepSpec {
        SweepSpec {
            pc_grid: vec![self.base.p_c],
            snr_db_grid: vec![self.base.snr_db],
            algorithms: vec![self.base.algorithm.clone()],
            ..self.clone()
        }
    }

    /// Number of `(algorithm, p_c, snr)` grid points.
    pub fn grid_len(&self) -> usize {
        self.algorithms.len() * self.pc_grid.len() * self.snr_db_grid.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pc_grid.is_empty() {
            return Err(Error::config("sweep.pc_grid", "must not be empty"));
        }
        if self.snr_db_grid.is_empty() {
            return Err(Error::config("sweep.snr_db_grid", "must not be empty"));
        }
        if self.algorithms.is_empty() {
            return Err(Error::config("sweep.algorithms", "must not be empty"));
        }
        if self.replicates == 0 {
            return Err(Error::config("sweep.replicates", "must be at least 1"));
        }
        if self.trace_stride == 0 {
            return Err(Error::config("sweep.trace_stride", "must be at least 1"));
        }
        for &p in &self.pc_grid {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config("sweep.pc_grid", format!("values must lie in (0, 1], got {p}")));
            }
        }
        for &s in &self.snr_db_grid {
            if s.is_nan() || s == f64::NEG_INFINITY {
                return Err(Error::config("sweep.snr_db_grid", format!("values must be finite or inf, got {s}")));
            }
        }
        let registry = SamplerRegistry::with_builtin();
        for a in &self.algorithms {
            registry.get(a).map_err(|_| {
                Error::config(
                    "sweep.algorithms",
                    format!("unknown algorithm `{a}`; available: {}", registry.names().join(", ")),
                )
            })?;
        }
        registry.get(&self.base.algorithm)?;
        self.base.validate()
    }
}

/// Flattens nested tables to dotted keys.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in table {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Table(t) => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

/// Parses `key=value`. The value is read as a TOML value, falling back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(text, "override must have the form key=value"))?;
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(Error::config(text, "empty key"));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        Value::String(s) if s == "inf" || s == "noiseless" => Ok(f64::INFINITY),
        other => Err(Error::config(key, format!("expected a number, got {other}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::String(s) => {
            let parsed = match s.strip_prefix("0x") {
                Some(hex) => u64::from_str_radix(hex, 16),
                None => s.parse(),
            };
            parsed.map_err(|_| Error::config(key, format!("expected a non-negative integer, got \"{s}\"")))
        }
        other => Err(Error::config(key, format!("expected a non-negative integer, got {other}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).and_then(|x| usize::try_from(x).map_err(|_| Error::config(key, "value too large")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::config(key, format!("expected true or false, got {v}")))
}

fn as_string(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::config(key, format!("expected a string, got {v}")))
}

fn as_list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    match v {
        Value::Array(items) => items.iter().map(|x| item(key, x)).collect(),
        // A single value stands for a one-element list.
        other => Ok(vec![item(key, other)?]),
    }
}

#[derive(Default)]
struct GainSettings {
    kind: Option<String>,
    value: Option<f64>,
    scale: Option<f64>,
}

fn apply(spec: &mut SweepSpec, gain: &mut GainSettings, key: &str, v: &Value) -> Result<()> {
    let b = &mut spec.base;
    match key {
        "data.devices" => b.data.devices = as_usize(key, v)?,
        "data.dim" => b.data.dim = as_usize(key, v)?,
        "data.samples" => b.data.samples = as_usize(key, v)?,
        "data.theta_star" => b.data.theta_star = as_list(key, v, as_f64)?,
        "data.noise_std" => b.data.noise_std = as_f64(key, v)?,
        "data.test_per_device" => b.data.test_per_device = as_usize(key, v)?,
        "run.algorithm" => b.algorithm = as_string(key, v)?,
        "run.eta" => b.eta = as_f64(key, v)?,
        "run.p_c" => b.p_c = as_f64(key, v)?,
        "run.p_b" => b.p_b = as_f64(key, v)?,
        "run.iterations" => b.iterations = as_usize(key, v)?,
        "run.burn_in" => b.burn_in = as_usize(key, v)?,
        "run.tau" => b.tau = Some(as_f64(key, v)?),
        "run.force_final_aggregation" => b.force_final_aggregation = Some(as_bool(key, v)?),
        "run.thin" => b.thin = as_usize(key, v)?,
        "channel.snr_db" => b.snr_db = as_f64(key, v)?,
        "channel.power" => b.power = as_f64(key, v)?,
        "channel.gain" => gain.kind = Some(as_string(key, v)?),
        "channel.gain_value" => gain.value = Some(as_f64(key, v)?),
        "channel.rayleigh_scale" => gain.scale = Some(as_f64(key, v)?),
        "seed.master" => b.master_seed = as_u64(key, v)?,
        "bound.region_std_devs" => b.region_std_devs = as_f64(key, v)?,
        "bound.region_radius" => b.region_radius = Some(as_f64(key, v)?),
        "sweep.pc_grid" => spec.pc_grid = as_list(key, v, as_f64)?,
        "sweep.snr_db_grid" => spec.snr_db_grid = as_list(key, v, as_f64)?,
        "sweep.algorithms" => spec.algorithms = as_list(key, v, as_string)?,
        "sweep.replicates" => spec.replicates = as_usize(key, v)?,
        "sweep.output_dir" => spec.output_dir = PathBuf::from(as_string(key, v)?),
        "sweep.workers" => spec.workers = as_usize(key, v)?,
        "sweep.trace_stride" => spec.trace_stride = as_usize(key, v)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

fn resolve_gain(gain: GainSettings) -> Result<GainModel> {
    match gain.kind.as_deref().unwrap_or("constant") {
        "constant" => {
            if gain.scale.is_some() {
                return Err(Error::config("channel.rayleigh_scale", "only used with channel.gain = \"rayleigh\""));
            }
            Ok(GainModel::Constant {
                value: gain.value.unwrap_or(1.0),
            })
        }
        "rayleigh" => {
            if gain.value.is_some() {
                return Err(Error::config("channel.gain_value", "only used with channel.gain = \"constant\""));
            }
            Ok(GainModel::Rayleigh {
                scale: gain.scale.unwrap_or(1.0),
            })
        }
        other => Err(Error::config(
            "channel.gain",
            format!("expected \"constant\" or \"rayleigh\", got \"{other}\""),
        )),
    }
}

/// Builds a validated spec from config text and `key=value` overrides.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<SweepSpec> {
    let table: Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
    let mut settings = flatten(&table);
    for o in overrides {
        let (k, v) = parse_override(o)?;
        settings.insert(k, v);
    }
    let mut spec = SweepSpec::default();
    let mut gain = GainSettings::default();
    for (k, v) in &settings {
        apply(&mut spec, &mut gain, k, v)?;
    }
    spec.base.gain = resolve_gain(gain)?;
    spec.base.replicates = spec.replicates;
    spec.validate()?;
    Ok(spec)
}

/// Reads `path` (if any) and applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<SweepSpec> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
