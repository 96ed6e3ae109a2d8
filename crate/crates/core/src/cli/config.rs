//! Flat dotted key-value configuration.
//!
//! A config file is TOML restricted to scalar and array leaves addressed by
//! dotted keys (`dyna.k = 20`, or the same key under a `[dyna]` table).
//! Every leaf must be a known key; anything else is rejected with the key
//! named in the error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use toml::Value;

use crate::agent::AgentConfig;
use crate::bounds::C2Form;
use crate::dyna::DynaConfig;
use crate::env::{LinGaussParams, PendulumParams};
use crate::error::{Error, Result};
use crate::filter::{KeyMode, RejectSchedule, ScheduleKind};
use crate::model::{Kernel, MlpModelConfig};
use crate::nn::Activation;

pub const SEED_ENV_VAR: &str = "DYNA_OOD_SEED";

#[derive(Debug, Clone, PartialEq)]
pub enum EnvChoice {
    Pendulum(PendulumParams),
    LinearGaussian(LinGaussParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    Kde { kernel: Kernel, bandwidth: Bandwidth },
    Mlp { ensemble: usize },
}

/// `filter.epsilon`: `"off"`, `"dynamic"`, `"inf"` or a number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterChoice {
    Off,
    Static(f64),
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSettings {
    pub choice: FilterChoice,
    pub key_mode: KeyMode,
    pub action_weight: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsSettings {
    pub seeds: Vec<u64>,
    pub chebyshev_configs: usize,
    pub chebyshev_trials: usize,
    pub epsilon: f64,
    pub epsilon_kde: f64,
    pub pairs: usize,
    pub thetas: usize,
    pub safety: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub c2_form: C2Form,
    pub suites: Vec<String>,
}

pub const BOUND_SUITES: [&str; 4] = ["chebyshev", "theorem1", "theorem2", "prop1"];

impl Default for BoundsSettings {
    fn default() -> Self {
        BoundsSettings {
            seeds: vec![1, 2, 3, 4, 5],
            chebyshev_configs: 20,
            chebyshev_trials: 100_000,
            epsilon: 0.1,
            epsilon_kde: 0.1,
            pairs: 1000,
            thetas: 10,
            safety: 1.2,
            alpha: 0.1,
            gamma: 0.9,
            c2_form: C2Form::Stated,
            suites: BOUND_SUITES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub queries: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            sizes: vec![1_000, 10_000, 100_000],
            dim: 8,
            queries: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Non-empty: run one training per seed and aggregate.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub wallclock: bool,
    pub dump_buffers: bool,
    pub env: EnvChoice,
    pub model: ModelChoice,
    pub mlp: MlpModelConfig,
    pub agent: AgentConfig,
    pub dyna: DynaConfig,
    pub filter: FilterSettings,
    pub bounds: BoundsSettings,
    pub bench: BenchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: Vec::new(),
            output_dir: PathBuf::from("out"),
            wallclock: false,
            dump_buffers: false,
            env: EnvChoice::Pendulum(PendulumParams::default()),
            model: ModelChoice::Kde {
                kernel: Kernel::Gaussian,
                bandwidth: Bandwidth::Auto,
            },
            mlp: MlpModelConfig::default(),
            agent: AgentConfig::default(),
            dyna: DynaConfig::default(),
            filter: FilterSettings {
                choice: FilterChoice::Off,
                key_mode: KeyMode::StateAction,
                action_weight: 1.0,
                exact: false,
            },
            bounds: BoundsSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::config(key, msg)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        _ => Err(bad(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, "expected a non-negative integer")),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    as_usize(key, v).map(|x| x as u64)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "expected true or false"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "expected a string"))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    let arr = v.as_array().ok_or_else(|| bad(key, "expected an array of integers"))?;
    arr.iter().map(|x| as_usize(key, x)).collect()
}

fn as_activation(key: &str, v: &Value) -> Result<Activation> {
    match as_str(key, v)? {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        "linear" => Ok(Activation::Linear),
        other => Err(bad(key, format!("unknown activation `{other}`"))),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Linear => "linear",
    }
}

fn float(x: f64) -> Value {
    if x.is_infinite() {
        Value::String("inf".into())
    } else {
        Value::Float(x)
    }
}

fn int(x: usize) -> Value {
    Value::Integer(x as i64)
}

fn ints<T: Copy + Into<u64>>(xs: &[T]) -> Value {
    Value::Array(xs.iter().map(|x| Value::Integer((*x).into() as i64)).collect())
}

fn usizes(xs: &[usize]) -> Value {
    Value::Array(xs.iter().map(|x| int(*x)).collect())
}

const PENDULUM_KEYS: [&str; 10] = [
    "env.gravity",
    "env.length",
    "env.mass",
    "env.max_torque",
    "env.n_torques",
    "env.dt",
    "env.angle_bound",
    "env.velocity_bound",
    "env.init_angle",
    "env.init_velocity",
];

const LINGAUSS_KEYS: [&str; 8] = [
    "env.dim",
    "env.n_actions",
    "env.sigma",
    "env.a_norm",
    "env.b_scale",
    "env.init_scale",
    "env.box_half_width",
    "env.matrix_seed",
];

impl ExperimentConfig {
    /// Parse a document; `seed_override` is the raw value of the seed
    /// environment variable, if set.
    pub fn from_toml_str(text: &str, seed_override: Option<&str>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        if flat.is_empty() {
            return Err(bad("<file>", "config is empty"));
        }
        let mut cfg = ExperimentConfig::default();
        // the environment kind decides which env.* keys are legal, so set it first
        if let Some(v) = flat.remove("env.kind") {
            cfg.env = match as_str("env.kind", &v)? {
                "pendulum" => EnvChoice::Pendulum(PendulumParams::default()),
                "linear_gaussian" => EnvChoice::LinearGaussian(LinGaussParams::default()),
                other => return Err(bad("env.kind", format!("unknown environment `{other}`"))),
            };
        }
        if let Some(v) = flat.remove("model.kind") {
            cfg.model = match as_str("model.kind", &v)? {
                "kde" => ModelChoice::Kde {
                    kernel: Kernel::Gaussian,
                    bandwidth: Bandwidth::Auto,
                },
                "mlp" => ModelChoice::Mlp { ensemble: 1 },
                other => return Err(bad("model.kind", format!("unknown model `{other}`"))),
            };
        }
        let m = flat.remove("dyna.m");
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        if let Some(v) = m {
            let m = as_usize("dyna.m", &v)?;
            if m != cfg.dyna.rollout_size() {
                return Err(bad(
                    "dyna.m",
                    format!(
                        "rollout size must equal N * L = {} * {} = {}, got {m}",
                        cfg.dyna.branches,
                        cfg.dyna.rollout_length,
                        cfg.dyna.rollout_size()
                    ),
                ));
            }
        }
        if let Some(raw) = seed_override {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| bad(SEED_ENV_VAR, format!("expected an unsigned integer, got `{raw}`")))?;
            cfg.seeds.clear();
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = as_u64(k, v)?,
            "seeds" => {
                let arr = v.as_array().ok_or_else(|| bad(k, "expected an array of integers"))?;
                self.seeds = arr.iter().map(|x| as_u64(k, x)).collect::<Result<_>>()?;
            }
            "output.dir" => self.output_dir = PathBuf::from(as_str(k, v)?),
            "output.wallclock" => self.wallclock = as_bool(k, v)?,
            "output.dump_buffers" => self.dump_buffers = as_bool(k, v)?,

            "env.horizon" => match &mut self.env {
                EnvChoice::Pendulum(p) => p.horizon = as_usize(k, v)?,
                EnvChoice::LinearGaussian(p) => p.horizon = as_usize(k, v)?,
            },
            "env.gamma" => match &mut self.env {
                EnvChoice::Pendulum(p) => p.gamma = as_f64(k, v)?,
                EnvChoice::LinearGaussian(p) => p.gamma = as_f64(k, v)?,
            },
            _ if PENDULUM_KEYS.contains(&key) => {
                let EnvChoice::Pendulum(p) = &mut self.env else {
                    return Err(bad(k, "only valid with env.kind = \"pendulum\""));
                };
                match key {
                    "env.gravity" => p.gravity = as_f64(k, v)?,
                    "env.length" => p.length = as_f64(k, v)?,
                    "env.mass" => p.mass = as_f64(k, v)?,
                    "env.max_torque" => p.max_torque = as_f64(k, v)?,
                    "env.n_torques" => p.n_torques = as_usize(k, v)?,
                    "env.dt" => p.dt = as_f64(k, v)?,
                    "env.angle_bound" => p.angle_bound = as_f64(k, v)?,
                    "env.velocity_bound" => p.velocity_bound = as_f64(k, v)?,
                    "env.init_angle" => p.init_angle = as_f64(k, v)?,
                    _ => p.init_velocity = as_f64(k, v)?,
                }
            }
            _ if LINGAUSS_KEYS.contains(&key) => {
                let EnvChoice::LinearGaussian(p) = &mut self.env else {
                    return Err(bad(k, "only valid with env.kind = \"linear_gaussian\""));
                };
                match key {
                    "env.dim" => p.dim = as_usize(k, v)?,
                    "env.n_actions" => p.n_actions = as_usize(k, v)?,
                    "env.sigma" => p.sigma = as_f64(k, v)?,
                    "env.a_norm" => p.a_norm = as_f64(k, v)?,
                    "env.b_scale" => p.b_scale = as_f64(k, v)?,
                    "env.init_scale" => p.init_scale = as_f64(k, v)?,
                    "env.box_half_width" => p.box_half_width = as_f64(k, v)?,
                    _ => p.matrix_seed = as_u64(k, v)?,
                }
            }

            "model.kernel" | "model.bandwidth" => {
                let ModelChoice::Kde { kernel, bandwidth } = &mut self.model else {
                    return Err(bad(k, "only valid with model.kind = \"kde\""));
                };
                if key == "model.kernel" {
                    *kernel = match as_str(k, v)? {
                        "indicator" => Kernel::Indicator,
                        "gaussian" => Kernel::Gaussian,
                        other => return Err(bad(k, format!("unknown kernel `{other}`"))),
                    };
                } else {
                    *bandwidth = match v {
                        Value::String(s) if s == "auto" => Bandwidth::Auto,
                        _ => Bandwidth::Fixed(as_f64(k, v)?),
                    };
                }
            }
            "model.ensemble" => {
                let ModelChoice::Mlp { ensemble } = &mut self.model else {
                    return Err(bad(k, "only valid with model.kind = \"mlp\""));
                };
                *ensemble = as_usize(k, v)?;
            }
            "model.hidden" => self.mlp.hidden = as_usize_list(k, v)?,
            "model.activation" => self.mlp.activation = as_activation(k, v)?,
            "model.lr" => self.mlp.lr = as_f64(k, v)?,
            "model.batch_size" => self.mlp.batch_size = as_usize(k, v)?,
            "model.epochs" => self.dyna.refit_epochs = as_usize(k, v)?,
            "model.lipschitz_cap" => {
                self.mlp.lipschitz_cap = match v {
                    Value::String(s) if s == "none" => None,
                    _ => Some(as_f64(k, v)?),
                }
            }
            "model.residual" => self.mlp.residual = as_bool(k, v)?,
            "model.var_floor" => self.mlp.bounds.floor = as_f64(k, v)?,
            "model.var_ceiling" => self.mlp.bounds.ceiling = as_f64(k, v)?,
            "model.refit_period" => self.dyna.refit_period = as_usize(k, v)?,
            "model.pretrain_samples" => self.dyna.pretrain_samples = as_usize(k, v)?,
            "model.pretrain_epochs" => self.dyna.pretrain_epochs = as_usize(k, v)?,

            "agent.hidden" => self.agent.hidden = as_usize_list(k, v)?,
            "agent.activation" => self.agent.activation = as_activation(k, v)?,
            "agent.alpha" => self.agent.alpha = as_f64(k, v)?,
            "agent.gamma" => self.agent.gamma = as_f64(k, v)?,
            "agent.sync_period" => self.agent.sync_period = as_u64(k, v)?,
            "agent.batch_size" => self.dyna.batch_size = as_usize(k, v)?,
            "agent.real_fraction" => self.dyna.real_fraction = as_f64(k, v)?,
            "agent.explore_start" => self.dyna.explore_start = as_f64(k, v)?,
            "agent.explore_end" => self.dyna.explore_end = as_f64(k, v)?,
            "agent.explore_fraction" => self.dyna.explore_fraction = as_f64(k, v)?,

            "dyna.k" => self.dyna.episodes = as_usize(k, v)?,
            "dyna.h" => self.dyna.steps_per_episode = as_usize(k, v)?,
            "dyna.l" => self.dyna.rollout_length = as_usize(k, v)?,
            "dyna.n" => self.dyna.branches = as_usize(k, v)?,
            "dyna.g" => self.dyna.updates_per_step = as_usize(k, v)?,
            "dyna.sim_pool_steps" => self.dyna.sim_pool_steps = as_usize(k, v)?,
            "dyna.buffer_capacity" => self.dyna.buffer_capacity = as_usize(k, v)?,

            "filter.epsilon" => {
                self.filter.choice = match v {
                    Value::String(s) if s == "off" => FilterChoice::Off,
                    Value::String(s) if s == "dynamic" => FilterChoice::Dynamic,
                    _ => FilterChoice::Static(as_f64(k, v)?),
                }
            }
            "filter.key" => {
                self.filter.key_mode = match as_str(k, v)? {
                    "state" => KeyMode::StateOnly,
                    "state_action" => KeyMode::StateAction,
                    other => return Err(bad(k, format!("unknown key mode `{other}`"))),
                }
            }
            "filter.action_weight" => self.filter.action_weight = as_f64(k, v)?,
            "filter.exact" => self.filter.exact = as_bool(k, v)?,

            "index.m" => self.dyna.index.m_link = as_usize(k, v)?,
            "index.ef_construction" => self.dyna.index.ef_construction = as_usize(k, v)?,
            "index.ef_search" => self.dyna.index.ef_search = as_usize(k, v)?,
            "index.m_l" => {
                self.dyna.index.m_l = match v {
                    Value::String(s) if s == "auto" => None,
                    _ => Some(as_f64(k, v)?),
                }
            }

            "eval.every" => self.dyna.eval_every = as_usize(k, v)?,
            "eval.episodes" => self.dyna.eval_episodes = as_usize(k, v)?,

            "bounds.seeds" => {
                let arr = v.as_array().ok_or_else(|| bad(k, "expected an array of integers"))?;
                self.bounds.seeds = arr.iter().map(|x| as_u64(k, x)).collect::<Result<_>>()?;
            }
            "bounds.chebyshev_configs" => self.bounds.chebyshev_configs = as_usize(k, v)?,
            "bounds.trials" => self.bounds.chebyshev_trials = as_usize(k, v)?,
            "bounds.epsilon" => self.bounds.epsilon = as_f64(k, v)?,
            "bounds.epsilon_kde" => self.bounds.epsilon_kde = as_f64(k, v)?,
            "bounds.pairs" => self.bounds.pairs = as_usize(k, v)?,
            "bounds.thetas" => self.bounds.thetas = as_usize(k, v)?,
            "bounds.safety" => self.bounds.safety = as_f64(k, v)?,
            "bounds.alpha" => self.bounds.alpha = as_f64(k, v)?,
            "bounds.gamma" => self.bounds.gamma = as_f64(k, v)?,
            "bounds.c2_form" => {
                self.bounds.c2_form = match as_str(k, v)? {
                    "stated" => C2Form::Stated,
                    "rederived" => C2Form::Rederived,
                    other => return Err(bad(k, format!("unknown form `{other}`"))),
                }
            }
            "bounds.suites" => {
                let arr = v.as_array().ok_or_else(|| bad(k, "expected an array of suite names"))?;
                self.bounds.suites = arr.iter().map(|x| as_str(k, x).map(str::to_string)).collect::<Result<_>>()?;
            }

            "bench.sizes" => self.bench.sizes = as_usize_list(k, v)?,
            "bench.dim" => self.bench.dim = as_usize(k, v)?,
            "bench.queries" => self.bench.queries = as_usize(k, v)?,

            _ => return Err(bad(k, "unknown key")),
        }
        Ok(())
    }

    /// Fill derived fields (the filter schedule, the key-space action weight).
    fn resolve(&mut self) {
        let kind = match self.filter.choice {
            FilterChoice::Off => None,
            FilterChoice::Static(epsilon) => Some(ScheduleKind::Static { epsilon }),
            FilterChoice::Dynamic => Some(ScheduleKind::Dynamic {
                total_episodes: self.dyna.episodes,
                rollout_length: self.dyna.rollout_length,
            }),
        };
        self.dyna.filter = kind.map(|kind| RejectSchedule {
            kind,
            key_mode: self.filter.key_mode,
            action_weight: self.filter.action_weight,
        });
        self.dyna.filter_exact = self.filter.exact;
    }

    pub fn validate(&self) -> Result<()> {
        self.dyna.validate()?;
        if let Some(f) = &self.dyna.filter {
            RejectSchedule::new(f.kind, f.key_mode).map_err(|e| bad("filter.epsilon", e.to_string()))?;
        }
        match &self.env {
            EnvChoice::Pendulum(p) => crate::env::DiscretePendulumEnv::new(p.clone()).map(|_| ())?,
            EnvChoice::LinearGaussian(p) => crate::env::LinearGaussianEnv::from_params(p).map(|_| ())?,
        }
        match &self.model {
            ModelChoice::Kde { bandwidth: Bandwidth::Fixed(h), .. } if !(*h > 0.0) => {
                return Err(bad("model.bandwidth", "must be > 0"))
            }
            ModelChoice::Mlp { ensemble: 0 } => return Err(bad("model.ensemble", "must be >= 1")),
            _ => {}
        }
        let m = &self.mlp;
        if m.hidden.iter().any(|h| *h == 0) {
            return Err(bad("model.hidden", "layer widths must be >= 1"));
        }
        if !(m.lr > 0.0) {
            return Err(bad("model.lr", "must be > 0"));
        }
        if m.batch_size == 0 {
            return Err(bad("model.batch_size", "must be >= 1"));
        }
        if !(m.bounds.floor > 0.0 && m.bounds.floor < m.bounds.ceiling) {
            return Err(bad("model.var_floor", "need 0 < floor < ceiling"));
        }
        if let Some(c) = m.lipschitz_cap {
            if !(c > 0.0 && (!m.residual || c > 1.0)) {
                return Err(bad("model.lipschitz_cap", "must be > 0 (> 1 with a residual mean)"));
            }
        }
        if self.agent.hidden.iter().any(|h| *h == 0) {
            return Err(bad("agent.hidden", "layer widths must be >= 1"));
        }
        if !(self.agent.alpha > 0.0) {
            return Err(bad("agent.alpha", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.agent.gamma) {
            return Err(bad("agent.gamma", "must lie in [0, 1)"));
        }
        if self.dyna.index.m_link < 2 {
            return Err(bad("index.m", "must be >= 2"));
        }
        if self.dyna.index.ef_search == 0 || self.dyna.index.ef_construction == 0 {
            return Err(bad("index.ef_search", "search widths must be >= 1"));
        }
        let b = &self.bounds;
        for (k, e) in [("bounds.epsilon", b.epsilon), ("bounds.epsilon_kde", b.epsilon_kde)] {
            if !(e > 0.0 && e < 1.0) {
                return Err(bad(k, "must lie in (0, 1)"));
            }
        }
        if b.chebyshev_trials < crate::bounds::MIN_CHEBYSHEV_TRIALS {
            return Err(bad(
                "bounds.trials",
                format!("at least {} trials required", crate::bounds::MIN_CHEBYSHEV_TRIALS),
            ));
        }
        if b.seeds.is_empty() {
            return Err(bad("bounds.seeds", "need at least one seed"));
        }
        if !(b.safety >= 1.0) {
            return Err(bad("bounds.safety", "must be >= 1"));
        }
        if !(b.alpha > 0.0) || !(0.0..1.0).contains(&b.gamma) {
            return Err(bad("bounds.alpha", "need alpha > 0 and gamma in [0, 1)"));
        }
        if let Some(s) = b.suites.iter().find(|s| !BOUND_SUITES.contains(&s.as_str())) {
            return Err(bad("bounds.suites", format!("unknown suite `{s}`")));
        }
        if self.bench.dim == 0 || self.bench.queries == 0 {
            return Err(bad("bench.dim", "dimension and query count must be >= 1"));
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", Value::Integer(self.seed as i64));
        put("seeds", ints(&self.seeds));
        put("output.dir", Value::String(self.output_dir.display().to_string()));
        put("output.wallclock", Value::Boolean(self.wallclock));
        put("output.dump_buffers", Value::Boolean(self.dump_buffers));
        match &self.env {
            EnvChoice::Pendulum(p) => {
                put("env.kind", Value::String("pendulum".into()));
                put("env.gravity", float(p.gravity));
                put("env.length", float(p.length));
                put("env.mass", float(p.mass));
                put("env.max_torque", float(p.max_torque));
                put("env.n_torques", int(p.n_torques));
                put("env.dt", float(p.dt));
                put("env.angle_bound", float(p.angle_bound));
                put("env.velocity_bound", float(p.velocity_bound));
                put("env.init_angle", float(p.init_angle));
                put("env.init_velocity", float(p.init_velocity));
                put("env.horizon", int(p.horizon));
                put("env.gamma", float(p.gamma));
            }
            EnvChoice::LinearGaussian(p) => {
                put("env.kind", Value::String("linear_gaussian".into()));
                put("env.dim", int(p.dim));
                put("env.n_actions", int(p.n_actions));
                put("env.sigma", float(p.sigma));
                put("env.a_norm", float(p.a_norm));
                put("env.b_scale", float(p.b_scale));
                put("env.init_scale", float(p.init_scale));
                put("env.box_half_width", float(p.box_half_width));
                put("env.matrix_seed", Value::Integer(p.matrix_seed as i64));
                put("env.horizon", int(p.horizon));
                put("env.gamma", float(p.gamma));
            }
        }
        match &self.model {
            ModelChoice::Kde { kernel, bandwidth } => {
                put("model.kind", Value::String("kde".into()));
                put(
                    "model.kernel",
                    Value::String(
                        match kernel {
                            Kernel::Indicator => "indicator",
                            Kernel::Gaussian => "gaussian",
                        }
                        .into(),
                    ),
                );
                put(
                    "model.bandwidth",
                    match bandwidth {
                        Bandwidth::Auto => Value::String("auto".into()),
                        Bandwidth::Fixed(h) => float(*h),
                    },
                );
            }
            ModelChoice::Mlp { ensemble } => {
                put("model.kind", Value::String("mlp".into()));
                put("model.ensemble", int(*ensemble));
            }
        }
        put("model.hidden", usizes(&self.mlp.hidden));
        put("model.activation", Value::String(activation_name(self.mlp.activation).into()));
        put("model.lr", float(self.mlp.lr));
        put("model.batch_size", int(self.mlp.batch_size));
        put("model.epochs", int(self.dyna.refit_epochs));
        put(
            "model.lipschitz_cap",
            self.mlp.lipschitz_cap.map_or(Value::String("none".into()), float),
        );
        put("model.residual", Value::Boolean(self.mlp.residual));
        put("model.var_floor", float(self.mlp.bounds.floor));
        put("model.var_ceiling", float(self.mlp.bounds.ceiling));
        put("model.refit_period", int(self.dyna.refit_period));
        put("model.pretrain_samples", int(self.dyna.pretrain_samples));
        put("model.pretrain_epochs", int(self.dyna.pretrain_epochs));
        put("agent.hidden", usizes(&self.agent.hidden));
        put("agent.activation", Value::String(activation_name(self.agent.activation).into()));
        put("agent.alpha", float(self.agent.alpha));
        put("agent.gamma", float(self.agent.gamma));
        put("agent.sync_period", Value::Integer(self.agent.sync_period as i64));
        put("agent.batch_size", int(self.dyna.batch_size));
        put("agent.real_fraction", float(self.dyna.real_fraction));
        put("agent.explore_start", float(self.dyna.explore_start));
        put("agent.explore_end", float(self.dyna.explore_end));
        put("agent.explore_fraction", float(self.dyna.explore_fraction));
        put("dyna.k", int(self.dyna.episodes));
        put("dyna.h", int(self.dyna.steps_per_episode));
        put("dyna.l", int(self.dyna.rollout_length));
        put("dyna.n", int(self.dyna.branches));
        put("dyna.m", int(self.dyna.rollout_size()));
        put("dyna.g", int(self.dyna.updates_per_step));
        put("dyna.sim_pool_steps", int(self.dyna.sim_pool_steps));
        put("dyna.buffer_capacity", int(self.dyna.buffer_capacity));
        put(
            "filter.epsilon",
            match self.filter.choice {
                FilterChoice::Off => Value::String("off".into()),
                FilterChoice::Dynamic => Value::String("dynamic".into()),
                FilterChoice::Static(e) => float(e),
            },
        );
        put(
            "filter.key",
            Value::String(
                match self.filter.key_mode {
                    KeyMode::StateOnly => "state",
                    KeyMode::StateAction => "state_action",
                }
                .into(),
            ),
        );
        put("filter.action_weight", float(self.filter.action_weight));
        put("filter.exact", Value::Boolean(self.filter.exact));
        put("index.m", int(self.dyna.index.m_link));
        put("index.ef_construction", int(self.dyna.index.ef_construction));
        put("index.ef_search", int(self.dyna.index.ef_search));
        put("index.m_l", self.dyna.index.m_l.map_or(Value::String("auto".into()), float));
        put("eval.every", int(self.dyna.eval_every));
        put("eval.episodes", int(self.dyna.eval_episodes));
        put("bounds.seeds", ints(&self.bounds.seeds));
        put("bounds.chebyshev_configs", int(self.bounds.chebyshev_configs));
        put("bounds.trials", int(self.bounds.chebyshev_trials));
        put("bounds.epsilon", float(self.bounds.epsilon));
        put("bounds.epsilon_kde", float(self.bounds.epsilon_kde));
        put("bounds.pairs", int(self.bounds.pairs));
        put("bounds.thetas", int(self.bounds.thetas));
        put("bounds.safety", float(self.bounds.safety));
        put("bounds.alpha", float(self.bounds.alpha));
        put("bounds.gamma", float(self.bounds.gamma));
        put(
            "bounds.c2_form",
            Value::String(
                match self.bounds.c2_form {
                    C2Form::Stated => "stated",
                    C2Form::Rederived => "rederived",
                }
                .into(),
            ),
        );
        put(
            "bounds.suites",
            Value::Array(self.bounds.suites.iter().map(|s| Value::String(s.clone())).collect()),
        );
        put("bench.sizes", usizes(&self.bench.sizes));
        put("bench.dim", int(self.bench.dim));
        put("bench.queries", int(self.bench.queries));
        m
    }

    /// Resolved config as dotted `key = value` lines; parses back to an
    /// equal config.
    pub fn to_dotted_toml(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Read and validate a config file, applying the seed environment variable.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let env_seed = std::env::var(SEED_ENV_VAR).ok();
    ExperimentConfig::from_toml_str(&text, env_seed.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(s, None)
    }

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        assert_eq!(key_of(parse("").unwrap_err()), "<file>");
        assert_eq!(key_of(parse("# only a comment\n").unwrap_err()), "<file>");
    }

    #[test]
    fn rollout_size_mismatch_names_key() {
        assert_eq!(key_of(parse("dyna.n = 10\ndyna.l = 5\ndyna.m = 40\n").unwrap_err()), "dyna.m");
        assert!(parse("dyna.n = 10\ndyna.l = 5\ndyna.m = 50\n").is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert_eq!(key_of(parse("dyna.q = 1\n").unwrap_err()), "dyna.q");
        assert_eq!(key_of(parse("[agent]\nlearning_rate = 0.1\n").unwrap_err()), "agent.learning_rate");
        assert_eq!(key_of(parse("env.sigma = 0.1\n").unwrap_err()), "env.sigma");
    }

    #[test]
    fn tables_and_dotted_keys_agree() {
        let a = parse("dyna.k = 7\ndyna.l = 3\n").unwrap();
        let b = parse("[dyna]\nk = 7\nl = 3\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dyna.episodes, 7);
    }

    #[test]
    fn dynamic_filter_row_shape_accepted() {
        let c = parse("dyna.k = 20\ndyna.l = 5\ndyna.n = 80\nfilter.epsilon = \"dynamic\"\n").unwrap();
        assert_eq!(
            c.dyna.filter.unwrap().kind,
            ScheduleKind::Dynamic {
                total_episodes: 20,
                rollout_length: 5
            }
        );
    }

    #[test]
    fn epsilon_forms() {
        assert_eq!(parse("filter.epsilon = \"off\"\n").unwrap().dyna.filter, None);
        let c = parse("filter.epsilon = \"inf\"\n").unwrap();
        assert_eq!(c.dyna.filter.unwrap().kind, ScheduleKind::Static { epsilon: f64::INFINITY });
        assert_eq!(key_of(parse("filter.epsilon = -1.0\n").unwrap_err()), "filter.epsilon");
        assert_eq!(key_of(parse("filter.epsilon = \"dynamic\"\ndyna.k = 1\n").unwrap_err()), "dyna.k");
    }

    #[test]
    fn seed_override() {
        let c = ExperimentConfig::from_toml_str("seed = 3\nseeds = [1, 2]\n", Some("99")).unwrap();
        assert_eq!(c.seed, 99);
        assert!(c.seeds.is_empty());
        assert_eq!(
            key_of(ExperimentConfig::from_toml_str("seed = 3\n", Some("x")).unwrap_err()),
            SEED_ENV_VAR
        );
    }

    #[test]
    fn trials_minimum() {
        assert_eq!(key_of(parse("bounds.trials = 100\n").unwrap_err()), "bounds.trials");
    }

    #[test]
    fn resolved_echo_round_trips() {
        for src in [
            "seed = 5\n",
            "env.kind = \"linear_gaussian\"\nenv.dim = 3\nmodel.kind = \"mlp\"\nmodel.ensemble = 3\nfilter.epsilon = \"inf\"\n",
            "model.kernel = \"indicator\"\nmodel.bandwidth = 0.5\nfilter.epsilon = 0.25\nindex.m_l = 0.3\n",
        ] {
            let c = parse(src).unwrap();
            let echo = c.to_dotted_toml();
            assert_eq!(parse(&echo).unwrap(), c, "{echo}");
        }
    }

    #[test]
    fn kind_specific_keys() {
        assert!(parse("model.ensemble = 2\n").is_err());
        assert!(parse("model.kind = \"mlp\"\nmodel.kernel = \"gaussian\"\n").is_err());
        assert!(parse("env.kind = \"linear_gaussian\"\nenv.dt = 0.1\n").is_err());
    }
}
