//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::critic::AblationMode;
use crate::ensemble::PenaltyMode;
use crate::error::{Error, Result};
use crate::files;
use crate::seed::fnv1a64;

/// Which generative environment backs data and true-return scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Latent,
    Micro,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Latent => "latent",
            EnvKind::Micro => "micro",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(EnvKind::Latent),
            "micro" => Ok(EnvKind::Micro),
            _ => Err(Error::Config(format!("unknown env {s:?} (expected latent or micro)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

/// Comma-separated list value.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',').map(|x| x.trim().parse().map_err(|_| ())).collect::<std::result::Result<_, _>>().map(List)
    }
}

impl<T: std::fmt::Display> std::fmt::Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

macro_rules! run_config {
    ($($(#[$doc:meta])* $key:ident: $ty:ty = $default:expr;)*) => {
        /// Every tunable of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[$doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form; unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key in declaration order, one `key = value` per line.
            pub fn resolved(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), self.$key);)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0;
    env: EnvKind = EnvKind::Latent;
    precision: Precision = Precision::F64;
    n_items: usize = 200;
    d_latent: usize = 8;
    theta_click: f64 = 0.3;
    theta_purchase: f64 = 0.75;
    drift: f64 = 0.1;
    p_end: f64 = 0.05;
    user_concentration: f64 = 0.5;
    behavior: String = "epsilon_oracle".into();
    /// Epsilon for `epsilon_oracle`, temperature for `popularity`.
    behavior_param: f64 = 0.5;
    micro_items: usize = 8;
    micro_coverage: f64 = 0.3;
    micro_p_end_min: f64 = 0.05;
    micro_p_end_max: f64 = 0.3;
    n_sessions: usize = 1000;
    test_sessions: usize = 200;
    /// Ignored by the micro environment, whose states are windows of two.
    window_len: usize = 10;
    include_skips_in_window: bool = true;
    reward_purchase: f64 = 1.0;
    reward_click: f64 = 0.2;
    reward_skip: f64 = 0.0;
    heads: usize = 5;
    d_embed: usize = 32;
    d_state: usize = 32;
    penalty: PenaltyMode = PenaltyMode::PMul;
    lambda: f64 = 20.0;
    gamma: f64 = 0.9;
    ablation: AblationMode = AblationMode::QCritic;
    lr: f64 = 1e-3;
    beta1: f64 = 0.9;
    beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    sync_period: u64 = 500;
    batch_size: usize = 32;
    steps: u64 = 20_000;
    log_every: u64 = 100;
    eval_k: List<usize> = List(vec![5, 10, 20]);
    eval_episodes: usize = 1000;
    analyze_n: List<usize> = List(vec![1, 10, 100, 1000]);
    analyze_mu: f64 = 1.0;
    analyze_sigma: f64 = 0.5;
    analyze_lambdas: List<f64> = List(vec![0.0, 5.0, 20.0, 100.0]);
    analyze_gamma: f64 = 0.99;
    analyze_w: List<f64> = List(vec![0.1, 0.3, 0.5, 0.7, 0.9]);
    mc_trials: usize = 1000;
    toy_points: usize = 50;
    toy_mu: f64 = 1.0;
    toy_sigma: f64 = 1.0;
    sweep_lambdas: List<f64> = List(vec![0.0, 5.0, 20.0, 100.0]);
    sweep_seeds: List<u64> = List(vec![0, 1, 2, 3, 4]);
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys may not repeat.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key `{k}` repeated", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&files::read_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// FNV-1a of the resolved text.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.resolved().as_bytes())
    }

    pub fn effective_window_len(&self) -> usize {
        match self.env {
            EnvKind::Latent => self.window_len,
            EnvKind::Micro => 2,
        }
    }

    pub fn catalog_size(&self) -> usize {
        match self.env {
            EnvKind::Latent => self.n_items,
            EnvKind::Micro => self.micro_items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_sessions == 0 {
            return bad("n_sessions must be at least 1");
        }
        if self.test_sessions == 0 {
            return bad("test_sessions must be at least 1");
        }
        if self.window_len == 0 {
            return bad("window_len must be at least 1");
        }
        if self.eval_k.0.is_empty() || self.eval_k.0.contains(&0) {
            return bad("eval_k must list cutoffs >= 1");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if self.sweep_lambdas.0.is_empty() || self.sweep_seeds.0.is_empty() {
            return bad("sweep needs at least one lambda and one seed");
        }
        if self.toy_points < 2 {
            return bad("toy_points must be at least 2");
        }
        Ok(())
    }
}
