//! Run configuration: the algorithm selector, all training hyperparameters,
//! and a flat key-value text format (`section.key = value`) with
//! type-checked command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Task};
use crate::error::{FamError, Result};

/// Training algorithm: full method, its three ablations, and four baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fam,
    FamWoInOa,
    FamWoRecObs,
    FamWoRecRew,
    Ippo,
    Ia2c,
    Mappo,
    Maa2c,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Fam,
        Algorithm::FamWoInOa,
        Algorithm::FamWoRecObs,
        Algorithm::FamWoRecRew,
        Algorithm::Ippo,
        Algorithm::Ia2c,
        Algorithm::Mappo,
        Algorithm::Maa2c,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Fam => "fam",
            Algorithm::FamWoInOa => "fam_wo_in_oa",
            Algorithm::FamWoRecObs => "fam_wo_rec_obs",
            Algorithm::FamWoRecRew => "fam_wo_rec_rew",
            Algorithm::Ippo => "ippo",
            Algorithm::Ia2c => "ia2c",
            Algorithm::Mappo => "mappo",
            Algorithm::Maa2c => "maa2c",
        }
    }

    /// True for the four variants that carry a belief-inference module.
    pub fn uses_fbi(&self) -> bool {
        matches!(
            self,
            Algorithm::Fam | Algorithm::FamWoInOa | Algorithm::FamWoRecObs | Algorithm::FamWoRecRew
        )
    }

    /// True for the PPO-family members (clipped surrogate, old-policy ratios).
    pub fn uses_ppo(&self) -> bool {
        !matches!(self, Algorithm::Ia2c | Algorithm::Maa2c)
    }

    /// True for the centralized-critic baselines.
    pub fn centralized_critic(&self) -> bool {
        matches!(self, Algorithm::Mappo | Algorithm::Maa2c)
    }
}

impl FromStr for Algorithm {
    type Err = FamError;

    fn from_str(s: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| FamError::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Everything one training run needs, serializable as flat key-value text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    pub latent_dim: usize,
    pub hidden_size: usize,
    pub total_steps: usize,
    /// episodes collected per update cycle (B)
    pub batch_episodes: usize,
    /// optimization passes per cycle (E)
    pub epochs: usize,
    /// actor/critic minibatch size within each pass (0 = full batch)
    #[serde(default)]
    pub minibatch_size: usize,
    pub gamma: f64,
    /// actor/critic learning rate
    pub alpha1: f64,
    /// belief-module learning rate
    pub alpha2: f64,
    /// KL weight in the belief loss
    pub beta: f64,
    pub epsilon_clip: f64,
    pub entropy_coef: f64,
    pub tau_soft: f64,
    pub seed: u64,
    /// update cycles between evaluations (0 disables)
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// update cycles between checkpoints (0 disables; final always written)
    pub checkpoint_interval: usize,
    /// also soft-update actor/belief target copies (no loss consumes them)
    pub update_aux_targets: bool,
    /// treat the fixed-horizon cutoff as a truncation: bootstrap returns and
    /// TD targets through the target critic instead of zeroing them
    #[serde(default)]
    pub time_limit_bootstrap: bool,
    /// one parameter set shared by every (homogeneous) agent instead of
    /// per-agent parameters
    #[serde(default)]
    pub share_parameters: bool,
}

impl RunConfig {
    pub fn new(env: EnvConfig, algorithm: Algorithm) -> Self {
        RunConfig {
            env,
            algorithm,
            latent_dim: 5,
            hidden_size: 64,
            total_steps: 1_000_000,
            batch_episodes: 10,
            epochs: 4,
            minibatch_size: 0,
            gamma: 0.99,
            alpha1: 3e-4,
            alpha2: 1e-3,
            beta: 0.001,
            epsilon_clip: 0.2,
            entropy_coef: 0.01,
            tau_soft: 0.01,
            seed: 0,
            eval_interval: 20,
            eval_episodes: 10,
            checkpoint_interval: 0,
            update_aux_targets: false,
            time_limit_bootstrap: false,
            share_parameters: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.total_steps < self.batch_episodes * self.env.episode_len {
            return Err(FamError::Config(format!(
                "total_steps {} below one update cycle ({} episodes x {} steps)",
                self.total_steps, self.batch_episodes, self.env.episode_len
            )));
        }
        if self.epochs == 0 {
            return Err(FamError::Config("epochs must be >= 1".into()));
        }
        if self.batch_episodes == 0 {
            return Err(FamError::Config("batch_episodes must be >= 1".into()));
        }
        if !(self.tau_soft > 0.0) {
            return Err(FamError::Config(format!("tau_soft must be > 0, got {}", self.tau_soft)));
        }
        // zero rates are allowed: they freeze the corresponding module,
        // which the stop-gradient checks rely on
        if !(self.alpha1 >= 0.0) || !(self.alpha2 >= 0.0) {
            return Err(FamError::Config("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FamError::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.epsilon_clip) || self.epsilon_clip == 0.0 {
            return Err(FamError::Config(format!(
                "epsilon_clip {} outside (0, 1)",
                self.epsilon_clip
            )));
        }
        if self.beta < 0.0 || self.entropy_coef < 0.0 {
            return Err(FamError::Config("beta and entropy_coef must be >= 0".into()));
        }
        if self.latent_dim == 0 || self.hidden_size == 0 {
            return Err(FamError::Config("latent_dim and hidden_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Flat `key = value` rendering, one entry per line, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Parse a flat key-value document produced by [`RunConfig::to_text`]
    /// (or written by hand); unspecified keys keep their defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                FamError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        // the task and agent counts shape the defaults, so resolve them first
        let task = match pairs.get("env.task").map(String::as_str) {
            Some(t) => Task::parse(t)?,
            None => Task::Cn,
        };
        let mut cfg = match task {
            Task::Cn => RunConfig::new(EnvConfig::cn(5, 5), Algorithm::Fam),
            Task::Pp => RunConfig::new(EnvConfig::pp(7, 3), Algorithm::Fam),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override. Accepts the dotted key or, when
    /// unambiguous, the bare field name (`seed` → `train.seed`).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| FamError::Config(format!("override '{spec}' is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        if key.contains('.') {
            return self.set(key, value);
        }
        // bare names resolve by section precedence: train, then algo, then env
        for section in ["train", "algo", "env"] {
            let dotted = format!("{section}.{key}");
            if self.entries().iter().any(|(k, _)| *k == dotted) {
                return self.set(&dotted, value);
            }
        }
        Err(FamError::Config(format!("unknown config key '{key}'")))
    }

    fn entries(&self) -> Vec<(String, String)> {
        let e = &self.env;
        vec![
            ("env.task".into(), e.task.name().into()),
            ("env.n_agents".into(), e.n_agents.to_string()),
            ("env.n_landmarks".into(), e.n_landmarks.to_string()),
            ("env.n_prey".into(), e.n_prey.to_string()),
            ("env.episode_len".into(), e.episode_len.to_string()),
            ("env.agent_radius".into(), e.agent_radius.to_string()),
            ("env.landmark_radius".into(), e.landmark_radius.to_string()),
            ("env.dt".into(), e.dt.to_string()),
            ("env.damping".into(), e.damping.to_string()),
            ("env.accel_controlled".into(), e.accel_controlled.to_string()),
            ("env.max_speed_controlled".into(), e.max_speed_controlled.to_string()),
            ("env.max_speed_prey".into(), e.max_speed_prey.to_string()),
            ("env.occupy_threshold".into(), e.occupy_threshold.to_string()),
            ("env.seed".into(), e.seed.to_string()),
            ("env.obs_prey_velocities".into(), e.obs_prey_velocities.to_string()),
            ("algo.algorithm".into(), self.algorithm.name().into()),
            ("algo.latent_dim".into(), self.latent_dim.to_string()),
            ("algo.hidden_size".into(), self.hidden_size.to_string()),
            ("train.total_steps".into(), self.total_steps.to_string()),
            ("train.batch_episodes".into(), self.batch_episodes.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.minibatch_size".into(), self.minibatch_size.to_string()),
            ("train.gamma".into(), self.gamma.to_string()),
            ("train.alpha1".into(), self.alpha1.to_string()),
            ("train.alpha2".into(), self.alpha2.to_string()),
            ("train.beta".into(), self.beta.to_string()),
            ("train.epsilon_clip".into(), self.epsilon_clip.to_string()),
            ("train.entropy_coef".into(), self.entropy_coef.to_string()),
            ("train.tau_soft".into(), self.tau_soft.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.eval_interval".into(), self.eval_interval.to_string()),
            ("train.eval_episodes".into(), self.eval_episodes.to_string()),
            ("train.checkpoint_interval".into(), self.checkpoint_interval.to_string()),
            ("train.update_aux_targets".into(), self.update_aux_targets.to_string()),
            ("train.time_limit_bootstrap".into(), self.time_limit_bootstrap.to_string()),
            ("train.share_parameters".into(), self.share_parameters.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| FamError::Config(format!("invalid value '{value}' for '{key}'")))
        }
        match key {
            "env.task" => self.env.task = Task::parse(value)?,
            "env.n_agents" => self.env.n_agents = num(key, value)?,
            "env.n_landmarks" => self.env.n_landmarks = num(key, value)?,
            "env.n_prey" => self.env.n_prey = num(key, value)?,
            "env.episode_len" => self.env.episode_len = num(key, value)?,
            "env.agent_radius" => self.env.agent_radius = num(key, value)?,
            "env.landmark_radius" => self.env.landmark_radius = num(key, value)?,
            "env.dt" => self.env.dt = num(key, value)?,
            "env.damping" => self.env.damping = num(key, value)?,
            "env.accel_controlled" => self.env.accel_controlled = num(key, value)?,
            "env.max_speed_controlled" => self.env.max_speed_controlled = num(key, value)?,
            "env.max_speed_prey" => self.env.max_speed_prey = num(key, value)?,
            "env.occupy_threshold" => self.env.occupy_threshold = num(key, value)?,
            "env.seed" => self.env.seed = num(key, value)?,
            "env.obs_prey_velocities" => self.env.obs_prey_velocities = num(key, value)?,
            "algo.algorithm" => self.algorithm = value.parse()?,
            "algo.latent_dim" => self.latent_dim = num(key, value)?,
            "algo.hidden_size" => self.hidden_size = num(key, value)?,
            "train.total_steps" => self.total_steps = num(key, value)?,
            "train.batch_episodes" => self.batch_episodes = num(key, value)?,
            "train.epochs" => self.epochs = num(key, value)?,
            "train.minibatch_size" => self.minibatch_size = num(key, value)?,
            "train.gamma" => self.gamma = num(key, value)?,
            "train.alpha1" => self.alpha1 = num(key, value)?,
            "train.alpha2" => self.alpha2 = num(key, value)?,
            "train.beta" => self.beta = num(key, value)?,
            "train.epsilon_clip" => self.epsilon_clip = num(key, value)?,
            "train.entropy_coef" => self.entropy_coef = num(key, value)?,
            "train.tau_soft" => self.tau_soft = num(key, value)?,
            "train.seed" => self.seed = num(key, value)?,
            "train.eval_interval" => self.eval_interval = num(key, value)?,
            "train.eval_episodes" => self.eval_episodes = num(key, value)?,
            "train.checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "train.update_aux_targets" => self.update_aux_targets = num(key, value)?,
            "train.time_limit_bootstrap" => self.time_limit_bootstrap = num(key, value)?,
            "train.share_parameters" => self.share_parameters = num(key, value)?,
            _ => return Err(FamError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Short fingerprint of the resolved configuration (FNV-1a over the
    /// canonical text), recorded in reports to tie artifacts to their run.
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}
