//! Deterministic, seedable 2D particle-world Dec-POMDP with two tasks:
//! cooperative navigation (CN) and predator-prey (PP).
//!
//! Controlled agents apply discrete forces under double-integrator dynamics;
//! PP preys are scripted to flee the closest predator. All agents of a task
//! share one team reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};

/// Which particle task the world simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cn,
    Pp,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "cn" => Ok(Task::Cn),
            "pp" => Ok(Task::Pp),
            other => Err(FamError::Config(format!("unknown task {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Cn => "cn",
            Task::Pp => "pp",
        }
    }
}

/// Static description of one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    /// CN agents / PP predators
    pub n_agents: usize,
    pub n_landmarks: usize,
    pub n_prey: usize,
    pub episode_len: usize,
    pub agent_radius: f64,
    pub landmark_radius: f64,
    pub dt: f64,
    pub damping: f64,
    pub accel_controlled: f64,
    pub max_speed_controlled: f64,
    pub max_speed_prey: f64,
    pub occupy_threshold: f64,
    pub seed: u64,
    /// append the three closest prey velocities to PP observations
    pub obs_prey_velocities: bool,
}

pub const N_ACTIONS: usize = 5;
/// Base observation layout: own velocity, own position, three closest
/// landmarks-or-preys, two closest teammates, all 2-vectors.
pub const BASE_OBS_DIM: usize = 14;

impl EnvConfig {
    pub fn cn(n_agents: usize, n_landmarks: usize) -> Self {
        EnvConfig {
            task: Task::Cn,
            n_agents,
            n_landmarks,
            n_prey: 0,
            episode_len: 25,
            agent_radius: 0.1,
            landmark_radius: 0.05,
            dt: 0.1,
            damping: 0.25,
            accel_controlled: 5.0,
            max_speed_controlled: 1.0,
            max_speed_prey: 1.4,
            occupy_threshold: 0.15,
            seed: 0,
            obs_prey_velocities: false,
        }
    }

    pub fn pp(n_predators: usize, n_prey: usize) -> Self {
        EnvConfig {
            task: Task::Pp,
            n_agents: n_predators,
            n_landmarks: 0,
            n_prey,
            ..EnvConfig::cn(n_predators, 0)
        }
    }

    /// Number of passive entities (landmarks in CN, preys in PP).
    pub fn n_passive(&self) -> usize {
        match self.task {
            Task::Cn => self.n_landmarks,
            Task::Pp => self.n_prey,
        }
    }

    pub fn n_entities(&self) -> usize {
        self.n_agents + self.n_passive()
    }

    pub fn obs_dim(&self) -> usize {
        if self.task == Task::Pp && self.obs_prey_velocities {
            BASE_OBS_DIM + 6
        } else {
            BASE_OBS_DIM
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 {
            return Err(FamError::Config("n_agents must be >= 1".into()));
        }
        if self.episode_len < 1 {
            return Err(FamError::Config("episode_len must be >= 1".into()));
        }
        if self.agent_radius <= 0.0 || self.landmark_radius <= 0.0 {
            return Err(FamError::Config("radii must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(FamError::Config("damping must be in [0, 1)".into()));
        }
        if self.dt <= 0.0 {
            return Err(FamError::Config("dt must be positive".into()));
        }
        if self.task == Task::Pp && self.n_prey < 1 {
            return Err(FamError::Config("pp needs at least one prey".into()));
        }
        if self.task == Task::Cn && self.n_landmarks < 1 {
            return Err(FamError::Config("cn needs at least one landmark".into()));
        }
        Ok(())
    }
}

/// Discrete action: no-op, +x, -x, +y, -y force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn validate(&self) -> Result<()> {
        if self.0 >= N_ACTIONS {
            return Err(FamError::Input(format!("action {} out of 0..4", self.0)));
        }
        Ok(())
    }

    fn force(&self, accel: f64) -> [f64; 2] {
        match self.0 {
            0 => [0.0, 0.0],
            1 => [accel, 0.0],
            2 => [-accel, 0.0],
            3 => [0.0, accel],
            4 => [0.0, -accel],
            _ => unreachable!("validated"),
        }
    }
}

/// Full simulator state. Entities are laid out as agents then passives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub t: usize,
    pub done: bool,
}

/// Flattened local observation of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct StepInfo {
    /// CN only, zero otherwise
    pub occupied_count: usize,
    pub collision_count: usize,
    /// per landmark (CN) or per prey (PP): distance to the nearest agent
    pub min_distances: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub team_reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cap_speed(v: &mut [f64; 2], max: f64) {
    let s = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if s > max {
        v[0] *= max / s;
        v[1] *= max / s;
    }
}

/// Fresh world: all entity positions uniform in [-1, 1]^2, velocities zero.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<(WorldState, Vec<Observation>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_entities();
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        let y: f64 = rng.gen_range(-1.0..=1.0);
        positions.push([x, y]);
    }
    let state = WorldState {
        positions,
        velocities: vec![[0.0, 0.0]; n],
        t: 0,
        done: false,
    };
    let obs = observations(&state, config);
    Ok((state, obs))
}

/// Per-agent observation vectors for the current state.
pub fn observations(state: &WorldState, config: &EnvConfig) -> Vec<Observation> {
    (0..config.n_agents)
        .map(|i| observe(state, config, i))
        .collect()
}

fn closest<'a>(
    own: [f64; 2],
    candidates: impl Iterator<Item = (usize, &'a [f64; 2])>,
    k: usize,
) -> Vec<usize> {
    let mut v: Vec<(f64, usize)> = candidates.map(|(i, p)| (dist(own, *p), i)).collect();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    v.into_iter().take(k).map(|(_, i)| i).collect()
}

fn observe(state: &WorldState, config: &EnvConfig, agent: usize) -> Observation {
    let own = state.positions[agent];
    let mut o = Vec::with_capacity(config.obs_dim());
    o.extend_from_slice(&state.velocities[agent]);
    o.extend_from_slice(&own);

    let passive_base = config.n_agents;
    let passives = closest(
        own,
        state.positions[passive_base..]
            .iter()
            .enumerate()
            .map(|(i, p)| (passive_base + i, p)),
        3,
    );
    for &idx in &passives {
        o.push(state.positions[idx][0] - own[0]);
        o.push(state.positions[idx][1] - own[1]);
    }
    for _ in passives.len()..3 {
        o.extend_from_slice(&[0.0, 0.0]);
    }

    let mates = closest(
        own,
        state.positions[..config.n_agents]
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != agent),
        2,
    );
    for &idx in &mates {
        o.push(state.positions[idx][0] - own[0]);
        o.push(state.positions[idx][1] - own[1]);
    }
    for _ in mates.len()..2 {
        o.extend_from_slice(&[0.0, 0.0]);
    }

    if config.task == Task::Pp && config.obs_prey_velocities {
        for &idx in &passives {
            o.extend_from_slice(&state.velocities[idx]);
        }
        for _ in passives.len()..3 {
            o.extend_from_slice(&[0.0, 0.0]);
        }
    }
    debug_assert_eq!(o.len(), config.obs_dim());
    Observation(o)
}

/// Unordered colliding pairs among controlled agents, each counted once.
pub fn collision_count(state: &WorldState, config: &EnvConfig) -> usize {
    let limit = 2.0 * config.agent_radius;
    let mut count = 0;
    for i in 0..config.n_agents {
        for j in i + 1..config.n_agents {
            if dist(state.positions[i], state.positions[j]) < limit {
                count += 1;
            }
        }
    }
    count
}

/// Distance from each passive entity to its nearest controlled agent.
pub fn min_distances(state: &WorldState, config: &EnvConfig) -> Vec<f64> {
    let base = config.n_agents;
    (0..config.n_passive())
        .map(|k| {
            (0..config.n_agents)
                .map(|i| dist(state.positions[base + k], state.positions[i]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// CN team reward: negative sum of landmark-to-nearest-agent distances minus
/// the collision count.
pub fn reward_cn(state: &WorldState, config: &EnvConfig) -> f64 {
    -min_distances(state, config).iter().sum::<f64>() - collision_count(state, config) as f64
}

/// PP team reward: negative sum of prey-to-nearest-predator distances minus
/// the predator collision count.
pub fn reward_pp(state: &WorldState, config: &EnvConfig) -> f64 {
    -min_distances(state, config).iter().sum::<f64>() - collision_count(state, config) as f64
}

pub fn team_reward(state: &WorldState, config: &EnvConfig) -> f64 {
    match config.task {
        Task::Cn => reward_cn(state, config),
        Task::Pp => reward_pp(state, config),
    }
}

/// Landmarks whose nearest agent is within the occupy threshold (CN).
pub fn count_occupied(state: &WorldState, config: &EnvConfig) -> usize {
    min_distances(state, config)
        .iter()
        .filter(|&&d| d < config.occupy_threshold)
        .count()
}

/// Scripted prey velocity command: flee the closest predator at max prey
/// speed, with outward components reflected inward at the world boundary.
pub fn prey_policy(state: &WorldState, prey_id: usize, config: &EnvConfig) -> [f64; 2] {
    let pos = state.positions[config.n_agents + prey_id];
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..config.n_agents {
        let d = dist(pos, state.positions[i]);
        if d < best.0 {
            best = (d, i);
        }
    }
    let pred = state.positions[best.1];
    let mut dir = [pos[0] - pred[0], pos[1] - pred[1]];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    if norm == 0.0 {
        return [0.0, 0.0];
    }
    dir[0] /= norm;
    dir[1] /= norm;
    for k in 0..2 {
        if (pos[k] >= 1.0 && dir[k] > 0.0) || (pos[k] <= -1.0 && dir[k] < 0.0) {
            dir[k] = -dir[k];
        }
    }
    [dir[0] * config.max_speed_prey, dir[1] * config.max_speed_prey]
}

/// Advance the world by one joint action. Returns the step outcome and
/// mutates `state` in place.
pub fn step(
    state: &mut WorldState,
    joint_action: &[ActionId],
    config: &EnvConfig,
) -> Result<StepResult> {
    if state.done {
        return Err(FamError::State("stepping a done episode".into()));
    }
    if joint_action.len() != config.n_agents {
        return Err(FamError::Input(format!(
            "expected {} actions, got {}",
            config.n_agents,
            joint_action.len()
        )));
    }
    for a in joint_action {
        a.validate()?;
    }

    // prey commands use the pre-step state (simultaneous move)
    let prey_cmds: Vec<[f64; 2]> = if config.task == Task::Pp {
        (0..config.n_prey)
            .map(|k| prey_policy(state, k, config))
            .collect()
    } else {
        Vec::new()
    };

    for (i, action) in joint_action.iter().enumerate() {
        let f = action.force(config.accel_controlled);
        let v = &mut state.velocities[i];
        v[0] = v[0] * (1.0 - config.damping) + f[0] * config.dt;
        v[1] = v[1] * (1.0 - config.damping) + f[1] * config.dt;
        cap_speed(v, config.max_speed_controlled);
        state.positions[i][0] += v[0] * config.dt;
        state.positions[i][1] += v[1] * config.dt;
    }

    if config.task == Task::Pp {
        for (k, cmd) in prey_cmds.iter().enumerate() {
            let idx = config.n_agents + k;
            state.velocities[idx] = *cmd;
            cap_speed(&mut state.velocities[idx], config.max_speed_prey);
            for axis in 0..2 {
                state.positions[idx][axis] += state.velocities[idx][axis] * config.dt;
                while state.positions[idx][axis].abs() > 1.0 {
                    let p = state.positions[idx][axis];
                    state.positions[idx][axis] = if p > 1.0 { 2.0 - p } else { -2.0 - p };
                    state.velocities[idx][axis] = -state.velocities[idx][axis];
                }
            }
        }
    }

    state.t += 1;
    state.done = state.t == config.episode_len;

    let info = StepInfo {
        occupied_count: if config.task == Task::Cn {
            count_occupied(state, config)
        } else {
            0
        },
        collision_count: collision_count(state, config),
        min_distances: min_distances(state, config),
    };
    Ok(StepResult {
        observations: observations(state, config),
        team_reward: team_reward(state, config),
        done: state.done,
        info,
    })
}

/// Owning wrapper pairing a config with its current state.
#[derive(Debug, Clone)]
pub struct ParticleEnv {
    pub config: EnvConfig,
    pub state: WorldState,
}

impl ParticleEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<(Self, Vec<Observation>)> {
        let (state, obs) = reset(&config, seed)?;
        Ok((ParticleEnv { config, state }, obs))
    }

    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let (state, obs) = reset(&self.config, seed)?;
        self.state = state;
        Ok(obs)
    }

    pub fn step(&mut self, joint_action: &[ActionId]) -> Result<StepResult> {
        let config = self.config.clone();
        step(&mut self.state, joint_action, &config)
    }
}
