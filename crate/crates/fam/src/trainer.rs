//! Training harness: builds an algorithm variant (full method, ablations,
//! or PPO/A2C baselines), collects on-policy rollouts with per-agent belief
//! inference, runs epoch-based actor/critic/belief updates with soft target
//! blending, and writes metric logs and resumable checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, RunConfig};
use crate::env::{EnvConfig, ParticleEnv, WorldState, N_ACTIONS};
use crate::error::{FamError, Result};
use crate::fbi::{draw_eps, sample_latent, Fbi, FbiBatch, FbiConfig, FbiEpisode, FbiParams};
use crate::nn::{
    compute_gradients, soft_update, Adam, ParamSet, RecurrentState, Tape,
};
use crate::rl::{
    a2c_losses_tape, actor_loss_ppo_tape, critic_loss_tape, normalize_advantages,
    returns_and_advantages, ActMode, Actor, Critic, RlBatch,
};

/// Global gradient-norm clip applied to every update.
pub const GRAD_CLIP: f64 = 0.5;

/// Network shapes and wiring for one algorithm variant.
#[derive(Debug, Clone)]
pub struct Variant {
    pub algo: Algorithm,
    pub actor: Actor,
    pub critic: Critic,
    pub fbi: Option<Fbi>,
    pub n_agents: usize,
    pub obs_dim: usize,
    /// 0 when the variant has no belief module
    pub latent_dim: usize,
}

impl Variant {
    /// Width of the critic input (local or joint observation, plus latent).
    pub fn critic_in_dim(&self) -> usize {
        self.critic.in_dim
    }
}

/// Resolve an algorithm name into concrete network shapes.
pub fn build_variant(config: &RunConfig) -> Result<Variant> {
    config.validate()?;
    let obs_dim = config.env.obs_dim();
    let n = config.env.n_agents;
    let algo = config.algorithm;
    let latent_dim = if algo.uses_fbi() { config.latent_dim } else { 0 };
    let critic_obs = if algo.centralized_critic() { n * obs_dim } else { obs_dim };

    let fbi = if algo.uses_fbi() {
        let mut fc = FbiConfig::new(obs_dim, N_ACTIONS);
        fc.latent_dim = config.latent_dim;
        fc.hidden = config.hidden_size;
        fc.beta = config.beta;
        fc.decoder_input_oa = algo != Algorithm::FamWoInOa;
        fc.recon_obs = algo != Algorithm::FamWoRecObs;
        fc.recon_rew = algo != Algorithm::FamWoRecRew;
        Some(Fbi::new(fc))
    } else {
        None
    };

    Ok(Variant {
        algo,
        actor: Actor::new(obs_dim, latent_dim, config.hidden_size),
        critic: Critic::new(critic_obs + latent_dim, config.hidden_size),
        fbi,
        n_agents: n,
        obs_dim,
        latent_dim,
    })
}

/// One agent's learnable state: parameters, targets, and optimizer moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentState {
    pub theta: ParamSet,
    pub theta_old: ParamSet,
    pub omega: ParamSet,
    pub omega_target: ParamSet,
    pub fbi: Option<FbiParams>,
    /// auxiliary soft-updated copies; maintained only when enabled, unused by losses
    pub theta_target: Option<ParamSet>,
    pub fbi_target: Option<FbiParams>,
    pub opt_actor: Adam,
    pub opt_critic: Adam,
    pub opt_psi: Option<Adam>,
    pub opt_phi: Option<Adam>,
    pub opt_varphi: Option<Adam>,
}

/// All agents' learnable state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentStack {
    pub agents: Vec<AgentState>,
}

/// Fresh per-agent parameters; each agent draws independently from `rng`,
/// unless parameters are shared, in which case one draw is cloned to all.
pub fn init_stack<R: Rng>(variant: &Variant, config: &RunConfig, rng: &mut R) -> AgentStack {
    let draws = if config.share_parameters { 1 } else { variant.n_agents };
    let mut agents: Vec<AgentState> = (0..draws)
        .map(|_| {
            let theta = variant.actor.init(rng);
            let omega = variant.critic.init(rng);
            let fbi = variant.fbi.as_ref().map(|f| f.init(rng));
            AgentState {
                opt_actor: Adam::new(&theta, config.alpha1),
                opt_critic: Adam::new(&omega, config.alpha1),
                opt_psi: fbi.as_ref().map(|p| Adam::new(&p.psi, config.alpha2)),
                opt_phi: fbi.as_ref().map(|p| Adam::new(&p.phi, config.alpha2)),
                opt_varphi: fbi.as_ref().map(|p| Adam::new(&p.varphi, config.alpha2)),
                theta_old: theta.clone(),
                omega_target: omega.clone(),
                theta_target: config.update_aux_targets.then(|| theta.clone()),
                fbi_target: if config.update_aux_targets { fbi.clone() } else { None },
                theta,
                omega,
                fbi,
            }
        })
        .collect();
    while agents.len() < variant.n_agents {
        agents.push(agents[0].clone());
    }
    AgentStack { agents }
}

/// One agent's view of one collected episode.
#[derive(Debug, Clone)]
pub struct AgentEpisodeData {
    pub obs: Array2<f64>,
    pub next_obs: Array2<f64>,
    /// latent sampled during the rollout (0 columns without a belief module)
    pub z: Array2<f64>,
    pub next_z: Array2<f64>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub values: Vec<f64>,
    pub fbi: Option<FbiEpisode>,
}

/// One collected episode: shared signals plus per-agent views.
#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub rewards: Vec<f64>,
    pub ep_return: f64,
    pub final_occupied: usize,
    pub per_agent: Vec<AgentEpisodeData>,
    pub joint_obs: Array2<f64>,
    pub joint_next_obs: Array2<f64>,
    /// world states s_0..s_T (length T + 1)
    pub states: Vec<WorldState>,
}

/// Cleared after every update cycle (strictly on-policy).
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBatch {
    pub episodes: Vec<EpisodeData>,
}

fn one_hot(action: usize) -> Array2<f64> {
    let mut row = Array2::zeros((1, N_ACTIONS));
    row[[0, action]] = 1.0;
    row
}

fn vstack(rows: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Roll one full episode with the current parameters, sampling actions and
/// latents; records everything the update and replay checks need.
fn collect_episode<R: Rng>(
    variant: &Variant,
    stack: &AgentStack,
    env_config: &EnvConfig,
    episode_seed: u64,
    rng: &mut R,
) -> Result<EpisodeData> {
    let n = variant.n_agents;
    let d = variant.latent_dim;
    let t_len = env_config.episode_len;
    let (mut env, mut obs) = ParticleEnv::new(env_config.clone(), episode_seed)?;

    let mut hidden: Vec<RecurrentState> = (0..n)
        .map(|_| RecurrentState::zeros(1, variant.fbi.as_ref().map_or(1, |f| f.cfg.hidden)))
        .collect();
    let mut prev_action: Vec<Array2<f64>> = vec![Array2::zeros((1, N_ACTIONS)); n];
    let mut prev_reward = vec![0.0_f64; n];

    struct Acc {
        obs: Vec<Array2<f64>>,
        next_obs: Vec<Array2<f64>>,
        z: Vec<Array2<f64>>,
        actions: Vec<usize>,
        logp: Vec<f64>,
        values: Vec<f64>,
        fbi_prev_a: Vec<Array2<f64>>,
        fbi_rew_in: Vec<f64>,
        fbi_action: Vec<Array2<f64>>,
    }
    let mut acc: Vec<Acc> = (0..n)
        .map(|_| Acc {
            obs: vec![],
            next_obs: vec![],
            z: vec![],
            actions: vec![],
            logp: vec![],
            values: vec![],
            fbi_prev_a: vec![],
            fbi_rew_in: vec![],
            fbi_action: vec![],
        })
        .collect();

    let mut rewards = Vec::with_capacity(t_len);
    let mut joint_obs_rows = Vec::with_capacity(t_len);
    let mut joint_next_rows = Vec::with_capacity(t_len);
    let mut states = vec![env.state.clone()];
    let mut final_occupied = 0;

    for _t in 0..t_len {
        let joint_row: Vec<f64> = obs.iter().flat_map(|o| o.0.iter().copied()).collect();
        let joint = Array2::from_shape_vec((1, n * variant.obs_dim), joint_row).unwrap();
        joint_obs_rows.push(joint.clone());

        let mut joint_action = Vec::with_capacity(n);
        for i in 0..n {
            let o = Array2::from_shape_vec((1, variant.obs_dim), obs[i].0.clone()).unwrap();
            let z = if let Some(fbi) = &variant.fbi {
                let params = stack.agents[i].fbi.as_ref().expect("fbi params");
                let r_in = Array2::from_elem((1, 1), prev_reward[i]);
                let (h2, mu, ls) = fbi.encode_step(&params.psi, &hidden[i], &o, &prev_action[i], &r_in)?;
                hidden[i] = h2;
                let eps = draw_eps(rng, 1, d);
                acc[i].fbi_prev_a.push(prev_action[i].clone());
                acc[i].fbi_rew_in.push(prev_reward[i]);
                sample_latent(&mu, &ls, &eps)
            } else {
                Array2::zeros((1, 0))
            };

            let out = variant
                .actor
                .act(&stack.agents[i].theta, &o, &z, ActMode::Sample, rng)?;
            let critic_obs = if variant.algo.centralized_critic() { &joint } else { &o };
            let cin = ndarray::concatenate![Axis(1), critic_obs.view(), z.view()];
            let v = variant.critic.value(&stack.agents[i].omega, &cin)?[0];

            acc[i].obs.push(o);
            acc[i].z.push(z);
            acc[i].actions.push(out.action.0);
            acc[i].logp.push(out.log_prob);
            acc[i].values.push(v);
            acc[i].fbi_action.push(one_hot(out.action.0));
            joint_action.push(out.action);
        }

        let res = env.step(&joint_action)?;
        states.push(env.state.clone());
        rewards.push(res.team_reward);
        final_occupied = res.info.occupied_count;
        let next_row: Vec<f64> = res
            .observations
            .iter()
            .flat_map(|o| o.0.iter().copied())
            .collect();
        joint_next_rows.push(Array2::from_shape_vec((1, n * variant.obs_dim), next_row).unwrap());
        for i in 0..n {
            acc[i]
                .next_obs
                .push(Array2::from_shape_vec((1, variant.obs_dim), res.observations[i].0.clone()).unwrap());
            prev_action[i] = one_hot(joint_action[i].0);
            prev_reward[i] = res.team_reward;
        }
        obs = res.observations;
    }

    let per_agent = acc
        .into_iter()
        .map(|a| {
            let z = if d > 0 { vstack(&a.z) } else { Array2::zeros((t_len, 0)) };
            // z_{t+1} aligned with next_obs; the terminal row is never
            // consumed (its TD target is cut off), zeros keep shapes aligned
            let next_z = if d > 0 {
                let mut nz = Array2::zeros((t_len, d));
                for t in 0..t_len - 1 {
                    nz.row_mut(t).assign(&z.row(t + 1));
                }
                nz
            } else {
                Array2::zeros((t_len, 0))
            };
            let fbi = variant.fbi.as_ref().map(|_| FbiEpisode {
                obs: vstack(&a.obs),
                prev_action: vstack(&a.fbi_prev_a),
                reward_in: Array2::from_shape_vec((t_len, 1), a.fbi_rew_in.clone()).unwrap(),
                action: vstack(&a.fbi_action),
                next_obs: vstack(&a.next_obs),
                reward_target: Array2::from_shape_vec((t_len, 1), rewards.clone()).unwrap(),
            });
            AgentEpisodeData {
                obs: vstack(&a.obs),
                next_obs: vstack(&a.next_obs),
                z,
                next_z,
                actions: a.actions,
                logp_old: a.logp,
                values: a.values,
                fbi,
            }
        })
        .collect();

    Ok(EpisodeData {
        ep_return: rewards.iter().sum(),
        rewards,
        final_occupied,
        per_agent,
        joint_obs: vstack(&joint_obs_rows),
        joint_next_obs: vstack(&joint_next_rows),
        states,
    })
}

/// Collect `B` complete episodes with frozen parameters.
pub fn collect_rollouts<R: Rng>(
    variant: &Variant,
    stack: &AgentStack,
    config: &RunConfig,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    let mut episodes = Vec::with_capacity(config.batch_episodes);
    for b in 0..config.batch_episodes {
        let episode_seed: u64 = rng.gen();
        let ep = collect_episode(variant, stack, &config.env, episode_seed, rng)
            .map_err(|e| FamError::Run(format!("episode {b}: {e}")))?;
        episodes.push(ep);
    }
    Ok(TrajectoryBatch { episodes })
}

/// Flatten one agent's episodes into the loss-ready batch, computing
/// discounted returns and batch-normalized advantages.
///
/// With `truncation_critic` set, the fixed-horizon cutoff is treated as a
/// truncation: the return recursion starts from that critic's value of the
/// state past the horizon, and the TD targets bootstrap through it as well.
pub fn agent_rl_batch(
    variant: &Variant,
    agent: usize,
    batch: &TrajectoryBatch,
    gamma: f64,
    truncation_critic: Option<&ParamSet>,
) -> Result<RlBatch> {
    let central = variant.algo.centralized_critic();
    let mut actor_in = vec![];
    let mut critic_in = vec![];
    let mut critic_next_in = vec![];
    let mut actions = vec![];
    let mut logp_old = vec![];
    let mut rewards = vec![];
    let mut dones = vec![];
    let mut returns = vec![];
    let mut advantages = vec![];

    for ep in &batch.episodes {
        let a = &ep.per_agent[agent];
        let t_len = a.actions.len();
        let mut ep_dones = vec![false; t_len];
        let (cobs, cnext) = if central {
            (ep.joint_obs.view(), ep.joint_next_obs.view())
        } else {
            (a.obs.view(), a.next_obs.view())
        };
        let ep_critic_next = ndarray::concatenate![Axis(1), cnext, a.next_z.view()];

        let bootstrap = match truncation_critic {
            Some(omega_t) => {
                let last = ep_critic_next
                    .row(t_len - 1)
                    .insert_axis(Axis(0))
                    .to_owned();
                variant.critic.value(omega_t, &last)?[0]
            }
            None => {
                ep_dones[t_len - 1] = true;
                0.0
            }
        };
        let (r, adv) = returns_and_advantages(&ep.rewards, &ep_dones, &a.values, bootstrap, gamma)?;
        returns.extend(r);
        advantages.extend(adv);
        actions.extend_from_slice(&a.actions);
        logp_old.extend_from_slice(&a.logp_old);
        rewards.extend_from_slice(&ep.rewards);
        dones.extend(ep_dones.iter().map(|&d| if d { 1.0 } else { 0.0 }));

        actor_in.push(ndarray::concatenate![Axis(1), a.obs.view(), a.z.view()]);
        critic_in.push(ndarray::concatenate![Axis(1), cobs, a.z.view()]);
        critic_next_in.push(ep_critic_next);
    }
    normalize_advantages(&mut advantages);

    Ok(RlBatch {
        actor_in: vstack(&actor_in),
        critic_in: vstack(&critic_in),
        critic_next_in: vstack(&critic_next_in),
        actions,
        logp_old,
        rewards,
        dones,
        returns,
        advantages,
    })
}

/// Gather one agent's belief-module training episodes.
fn agent_fbi_batch(agent: usize, batch: &TrajectoryBatch) -> FbiBatch {
    FbiBatch {
        episodes: batch
            .episodes
            .iter()
            .filter_map(|ep| ep.per_agent[agent].fbi.clone())
            .collect(),
    }
}

/// Mean per-component losses across agents and epochs; disabled components
/// are NaN so log columns stay aligned across variants.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_fbi: f64,
    pub kl: f64,
    pub recon_obs: f64,
    pub recon_rew: f64,
    pub entropy: f64,
}

impl LossReport {
    /// Combined objective (actor + critic + belief terms).
    pub fn total(&self) -> f64 {
        let fbi = if self.loss_fbi.is_nan() { 0.0 } else { self.loss_fbi };
        self.loss_actor + self.loss_critic + fbi
    }
}

struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn new() -> Self {
        MeanAcc { sum: 0.0, n: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Run `E` optimization passes of critic, actor, and belief updates for each
/// agent on one collected batch. A non-finite loss aborts the cycle's
/// remaining epochs for that agent; the run continues with the next batch.
pub fn train_epoch<R: Rng>(
    variant: &Variant,
    stack: &mut AgentStack,
    batch: &TrajectoryBatch,
    config: &RunConfig,
    rng: &mut R,
) -> Result<LossReport> {
    if batch.episodes.is_empty() {
        return Err(FamError::Input("empty trajectory batch".into()));
    }
    // synchronize the old policy once, before the first epoch
    for agent in stack.agents.iter_mut() {
        agent.theta_old = agent.theta.clone();
    }

    let mut m_actor = MeanAcc::new();
    let mut m_critic = MeanAcc::new();
    let mut m_fbi = MeanAcc::new();
    let mut m_kl = MeanAcc::new();
    let mut m_ro = MeanAcc::new();
    let mut m_rr = MeanAcc::new();
    let mut m_ent = MeanAcc::new();

    // When parameters are shared, every agent's rows train one parameter set
    // (agent 0's), and the result is cloned back out at the end. Otherwise
    // each agent trains on its own rows.
    let work: Vec<(usize, RlBatch, Option<FbiBatch>)> = if config.share_parameters {
        let mut parts = Vec::with_capacity(variant.n_agents);
        for i in 0..variant.n_agents {
            let truncation_critic = config
                .time_limit_bootstrap
                .then(|| &stack.agents[i].omega_target);
            parts.push(agent_rl_batch(variant, i, batch, config.gamma, truncation_critic)?);
        }
        let fb = variant.fbi.as_ref().map(|_| FbiBatch {
            episodes: (0..variant.n_agents)
                .flat_map(|i| agent_fbi_batch(i, batch).episodes)
                .collect(),
        });
        vec![(0, RlBatch::concat(&parts)?, fb)]
    } else {
        let mut per_agent = Vec::with_capacity(variant.n_agents);
        for i in 0..variant.n_agents {
            let truncation_critic = config
                .time_limit_bootstrap
                .then(|| &stack.agents[i].omega_target);
            let rl_batch = agent_rl_batch(variant, i, batch, config.gamma, truncation_critic)?;
            let fbi_batch = variant.fbi.as_ref().map(|_| agent_fbi_batch(i, batch));
            per_agent.push((i, rl_batch, fbi_batch));
        }
        per_agent
    };
    let t_len = batch.episodes[0].rewards.len();

    for (i, rl_batch, fbi_batch) in work {

        'epochs: for _e in 0..config.epochs {
            // one pass = the whole batch, either in one step or in shuffled
            // minibatches
            let minibatches: Vec<RlBatch> =
                if config.minibatch_size == 0 || config.minibatch_size >= rl_batch.len() {
                    Vec::new()
                } else {
                    let mut idx: Vec<usize> = (0..rl_batch.len()).collect();
                    idx.shuffle(rng);
                    idx.chunks(config.minibatch_size)
                        .map(|c| rl_batch.subset(c))
                        .collect()
                };
            let passes: Vec<&RlBatch> = if minibatches.is_empty() {
                vec![&rl_batch]
            } else {
                minibatches.iter().collect()
            };

            for mb in passes {
                let agent = &mut stack.agents[i];

                // critic step (alpha1)
                let step = (|| -> Result<f64> {
                    let mut tape = Tape::new();
                    let nodes = critic_loss_tape(
                        &mut tape,
                        &variant.critic,
                        &agent.omega,
                        &agent.omega_target,
                        mb,
                        config.gamma,
                    )?;
                    let loss = tape.scalar(nodes.loss);
                    let mut grads = compute_gradients(&tape, nodes.loss, &nodes.omega)?;
                    grads.clip_global_norm(GRAD_CLIP);
                    agent.opt_critic.step(&mut agent.omega, &grads)?;
                    Ok(loss)
                })();
                match step {
                    Ok(l) => m_critic.push(l),
                    Err(e) => {
                        eprintln!("agent {i}: critic update aborted: {e}");
                        break 'epochs;
                    }
                }

                // actor step (alpha1)
                let step = (|| -> Result<(f64, f64)> {
                    if variant.algo.uses_ppo() {
                        // the stored log-probs came from the pre-cycle policy,
                        // which theta_old snapshots; ratios start at exactly 1
                        let mut tape = Tape::new();
                        let nodes = actor_loss_ppo_tape(
                            &mut tape,
                            &variant.actor,
                            &agent.theta,
                            mb,
                            config.epsilon_clip,
                            config.entropy_coef,
                        )?;
                        let loss = tape.scalar(nodes.loss);
                        let mut grads = compute_gradients(&tape, nodes.loss, &nodes.theta)?;
                        grads.clip_global_norm(GRAD_CLIP);
                        agent.opt_actor.step(&mut agent.theta, &grads)?;
                        Ok((loss, nodes.mean_entropy))
                    } else {
                        let mut at = Tape::new();
                        let mut ct = Tape::new();
                        let (an, _cn) = a2c_losses_tape(
                            &mut at,
                            &mut ct,
                            &variant.actor,
                            &variant.critic,
                            &agent.theta,
                            &agent.omega,
                            mb,
                            config.entropy_coef,
                        )?;
                        let loss = at.scalar(an.loss);
                        let mut grads = compute_gradients(&at, an.loss, &an.theta)?;
                        grads.clip_global_norm(GRAD_CLIP);
                        agent.opt_actor.step(&mut agent.theta, &grads)?;
                        Ok((loss, an.mean_entropy))
                    }
                })();
                match step {
                    Ok((l, ent)) => {
                        m_actor.push(l);
                        m_ent.push(ent);
                    }
                    Err(e) => {
                        eprintln!("agent {i}: actor update aborted: {e}");
                        break 'epochs;
                    }
                }
            }

            // belief step (alpha2); a zero rate disables belief training
            if config.alpha2 == 0.0 {
                continue;
            }
            if let (Some(fbi), Some(fb)) = (&variant.fbi, &fbi_batch) {
                let step = (|| -> Result<(f64, f64, Option<f64>, Option<f64>)> {
                    let agent = &mut stack.agents[i];
                    let params = agent.fbi.as_mut().expect("fbi params");
                    let n_ep = fb.episodes.len();
                    let eps: Vec<Array2<f64>> = (0..t_len)
                        .map(|_| draw_eps(rng, n_ep, fbi.cfg.latent_dim))
                        .collect();
                    let mut tape = Tape::new();
                    let nodes = fbi.loss_tape(&mut tape, params, fb, &eps)?;
                    let loss = tape.scalar(nodes.loss);
                    let comp = nodes.components(&tape);
                    let grads = tape.backward(nodes.loss);
                    let mut g_psi = nodes.psi.gradients(&tape, &grads);
                    let mut g_phi = nodes.phi.gradients(&tape, &grads);
                    let mut g_varphi = nodes.varphi.gradients(&tape, &grads);
                    if !loss.is_finite() {
                        return Err(FamError::Numeric(format!("non-finite fbi loss {loss}")));
                    }
                    g_psi.clip_global_norm(GRAD_CLIP);
                    g_phi.clip_global_norm(GRAD_CLIP);
                    g_varphi.clip_global_norm(GRAD_CLIP);
                    agent.opt_psi.as_mut().unwrap().step(&mut params.psi, &g_psi)?;
                    agent.opt_phi.as_mut().unwrap().step(&mut params.phi, &g_phi)?;
                    agent
                        .opt_varphi
                        .as_mut()
                        .unwrap()
                        .step(&mut params.varphi, &g_varphi)?;
                    Ok((loss, comp.kl, comp.recon_obs, comp.recon_rew))
                })();
                match step {
                    Ok((l, kl, ro, rr)) => {
                        m_fbi.push(l);
                        m_kl.push(kl);
                        if let Some(v) = ro {
                            m_ro.push(v);
                        }
                        if let Some(v) = rr {
                            m_rr.push(v);
                        }
                    }
                    Err(e) => {
                        eprintln!("agent {i}: belief update aborted: {e}");
                        break 'epochs;
                    }
                }
            }
        }
    }

    if config.share_parameters {
        let shared = stack.agents[0].clone();
        for agent in stack.agents.iter_mut().skip(1) {
            *agent = shared.clone();
        }
    }

    Ok(LossReport {
        loss_actor: m_actor.mean(),
        loss_critic: m_critic.mean(),
        loss_fbi: m_fbi.mean(),
        kl: m_kl.mean(),
        recon_obs: m_ro.mean(),
        recon_rew: m_rr.mean(),
        entropy: m_ent.mean(),
    })
}

/// Blend every target copy toward its online parameters.
pub fn soft_update_stack(stack: &mut AgentStack, tau: f64) -> Result<()> {
    for agent in stack.agents.iter_mut() {
        soft_update(&mut agent.omega_target, &agent.omega, tau)?;
        if let Some(tt) = &mut agent.theta_target {
            soft_update(tt, &agent.theta, tau)?;
        }
        if let (Some(ft), Some(f)) = (&mut agent.fbi_target, &agent.fbi) {
            soft_update(&mut ft.psi, &f.psi, tau)?;
            soft_update(&mut ft.phi, &f.phi, tau)?;
            soft_update(&mut ft.varphi, &f.varphi, tau)?;
        }
    }
    Ok(())
}

/// splitmix64 of (seed, stream): decouples every randomness consumer so runs
/// are resumable from any cycle boundary.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Everything needed to continue a run bit-identically.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// update cycles completed
    pub cycle: usize,
    pub stack: AgentStack,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| FamError::Run(format!("checkpoint write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let json = fs::read_to_string(path)
            .map_err(|e| FamError::Load(format!("checkpoint read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// One metric-log row, written per update cycle.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub step: usize,
    pub mean_episode_return: f64,
    pub occupied_landmarks: f64,
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_fbi: f64,
    pub kl: f64,
    pub recon_obs: f64,
    pub recon_rew: f64,
    pub entropy: f64,
    pub wall_time: f64,
}

pub const METRIC_HEADER: &str = "step\tmean_episode_return\toccupied_landmarks\tloss_actor\tloss_critic\tloss_fbi\tkl\trecon_obs\trecon_rew\tentropy\twall_time";

impl MetricRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.mean_episode_return,
            self.occupied_landmarks,
            self.loss_actor,
            self.loss_critic,
            self.loss_fbi,
            self.kl,
            self.recon_obs,
            self.recon_rew,
            self.entropy,
            self.wall_time
        )
    }
}

/// Artifacts produced by [`run`].
pub struct RunArtifacts {
    pub metric_rows: Vec<MetricRow>,
    pub metric_log: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Train from scratch into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    run_loop(config, out_dir, None)
}

/// Continue a checkpointed run into `out_dir`.
pub fn resume(checkpoint: Checkpoint, out_dir: &Path) -> Result<RunArtifacts> {
    let config = checkpoint.config.clone();
    run_loop(&config, out_dir, Some(checkpoint))
}

fn run_loop(config: &RunConfig, out_dir: &Path, from: Option<Checkpoint>) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| FamError::Run(format!("create {}: {e}", out_dir.display())))?;
    fs::write(out_dir.join("config.txt"), config.to_text())
        .map_err(|e| FamError::Run(format!("config snapshot: {e}")))?;

    let variant = build_variant(config)?;
    let steps_per_cycle = config.batch_episodes * config.env.episode_len;
    let total_cycles = config.total_steps / steps_per_cycle;

    let (mut stack, start_cycle) = match from {
        Some(cp) => (cp.stack, cp.cycle),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX));
            (init_stack(&variant, config, &mut rng), 0)
        }
    };

    let metric_path = out_dir.join("metrics.tsv");
    let eval_path = out_dir.join("eval.tsv");
    let mut metric_lines = vec![METRIC_HEADER.to_string()];
    let mut eval_lines = vec!["step\tavg_return\tavg_final_reward\tavg_occupied\tavg_distance".to_string()];
    let mut rows = Vec::with_capacity(total_cycles - start_cycle);
    let started = Instant::now();

    for cycle in start_cycle..total_cycles {
        // all randomness in a cycle flows from one per-cycle stream
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, cycle as u64));
        let batch = collect_rollouts(&variant, &stack, config, &mut rng)?;
        let report = train_epoch(&variant, &mut stack, &batch, config, &mut rng)?;
        soft_update_stack(&mut stack, config.tau_soft)?;

        let n_ep = batch.episodes.len() as f64;
        let mean_ret = batch.episodes.iter().map(|e| e.ep_return).sum::<f64>() / n_ep;
        let occupied = if config.env.n_landmarks > 0 {
            batch.episodes.iter().map(|e| e.final_occupied as f64).sum::<f64>() / n_ep
        } else {
            f64::NAN
        };
        let row = MetricRow {
            step: (cycle + 1) * steps_per_cycle,
            mean_episode_return: mean_ret,
            occupied_landmarks: occupied,
            loss_actor: report.loss_actor,
            loss_critic: report.loss_critic,
            loss_fbi: report.loss_fbi,
            kl: report.kl,
            recon_obs: report.recon_obs,
            recon_rew: report.recon_rew,
            entropy: report.entropy,
            wall_time: started.elapsed().as_secs_f64(),
        };
        metric_lines.push(row.to_line());
        rows.push(row);

        let cycles_done = cycle + 1;
        if config.eval_interval > 0
            && (cycles_done % config.eval_interval == 0 || cycles_done == total_cycles)
        {
            let report = crate::eval::evaluate_stack(
                &variant,
                &stack,
                &config.env,
                config.eval_episodes,
                true,
                mix_seed(config.seed ^ 0x5eed_0eaa, cycle as u64),
            )?;
            eval_lines.push(format!(
                "{}\t{}\t{}\t{}\t{}",
                cycles_done * steps_per_cycle,
                report.avg_return,
                report.avg_final_reward,
                report.avg_occupied,
                report.avg_distance
            ));
        }
        if config.checkpoint_interval > 0 && cycles_done % config.checkpoint_interval == 0 {
            Checkpoint {
                config: config.clone(),
                cycle: cycles_done,
                stack: stack.clone(),
            }
            .save(&out_dir.join(format!("checkpoint_{cycles_done}.json")))?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint_final.json");
    Checkpoint {
        config: config.clone(),
        cycle: total_cycles,
        stack,
    }
    .save(&final_checkpoint)?;
    fs::write(&metric_path, metric_lines.join("\n") + "\n")
        .map_err(|e| FamError::Run(format!("metric log: {e}")))?;
    if eval_lines.len() > 1 {
        fs::write(&eval_path, eval_lines.join("\n") + "\n")
            .map_err(|e| FamError::Run(format!("eval log: {e}")))?;
    }

    Ok(RunArtifacts {
        metric_rows: rows,
        metric_log: metric_path,
        final_checkpoint,
    })
}
