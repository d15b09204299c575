//! Latent-conditioned actor-critic: PPO clipped-surrogate policy, TD critic
//! with a target network, discounted return and advantage computation, and
//! the A2C losses used by the baseline variants.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionId, N_ACTIONS};
use crate::error::{FamError, Result};
use crate::nn::{Mlp, ParamSet, ParamVars, Tape, VarId};

/// Sampling mode for the policy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Distribution and draw produced by one policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub probs: Vec<f64>,
    pub action: ActionId,
    pub log_prob: f64,
    pub entropy: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Policy network over concatenated (observation, latent) rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Actor {
    pub mlp: Mlp,
    pub obs_dim: usize,
    pub latent_dim: usize,
}

impl Actor {
    pub fn new(obs_dim: usize, latent_dim: usize, hidden: usize) -> Self {
        Actor {
            mlp: Mlp::new("pi", &[obs_dim + latent_dim, hidden, hidden, N_ACTIONS], 0.01),
            obs_dim,
            latent_dim,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        self.mlp.init(&mut p, rng);
        p
    }

    fn input(&self, obs: &Array2<f64>, latent: &Array2<f64>) -> Array2<f64> {
        if self.latent_dim == 0 {
            obs.clone()
        } else {
            ndarray::concatenate![Axis(1), obs.view(), latent.view()]
        }
    }

    pub fn logits(&self, theta: &ParamSet, obs: &Array2<f64>, latent: &Array2<f64>) -> Result<Array2<f64>> {
        self.mlp.apply(theta, &self.input(obs, latent))
    }

    /// Policy evaluation for a batch of rows; one draw per row.
    pub fn act_batch<R: Rng>(
        &self,
        theta: &ParamSet,
        obs: &Array2<f64>,
        latent: &Array2<f64>,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Vec<PolicyOutput>> {
        let logits = self.logits(theta, obs, latent)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                let probs = softmax(row.as_slice().unwrap());
                let action = match mode {
                    ActMode::Greedy => {
                        probs
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(i, _)| i)
                            .unwrap()
                    }
                    ActMode::Sample => {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut chosen = probs.len() - 1;
                        for (i, &p) in probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                chosen = i;
                                break;
                            }
                        }
                        chosen
                    }
                };
                let entropy = -probs
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>();
                PolicyOutput {
                    log_prob: probs[action].ln(),
                    action: ActionId(action),
                    probs,
                    entropy,
                }
            })
            .collect())
    }

    /// Single-row policy evaluation.
    pub fn act<R: Rng>(
        &self,
        theta: &ParamSet,
        obs: &Array2<f64>,
        latent: &Array2<f64>,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<PolicyOutput> {
        Ok(self
            .act_batch(theta, obs, latent, mode, rng)?
            .into_iter()
            .next()
            .expect("one row"))
    }
}

/// Scalar state-value estimator over (observation, stop-gradient latent).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Critic {
    pub mlp: Mlp,
    pub in_dim: usize,
}

impl Critic {
    pub fn new(in_dim: usize, hidden: usize) -> Self {
        Critic {
            mlp: Mlp::new("v", &[in_dim, hidden, hidden, 1], 1.0),
            in_dim,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        self.mlp.init(&mut p, rng);
        p
    }

    /// Value estimates, one per input row.
    pub fn value(&self, omega: &ParamSet, input: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.mlp.apply(omega, input)?.column(0).to_vec())
    }
}

/// Discounted return-to-go and advantage for one episode segment.
///
/// `bootstrap` is the target-critic value of the state after the last
/// transition; it is ignored when that transition is terminal.
pub fn returns_and_advantages(
    rewards: &[f64],
    dones: &[bool],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(FamError::Config(format!("gamma {gamma} outside [0, 1)")));
    }
    if rewards.len() != dones.len() || rewards.len() != values.len() {
        return Err(FamError::Input("misaligned episode arrays".into()));
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            acc = 0.0;
        }
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    let advantages = returns
        .iter()
        .zip(values.iter())
        .map(|(r, v)| r - v)
        .collect();
    Ok((returns, advantages))
}

/// Normalize advantages to zero mean, unit standard deviation.
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Flattened on-policy batch consumed by the actor/critic losses. Latents are
/// baked into the input matrices as constants (stop-gradient by construction).
#[derive(Debug, Clone)]
pub struct RlBatch {
    pub actor_in: Array2<f64>,
    pub critic_in: Array2<f64>,
    pub critic_next_in: Array2<f64>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    /// 1.0 where the transition ends its episode
    pub dones: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RlBatch {
    /// Rows `idx` of every field, in the given order.
    pub fn subset(&self, idx: &[usize]) -> RlBatch {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect();
        RlBatch {
            actor_in: self.actor_in.select(Axis(0), idx),
            critic_in: self.critic_in.select(Axis(0), idx),
            critic_next_in: self.critic_next_in.select(Axis(0), idx),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            logp_old: pick(&self.logp_old),
            rewards: pick(&self.rewards),
            dones: pick(&self.dones),
            returns: pick(&self.returns),
            advantages: pick(&self.advantages),
        }
    }

    /// Row-wise concatenation, e.g. every agent's rows when one parameter
    /// set is trained for the whole stack.
    pub fn concat(batches: &[RlBatch]) -> Result<RlBatch> {
        let views = |f: fn(&RlBatch) -> &Array2<f64>| {
            ndarray::concatenate(
                Axis(0),
                &batches.iter().map(f).map(|a| a.view()).collect::<Vec<_>>(),
            )
            .map_err(|e| FamError::Input(format!("batch concat: {e}")))
        };
        let chain = |f: fn(&RlBatch) -> &Vec<f64>| -> Vec<f64> {
            batches.iter().flat_map(|b| f(b).iter().copied()).collect()
        };
        Ok(RlBatch {
            actor_in: views(|b| &b.actor_in)?,
            critic_in: views(|b| &b.critic_in)?,
            critic_next_in: views(|b| &b.critic_next_in)?,
            actions: batches
                .iter()
                .flat_map(|b| b.actions.iter().copied())
                .collect(),
            logp_old: chain(|b| &b.logp_old),
            rewards: chain(|b| &b.rewards),
            dones: chain(|b| &b.dones),
            returns: chain(|b| &b.returns),
            advantages: chain(|b| &b.advantages),
        })
    }
}

impl RlBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(FamError::Input("empty rl batch".into()));
        }
        Ok(())
    }
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
}

/// Nodes of one recorded actor loss.
pub struct ActorLossNodes {
    pub loss: VarId,
    pub mean_entropy: f64,
    pub theta: ParamVars,
}

/// PPO clipped-surrogate actor loss (minimization form) with entropy bonus.
pub fn actor_loss_ppo_tape(
    tape: &mut Tape,
    actor: &Actor,
    theta: &ParamSet,
    batch: &RlBatch,
    epsilon_clip: f64,
    entropy_coef: f64,
) -> Result<ActorLossNodes> {
    batch.check()?;
    let n = batch.len() as f64;
    let vars = theta.leaves(tape);
    let x = tape.constant(batch.actor_in.clone());
    let logits = actor.mlp.forward(tape, &vars, x);
    let logp = tape.log_softmax_rows(logits);
    let chosen = tape.gather_cols(logp, &batch.actions);
    let old = tape.constant(column(&batch.logp_old));
    let diff = tape.sub(chosen, old);
    let ratio = tape.exp(diff);
    let adv = tape.constant(column(&batch.advantages));
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - epsilon_clip, 1.0 + epsilon_clip);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min_elem(surr1, surr2);
    let mean_surr = tape.mean_all(surr);
    let neg_surr = tape.neg(mean_surr);

    // mean policy entropy: -sum(p * log p) / n
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp);
    let ent_sum = tape.sum_all(plogp);
    let mean_ent = tape.scale(ent_sum, -1.0 / n);
    let ent_term = tape.scale(mean_ent, -entropy_coef);
    let loss = tape.add(neg_surr, ent_term);

    Ok(ActorLossNodes {
        loss,
        mean_entropy: tape.scalar(mean_ent),
        theta: vars,
    })
}

pub fn actor_loss_ppo(
    actor: &Actor,
    theta: &ParamSet,
    batch: &RlBatch,
    epsilon_clip: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = actor_loss_ppo_tape(&mut tape, actor, theta, batch, epsilon_clip, entropy_coef)?;
    Ok(tape.scalar(nodes.loss))
}

/// One-step TD targets r + gamma * V_target(next) with terminal cut-off.
pub fn td_targets(
    critic: &Critic,
    omega_target: &ParamSet,
    batch: &RlBatch,
    gamma: f64,
) -> Result<Vec<f64>> {
    let next_values = critic.value(omega_target, &batch.critic_next_in)?;
    Ok(batch
        .rewards
        .iter()
        .zip(next_values.iter())
        .zip(batch.dones.iter())
        .map(|((r, v), d)| r + gamma * v * (1.0 - d))
        .collect())
}

/// Nodes of one recorded critic loss.
pub struct CriticLossNodes {
    pub loss: VarId,
    pub omega: ParamVars,
}

/// Squared TD error against a frozen target network.
pub fn critic_loss_tape(
    tape: &mut Tape,
    critic: &Critic,
    omega: &ParamSet,
    omega_target: &ParamSet,
    batch: &RlBatch,
    gamma: f64,
) -> Result<CriticLossNodes> {
    batch.check()?;
    let targets = td_targets(critic, omega_target, batch, gamma)?;
    let vars = omega.leaves(tape);
    let x = tape.constant(batch.critic_in.clone());
    let v = critic.mlp.forward(tape, &vars, x);
    let t = tape.constant(column(&targets));
    let diff = tape.sub(t, v);
    let sq = tape.square(diff);
    let loss = tape.mean_all(sq);
    Ok(CriticLossNodes { loss, omega: vars })
}

pub fn critic_loss(
    critic: &Critic,
    omega: &ParamSet,
    omega_target: &ParamSet,
    batch: &RlBatch,
    gamma: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = critic_loss_tape(&mut tape, critic, omega, omega_target, batch, gamma)?;
    Ok(tape.scalar(nodes.loss))
}

/// A2C losses: policy-gradient actor with entropy bonus, and a critic
/// regressed on the discounted returns.
pub fn a2c_losses_tape(
    actor_tape: &mut Tape,
    critic_tape: &mut Tape,
    actor: &Actor,
    critic: &Critic,
    theta: &ParamSet,
    omega: &ParamSet,
    batch: &RlBatch,
    entropy_coef: f64,
) -> Result<(ActorLossNodes, CriticLossNodes)> {
    batch.check()?;
    let n = batch.len() as f64;

    let theta_vars = theta.leaves(actor_tape);
    let x = actor_tape.constant(batch.actor_in.clone());
    let logits = actor.mlp.forward(actor_tape, &theta_vars, x);
    let logp = actor_tape.log_softmax_rows(logits);
    let chosen = actor_tape.gather_cols(logp, &batch.actions);
    let adv = actor_tape.constant(column(&batch.advantages));
    let pg = actor_tape.mul(chosen, adv);
    let mean_pg = actor_tape.mean_all(pg);
    let neg_pg = actor_tape.neg(mean_pg);
    let p = actor_tape.exp(logp);
    let plogp = actor_tape.mul(p, logp);
    let ent_sum = actor_tape.sum_all(plogp);
    let mean_ent = actor_tape.scale(ent_sum, -1.0 / n);
    let ent_term = actor_tape.scale(mean_ent, -entropy_coef);
    let actor_loss = actor_tape.add(neg_pg, ent_term);

    let omega_vars = omega.leaves(critic_tape);
    let x = critic_tape.constant(batch.critic_in.clone());
    let v = critic.mlp.forward(critic_tape, &omega_vars, x);
    let r = critic_tape.constant(column(&batch.returns));
    let diff = critic_tape.sub(r, v);
    let sq = critic_tape.square(diff);
    let critic_loss = critic_tape.mean_all(sq);

    Ok((
        ActorLossNodes {
            loss: actor_loss,
            mean_entropy: actor_tape.scalar(mean_ent),
            theta: theta_vars,
        },
        CriticLossNodes {
            loss: critic_loss,
            omega: omega_vars,
        },
    ))
}

pub fn a2c_losses(
    actor: &Actor,
    critic: &Critic,
    theta: &ParamSet,
    omega: &ParamSet,
    batch: &RlBatch,
    entropy_coef: f64,
) -> Result<(f64, f64)> {
    let mut at = Tape::new();
    let mut ct = Tape::new();
    let (an, cn) = a2c_losses_tape(&mut at, &mut ct, actor, critic, theta, omega, batch, entropy_coef)?;
    Ok((at.scalar(an.loss), ct.scalar(cn.loss)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_actor(obs_dim: usize, latent_dim: usize) -> (Actor, ParamSet) {
        let actor = Actor::new(obs_dim, latent_dim, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = actor.init(&mut rng);
        for (_, a) in p.iter_mut() {
            a.fill(0.0);
        }
        (actor, p)
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let (actor, p) = zero_actor(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = actor
            .act(&p, &array![[1.0, 2.0, 3.0]], &array![[0.5, -0.5]], ActMode::Sample, &mut rng)
            .unwrap();
        for prob in &out.probs {
            assert_abs_diff_eq!(*prob, 0.2, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.entropy, 5.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn greedy_is_deterministic_and_shift_invariant() {
        let actor = Actor::new(4, 0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = actor.init(&mut rng);
        let obs = array![[0.4, -0.2, 0.9, 0.1]];
        let empty = Array2::zeros((1, 0));
        let a1 = actor.act(&p, &obs, &empty, ActMode::Greedy, &mut rng).unwrap();
        let a2 = actor.act(&p, &obs, &empty, ActMode::Greedy, &mut rng).unwrap();
        assert_eq!(a1.action, a2.action);

        // adding a constant to all logits leaves the argmax unchanged
        let logits = actor.logits(&p, &obs, &empty).unwrap();
        let shifted = softmax(&logits.row(0).iter().map(|l| l + 7.0).collect::<Vec<_>>());
        let base = softmax(&logits.row(0).to_vec());
        let am = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(am(&base), am(&shifted));
    }

    #[test]
    fn softmax_matches_closed_form() {
        let probs = softmax(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let z = 1.0f64.exp() + 4.0;
        assert_abs_diff_eq!(probs[0], 1.0f64.exp() / z, epsilon = 1e-12);
        for p in &probs[1..] {
            assert_abs_diff_eq!(*p, 1.0 / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_critic_outputs_zero_and_random_matches_mlp_oracle() {
        let critic = Critic::new(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = critic.init(&mut rng);
        let x = array![[0.1, 0.2, 0.3, 0.4, 0.5], [1.0, -1.0, 0.0, 2.0, -2.0]];
        let oracle = Mlp::new("v", &[5, 8, 8, 1], 1.0).apply(&p, &x).unwrap();
        let v = critic.value(&p, &x).unwrap();
        assert_abs_diff_eq!(v[0], oracle[[0, 0]], epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], oracle[[1, 0]], epsilon = 1e-12);

        let mut zp = p.clone();
        for (_, a) in zp.iter_mut() {
            a.fill(0.0);
        }
        assert_eq!(critic.value(&zp, &x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn returns_two_step_episode() {
        let (r, a) = returns_and_advantages(&[1.0, 1.0], &[false, true], &[0.0, 0.0], 0.0, 0.9).unwrap();
        assert_abs_diff_eq!(r[0], 1.9, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 1.0, epsilon = 1e-12);
        assert_eq!(r, a);
    }

    #[test]
    fn returns_zero_rewards() {
        let values = vec![0.3, -0.5, 0.1];
        let (r, a) =
            returns_and_advantages(&[0.0; 3], &[false, false, true], &values, 0.0, 0.99).unwrap();
        assert_eq!(r, vec![0.0; 3]);
        for (adv, v) in a.iter().zip(values.iter()) {
            assert_abs_diff_eq!(*adv, -v, epsilon = 1e-12);
        }
    }

    #[test]
    fn returns_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gamma = 0.97;
        let rewards: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut dones = vec![false; 25];
        dones[24] = true;
        let values = vec![0.0; 25];
        let (r, _) = returns_and_advantages(&rewards, &dones, &values, 0.0, gamma).unwrap();
        // brute force: R_t = sum_l gamma^l r_{t+l}
        for t in 0..25 {
            let mut expect = 0.0;
            for l in 0..(25 - t) {
                expect += gamma.powi(l as i32) * rewards[t + l];
            }
            assert_abs_diff_eq!(r[t], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn returns_bootstrap_at_truncation() {
        let (r, _) = returns_and_advantages(&[1.0], &[false], &[0.0], 10.0, 0.9).unwrap();
        assert_abs_diff_eq!(r[0], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_validation() {
        assert!(returns_and_advantages(&[1.0], &[true], &[0.0], 0.0, 1.0).is_err());
        assert!(returns_and_advantages(&[1.0], &[true], &[0.0], 0.0, -0.1).is_err());
    }

    fn single_row_batch(actor: &Actor, theta: &ParamSet, adv: f64, ratio: f64) -> RlBatch {
        // choose logp_old so that exp(logp_new - logp_old) == ratio
        let obs = array![[0.3, -0.3, 0.6]];
        let latent = array![[0.2, 0.1]];
        let logits = actor.logits(theta, &obs, &latent).unwrap();
        let probs = softmax(&logits.row(0).to_vec());
        let logp_new = probs[2].ln();
        let actor_in = ndarray::concatenate![Axis(1), obs.view(), latent.view()];
        RlBatch {
            actor_in: actor_in.clone(),
            critic_in: actor_in.clone(),
            critic_next_in: actor_in,
            actions: vec![2],
            logp_old: vec![logp_new - ratio.ln()],
            rewards: vec![0.0],
            dones: vec![1.0],
            returns: vec![0.0],
            advantages: vec![adv],
        }
    }

    #[test]
    fn ppo_ratio_one_gives_negative_mean_advantage() {
        let actor = Actor::new(3, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = actor.init(&mut rng);
        let batch = single_row_batch(&actor, &theta, 1.7, 1.0);
        let loss = actor_loss_ppo(&actor, &theta, &batch, 0.2, 0.0).unwrap();
        assert_abs_diff_eq!(loss, -1.7, epsilon = 1e-9);
    }

    #[test]
    fn ppo_clips_positive_advantage() {
        // ratio 1.5, eps 0.2, A = 1 -> surrogate min(1.5, 1.2) = 1.2
        let actor = Actor::new(3, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = actor.init(&mut rng);
        let batch = single_row_batch(&actor, &theta, 1.0, 1.5);
        let loss = actor_loss_ppo(&actor, &theta, &batch, 0.2, 0.0).unwrap();
        assert_abs_diff_eq!(loss, -1.2, epsilon = 1e-9);
    }

    #[test]
    fn ppo_clips_negative_advantage() {
        // ratio 0.5, eps 0.2, A = -1 -> min(-0.5, -0.8) = -0.8
        let actor = Actor::new(3, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = actor.init(&mut rng);
        let batch = single_row_batch(&actor, &theta, -1.0, 0.5);
        let loss = actor_loss_ppo(&actor, &theta, &batch, 0.2, 0.0).unwrap();
        assert_abs_diff_eq!(loss, 0.8, epsilon = 1e-9);
    }

    #[test]
    fn critic_loss_zero_cases_and_oracle() {
        let critic = Critic::new(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let omega = critic.init(&mut rng);
        let mut zero = omega.clone();
        for (_, a) in zero.iter_mut() {
            a.fill(0.0);
        }
        let x = Array2::zeros((1, 5));
        let batch = RlBatch {
            actor_in: x.clone(),
            critic_in: x.clone(),
            critic_next_in: x.clone(),
            actions: vec![0],
            logp_old: vec![0.0],
            rewards: vec![0.0],
            dones: vec![0.0],
            returns: vec![0.0],
            advantages: vec![0.0],
        };
        // r = 0 and both values 0 -> loss 0
        assert_abs_diff_eq!(critic_loss(&critic, &zero, &zero, &batch, 0.9).unwrap(), 0.0);

        // terminal step, r = 1, V = 1 -> squared error 0; build V = 1 by bias
        let mut one = zero.clone();
        one.iter_mut()
            .find(|(k, _)| *k == "v.l2.b")
            .map(|(_, a)| a.fill(1.0));
        let mut b = batch.clone();
        b.rewards = vec![1.0];
        b.dones = vec![1.0];
        assert_abs_diff_eq!(critic_loss(&critic, &one, &one, &b, 0.9).unwrap(), 0.0);

        // 3-transition batch vs scalar arithmetic oracle
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let xs = crate::fbi::draw_eps(&mut rng2, 3, 5);
        let xn = crate::fbi::draw_eps(&mut rng2, 3, 5);
        let batch = RlBatch {
            actor_in: xs.clone(),
            critic_in: xs.clone(),
            critic_next_in: xn.clone(),
            actions: vec![0, 1, 2],
            logp_old: vec![0.0; 3],
            rewards: vec![0.5, -1.0, 2.0],
            dones: vec![0.0, 0.0, 1.0],
            returns: vec![0.0; 3],
            advantages: vec![0.0; 3],
        };
        let omega_target = critic.init(&mut rng2);
        let gamma = 0.95;
        let v = critic.value(&omega, &xs).unwrap();
        let vt = critic.value(&omega_target, &xn).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            let target = batch.rewards[i] + gamma * vt[i] * (1.0 - batch.dones[i]);
            expect += (target - v[i]).powi(2);
        }
        expect /= 3.0;
        assert_abs_diff_eq!(
            critic_loss(&critic, &omega, &omega_target, &batch, gamma).unwrap(),
            expect,
            epsilon = 1e-10
        );
    }

    #[test]
    fn a2c_loss_cases() {
        let actor = Actor::new(3, 0, 8);
        let critic = Critic::new(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = actor.init(&mut rng);
        let omega = critic.init(&mut rng);
        let x = crate::fbi::draw_eps(&mut rng, 4, 3);
        let mut batch = RlBatch {
            actor_in: x.clone(),
            critic_in: x.clone(),
            critic_next_in: x.clone(),
            actions: vec![0, 1, 2, 3],
            logp_old: vec![0.0; 4],
            rewards: vec![0.0; 4],
            dones: vec![0.0, 0.0, 0.0, 1.0],
            returns: critic.value(&omega, &x).unwrap(),
            advantages: vec![0.0; 4],
        };

        // A = 0 -> actor loss is the entropy term only
        let ent_coef = 0.01;
        let (al, cl) = a2c_losses(&actor, &critic, &theta, &omega, &batch, ent_coef).unwrap();
        let logits = actor.logits(&theta, &x, &Array2::zeros((4, 0))).unwrap();
        let mean_ent: f64 = logits
            .rows()
            .into_iter()
            .map(|row| {
                let p = softmax(row.as_slice().unwrap());
                -p.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(al, -ent_coef * mean_ent, epsilon = 1e-10);
        // V = R -> critic loss 0
        assert_abs_diff_eq!(cl, 0.0, epsilon = 1e-20);

        // toy batch vs scalar oracle
        batch.advantages = vec![0.5, -0.5, 1.0, 2.0];
        batch.returns = vec![1.0, 0.0, -1.0, 0.5];
        let (al, cl) = a2c_losses(&actor, &critic, &theta, &omega, &batch, ent_coef).unwrap();
        let v = critic.value(&omega, &x).unwrap();
        let mut pg = 0.0;
        for i in 0..4 {
            let p = softmax(logits.row(i).as_slice().unwrap());
            pg += p[batch.actions[i]].ln() * batch.advantages[i];
        }
        let expect_actor = -pg / 4.0 - ent_coef * mean_ent;
        let expect_critic = (0..4)
            .map(|i| (batch.returns[i] - v[i]).powi(2))
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(al, expect_actor, epsilon = 1e-10);
        assert_abs_diff_eq!(cl, expect_critic, epsilon = 1e-10);
    }

    #[test]
    fn empty_batch_rejected() {
        let actor = Actor::new(3, 0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = actor.init(&mut rng);
        let batch = RlBatch {
            actor_in: Array2::zeros((0, 3)),
            critic_in: Array2::zeros((0, 3)),
            critic_next_in: Array2::zeros((0, 3)),
            actions: vec![],
            logp_old: vec![],
            rewards: vec![],
            dones: vec![],
            returns: vec![],
            advantages: vec![],
        };
        assert!(actor_loss_ppo(&actor, &theta, &batch, 0.2, 0.01).is_err());
    }

    #[test]
    fn normalize_advantages_moments() {
        let mut a = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn subset_reorders_every_field() {
        let batch = RlBatch {
            actor_in: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            critic_in: array![[10.0], [20.0], [30.0]],
            critic_next_in: array![[11.0], [21.0], [31.0]],
            actions: vec![0, 1, 2],
            logp_old: vec![-0.1, -0.2, -0.3],
            rewards: vec![1.0, 2.0, 3.0],
            dones: vec![0.0, 0.0, 1.0],
            returns: vec![6.0, 5.0, 3.0],
            advantages: vec![0.5, -0.5, 0.0],
        };
        let sub = batch.subset(&[2, 0]);
        assert_eq!(sub.actor_in, array![[5.0, 6.0], [1.0, 2.0]]);
        assert_eq!(sub.critic_in, array![[30.0], [10.0]]);
        assert_eq!(sub.critic_next_in, array![[31.0], [11.0]]);
        assert_eq!(sub.actions, vec![2, 0]);
        assert_eq!(sub.logp_old, vec![-0.3, -0.1]);
        assert_eq!(sub.rewards, vec![3.0, 1.0]);
        assert_eq!(sub.dones, vec![1.0, 0.0]);
        assert_eq!(sub.returns, vec![3.0, 6.0]);
        assert_eq!(sub.advantages, vec![0.0, 0.5]);
    }
}
