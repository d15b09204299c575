//! Evaluation protocol and artifact exports: frozen-parameter episode
//! metrics (return, final reward, occupied landmarks, landmark distance),
//! trajectory dumps for strategy analysis, and encoder-embedding dumps for
//! latent-space visualization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{self, EnvConfig, ParticleEnv, WorldState, N_ACTIONS};
use crate::error::{FamError, Result};
use crate::fbi::{draw_eps, sample_latent};
use crate::nn::RecurrentState;
use crate::rl::ActMode;
use crate::trainer::{build_variant, mix_seed, AgentStack, Checkpoint, Variant};

/// Aggregate metrics over a fixed number of evaluation episodes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: usize,
    pub avg_return: f64,
    pub avg_final_reward: f64,
    pub avg_occupied: f64,
    pub avg_distance: f64,
    pub raw_returns: Vec<f64>,
    pub raw_final_rewards: Vec<f64>,
    pub raw_occupied: Vec<f64>,
    pub raw_distances: Vec<f64>,
    pub config_digest: String,
}

impl EvalReport {
    /// Structured text rendering: aggregates first, raw values after.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        writeln!(out, "episodes = {}", self.episodes).unwrap();
        writeln!(out, "config_digest = {}", self.config_digest).unwrap();
        writeln!(out, "avg_return = {}", self.avg_return).unwrap();
        writeln!(out, "avg_final_reward = {}", self.avg_final_reward).unwrap();
        writeln!(out, "avg_occupied = {}", self.avg_occupied).unwrap();
        writeln!(out, "avg_distance = {}", self.avg_distance).unwrap();
        writeln!(out, "raw_returns = {}", join(&self.raw_returns)).unwrap();
        writeln!(out, "raw_final_rewards = {}", join(&self.raw_final_rewards)).unwrap();
        writeln!(out, "raw_occupied = {}", join(&self.raw_occupied)).unwrap();
        writeln!(out, "raw_distances = {}", join(&self.raw_distances)).unwrap();
        out
    }
}

/// Per-agent latent statistics at one step.
#[derive(Debug, Clone)]
pub struct LatentRecord {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Vec<f64>,
}

/// One rolled-out evaluation episode with everything the exports need.
#[derive(Debug, Clone)]
pub struct EvalEpisode {
    /// world states s_0..s_T
    pub states: Vec<WorldState>,
    pub rewards: Vec<f64>,
    /// actions[t][agent]
    pub actions: Vec<Vec<usize>>,
    /// latents[t][agent]; empty inner vectors without a belief module
    pub latents: Vec<Vec<LatentRecord>>,
    pub final_occupied: usize,
}

impl EvalEpisode {
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Roll one episode with frozen parameters. Deterministic mode takes greedy
/// actions and uses the posterior mean as the latent.
pub fn run_eval_episode<R: Rng>(
    variant: &Variant,
    stack: &AgentStack,
    env_config: &EnvConfig,
    episode_seed: u64,
    deterministic: bool,
    rng: &mut R,
) -> Result<EvalEpisode> {
    let n = variant.n_agents;
    let d = variant.latent_dim;
    let (mut env, mut obs) = ParticleEnv::new(env_config.clone(), episode_seed)?;

    let mut hidden: Vec<RecurrentState> = (0..n)
        .map(|_| RecurrentState::zeros(1, variant.fbi.as_ref().map_or(1, |f| f.cfg.hidden)))
        .collect();
    let mut prev_action: Vec<Array2<f64>> = vec![Array2::zeros((1, N_ACTIONS)); n];
    let mut prev_reward = vec![0.0_f64; n];

    let mut states = vec![env.state.clone()];
    let mut rewards = vec![];
    let mut actions = vec![];
    let mut latents = vec![];
    let mut final_occupied = 0;

    let mode = if deterministic { ActMode::Greedy } else { ActMode::Sample };

    for _t in 0..env_config.episode_len {
        let mut joint = Vec::with_capacity(n);
        let mut step_latents = Vec::with_capacity(n);
        for i in 0..n {
            let o = Array2::from_shape_vec((1, variant.obs_dim), obs[i].0.clone()).unwrap();
            let z = if let Some(fbi) = &variant.fbi {
                let params = stack.agents[i].fbi.as_ref().expect("fbi params");
                let r_in = Array2::from_elem((1, 1), prev_reward[i]);
                let (h2, mu, ls) =
                    fbi.encode_step(&params.psi, &hidden[i], &o, &prev_action[i], &r_in)?;
                hidden[i] = h2;
                let z = if deterministic {
                    mu.clone()
                } else {
                    let eps = draw_eps(rng, 1, d);
                    sample_latent(&mu, &ls, &eps)
                };
                step_latents.push(LatentRecord {
                    mu: mu.row(0).to_vec(),
                    log_sigma: ls.row(0).to_vec(),
                    z: z.row(0).to_vec(),
                });
                z
            } else {
                step_latents.push(LatentRecord {
                    mu: vec![],
                    log_sigma: vec![],
                    z: vec![],
                });
                Array2::zeros((1, 0))
            };
            let out = variant.actor.act(&stack.agents[i].theta, &o, &z, mode, rng)?;
            joint.push(out.action);
        }

        let res = env.step(&joint)?;
        states.push(env.state.clone());
        rewards.push(res.team_reward);
        final_occupied = res.info.occupied_count;
        for i in 0..n {
            prev_action[i] = {
                let mut row = Array2::zeros((1, N_ACTIONS));
                row[[0, joint[i].0]] = 1.0;
                row
            };
            prev_reward[i] = res.team_reward;
        }
        actions.push(joint.iter().map(|a| a.0).collect());
        latents.push(step_latents);
        obs = res.observations;
    }

    Ok(EvalEpisode {
        states,
        rewards,
        actions,
        latents,
        final_occupied,
    })
}

/// Final-step sum over landmarks of the distance to the nearest agent.
fn final_distance(state: &WorldState, config: &EnvConfig) -> f64 {
    env::min_distances(state, config).iter().sum()
}

/// Evaluate a live parameter stack (used during training and by [`evaluate`]).
pub fn evaluate_stack(
    variant: &Variant,
    stack: &AgentStack,
    env_config: &EnvConfig,
    episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(FamError::Input("need at least one evaluation episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw_returns = Vec::with_capacity(episodes);
    let mut raw_final_rewards = Vec::with_capacity(episodes);
    let mut raw_occupied = Vec::with_capacity(episodes);
    let mut raw_distances = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let ep_seed = mix_seed(seed, e as u64);
        let ep = run_eval_episode(variant, stack, env_config, ep_seed, deterministic, &mut rng)?;
        raw_returns.push(ep.episode_return());
        raw_final_rewards.push(*ep.rewards.last().unwrap());
        raw_occupied.push(ep.final_occupied as f64);
        raw_distances.push(final_distance(ep.states.last().unwrap(), env_config));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        episodes,
        avg_return: mean(&raw_returns),
        avg_final_reward: mean(&raw_final_rewards),
        avg_occupied: mean(&raw_occupied),
        avg_distance: mean(&raw_distances),
        raw_returns,
        raw_final_rewards,
        raw_occupied,
        raw_distances,
        config_digest: String::new(),
    })
}

/// Evaluate a checkpoint over a fixed number of episodes.
pub fn evaluate(
    checkpoint: &Checkpoint,
    episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalReport> {
    let variant = build_variant(&checkpoint.config)?;
    let mut report = evaluate_stack(
        &variant,
        &checkpoint.stack,
        &checkpoint.config.env,
        episodes,
        deterministic,
        seed,
    )?;
    report.config_digest = checkpoint.config.digest();
    Ok(report)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| FamError::Io(e))?;
    Ok(())
}

/// Export per-step entity positions, team reward, and joint actions.
/// Each row holds the state after that step, so rewards replay exactly
/// from the positions in the same row.
pub fn export_trajectories(
    checkpoint: &Checkpoint,
    n_episodes: usize,
    deterministic: bool,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let variant = build_variant(&checkpoint.config)?;
    let cfg = &checkpoint.config.env;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut header = vec!["episode".to_string(), "t".to_string()];
    for e in 0..cfg.n_entities() {
        header.push(format!("x{e}"));
        header.push(format!("y{e}"));
    }
    header.push("reward".to_string());
    for a in 0..cfg.n_agents {
        header.push(format!("action{a}"));
    }
    let mut lines = vec![header.join("\t")];

    for e in 0..n_episodes {
        let ep_seed = mix_seed(seed, e as u64);
        let ep = run_eval_episode(&variant, &checkpoint.stack, cfg, ep_seed, deterministic, &mut rng)?;
        for t in 0..ep.rewards.len() {
            let state = &ep.states[t + 1];
            let mut cols = vec![e.to_string(), t.to_string()];
            for p in &state.positions {
                cols.push(p[0].to_string());
                cols.push(p[1].to_string());
            }
            cols.push(ep.rewards[t].to_string());
            for &a in &ep.actions[t] {
                cols.push(a.to_string());
            }
            lines.push(cols.join("\t"));
        }
    }
    write_file(path, &(lines.join("\n") + "\n"))
}

/// Export per-step, per-agent posterior statistics and the agent's position.
pub fn export_embeddings(
    checkpoint: &Checkpoint,
    n_episodes: usize,
    deterministic: bool,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let variant = build_variant(&checkpoint.config)?;
    if variant.fbi.is_none() {
        return Err(FamError::Input(format!(
            "algorithm '{}' has no belief module to export",
            variant.algo.name()
        )));
    }
    let d = variant.latent_dim;
    let cfg = &checkpoint.config.env;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut header = vec!["episode".to_string(), "t".to_string(), "agent".to_string()];
    for k in 0..d {
        header.push(format!("mu{k}"));
    }
    for k in 0..d {
        header.push(format!("log_sigma{k}"));
    }
    for k in 0..d {
        header.push(format!("z{k}"));
    }
    header.push("x".to_string());
    header.push("y".to_string());
    let mut lines = vec![header.join("\t")];

    for e in 0..n_episodes {
        let ep_seed = mix_seed(seed, e as u64);
        let ep = run_eval_episode(&variant, &checkpoint.stack, cfg, ep_seed, deterministic, &mut rng)?;
        for t in 0..ep.rewards.len() {
            for (agent, rec) in ep.latents[t].iter().enumerate() {
                let mut cols = vec![e.to_string(), t.to_string(), agent.to_string()];
                cols.extend(rec.mu.iter().map(|v| v.to_string()));
                cols.extend(rec.log_sigma.iter().map(|v| v.to_string()));
                cols.extend(rec.z.iter().map(|v| v.to_string()));
                // positions at the step the posterior was formed on
                let p = ep.states[t].positions[agent];
                cols.push(p[0].to_string());
                cols.push(p[1].to_string());
                lines.push(cols.join("\t"));
            }
        }
    }
    write_file(path, &(lines.join("\n") + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Algorithm, RunConfig};
    use crate::env::team_reward;
    use crate::trainer::init_stack;

    fn checkpoint(algo: Algorithm, n_agents: usize, n_landmarks: usize) -> Checkpoint {
        let mut env = EnvConfig::cn(n_agents, n_landmarks);
        env.episode_len = 25;
        let mut cfg = RunConfig::new(env, algo);
        cfg.hidden_size = 8;
        cfg.latent_dim = 5;
        cfg.total_steps = 250;
        let variant = build_variant(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = init_stack(&variant, &cfg, &mut rng);
        Checkpoint {
            config: cfg,
            cycle: 0,
            stack,
        }
    }

    #[test]
    fn report_counts_and_recomputation() {
        let cp = checkpoint(Algorithm::Fam, 2, 2);
        let report = evaluate(&cp, 7, true, 11).unwrap();
        assert_eq!(report.episodes, 7);
        assert_eq!(report.raw_returns.len(), 7);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((report.avg_return - mean(&report.raw_returns)).abs() < 1e-12);
        assert!((report.avg_occupied - mean(&report.raw_occupied)).abs() < 1e-12);
        assert!((report.avg_distance - mean(&report.raw_distances)).abs() < 1e-12);
        // navigation rewards are non-positive
        assert!(report.avg_return < 0.0);
        assert!(report.avg_occupied >= 0.0 && report.avg_occupied <= 2.0);
        assert!(report.avg_distance >= 0.0);
    }

    #[test]
    fn deterministic_evaluation_repeats() {
        let cp = checkpoint(Algorithm::Fam, 2, 2);
        let a = evaluate(&cp, 3, true, 5).unwrap();
        let b = evaluate(&cp, 3, true, 5).unwrap();
        assert_eq!(a.raw_returns, b.raw_returns);
        assert_eq!(a.raw_distances, b.raw_distances);
    }

    #[test]
    fn trajectory_export_shape_and_replay() {
        let cp = checkpoint(Algorithm::Ippo, 2, 2);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("traj.tsv");
        export_trajectories(&cp, 1, true, 3, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + 25);
        let cols: Vec<&str> = lines[0].split('\t').collect();
        // episode, t, 4 entities x 2 coords, reward, 2 actions
        assert_eq!(cols.len(), 2 + 8 + 1 + 2);

        // rewards replay exactly from the positions in the row
        let cfg = &cp.config.env;
        for line in &lines[1..] {
            let v: Vec<f64> = line.split('\t').map(|s| s.parse().unwrap()).collect();
            let positions: Vec<[f64; 2]> =
                (0..4).map(|e| [v[2 + 2 * e], v[3 + 2 * e]]).collect();
            let state = WorldState {
                velocities: vec![[0.0, 0.0]; 4],
                positions,
                t: 0,
                done: false,
            };
            let replayed = team_reward(&state, cfg);
            assert!((v[10] - replayed).abs() < 1e-9, "{} vs {replayed}", v[10]);
        }
    }

    #[test]
    fn trajectory_export_deterministic() {
        let cp = checkpoint(Algorithm::Fam, 2, 2);
        let tmp = tempfile::tempdir().unwrap();
        let p1 = tmp.path().join("a.tsv");
        let p2 = tmp.path().join("b.tsv");
        export_trajectories(&cp, 2, true, 9, &p1).unwrap();
        export_trajectories(&cp, 2, true, 9, &p2).unwrap();
        assert_eq!(fs::read_to_string(p1).unwrap(), fs::read_to_string(p2).unwrap());
    }

    #[test]
    fn embedding_export_shape_and_deterministic_latent() {
        let cp = checkpoint(Algorithm::Fam, 2, 2);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("emb.tsv");
        export_embeddings(&cp, 1, true, 4, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        // 25 steps x 2 agents
        assert_eq!(lines.len(), 1 + 50);
        let cols: Vec<&str> = lines[0].split('\t').collect();
        assert_eq!(cols.len(), 3 + 5 + 5 + 5 + 2);
        // deterministic mode: z equals mu
        for line in &lines[1..] {
            let v: Vec<f64> = line.split('\t').map(|s| s.parse().unwrap()).collect();
            for k in 0..5 {
                assert_eq!(v[3 + k], v[13 + k]);
            }
        }
    }

    #[test]
    fn embedding_export_mu_matches_fresh_replay() {
        let cp = checkpoint(Algorithm::Fam, 2, 2);
        let variant = build_variant(&cp.config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = run_eval_episode(&variant, &cp.stack, &cp.config.env, 77, true, &mut rng).unwrap();

        // re-encode agent 0's logged stream with a fresh recurrent state
        let fbi = variant.fbi.as_ref().unwrap();
        let psi = &cp.stack.agents[0].fbi.as_ref().unwrap().psi;
        let mut hidden = RecurrentState::zeros(1, fbi.cfg.hidden);
        let mut prev_a = Array2::zeros((1, N_ACTIONS));
        let mut prev_r = 0.0;
        for t in 0..25 {
            let obs = env::observations(&ep.states[t], &cp.config.env);
            let o = Array2::from_shape_vec((1, variant.obs_dim), obs[0].0.clone()).unwrap();
            let r_in = Array2::from_elem((1, 1), prev_r);
            let (h2, mu, _) = fbi.encode_step(psi, &hidden, &o, &prev_a, &r_in).unwrap();
            hidden = h2;
            for k in 0..5 {
                assert!((mu[[0, k]] - ep.latents[t][0].mu[k]).abs() < 1e-12);
            }
            prev_a = Array2::zeros((1, N_ACTIONS));
            prev_a[[0, ep.actions[t][0]]] = 1.0;
            prev_r = ep.rewards[t];
        }
    }

    #[test]
    fn embedding_export_requires_belief_module() {
        let cp = checkpoint(Algorithm::Ippo, 2, 2);
        let tmp = tempfile::tempdir().unwrap();
        assert!(export_embeddings(&cp, 1, true, 0, &tmp.path().join("e.tsv")).is_err());
    }
}
