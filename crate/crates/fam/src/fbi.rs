//! Fact-based belief inference: a recurrent variational encoder that turns an
//! agent's own (observation, previous action, reward) stream into a latent
//! representation of the other agents' policies, plus decoders trained to
//! predict the next observation and reward from (o_t, u_t, z_t).

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FamError, Result};
use crate::nn::{Gru, Mlp, ParamSet, ParamVars, RecurrentState, Tape, VarId};

pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Architecture and loss switches for one belief-inference module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbiConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    /// decoders see (o_t, u_t, z_t); false restricts them to z_t alone
    pub decoder_input_oa: bool,
    pub recon_obs: bool,
    pub recon_rew: bool,
}

impl FbiConfig {
    pub fn new(obs_dim: usize, n_actions: usize) -> Self {
        FbiConfig {
            obs_dim,
            n_actions,
            latent_dim: 5,
            hidden: 64,
            beta: 0.001,
            decoder_input_oa: true,
            recon_obs: true,
            recon_rew: true,
        }
    }

    pub fn encoder_in(&self) -> usize {
        self.obs_dim + self.n_actions + 1
    }

    pub fn decoder_in(&self) -> usize {
        if self.decoder_input_oa {
            self.obs_dim + self.n_actions + self.latent_dim
        } else {
            self.latent_dim
        }
    }
}

/// Encoder, observation-decoder, and reward-decoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbiParams {
    pub psi: ParamSet,
    pub phi: ParamSet,
    pub varphi: ParamSet,
    pub beta: f64,
}

/// Per-step variational posterior for one agent.
#[derive(Debug, Clone)]
pub struct BeliefPosterior {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
    pub z: Array2<f64>,
    pub state: RecurrentState,
}

/// The belief-inference networks (architecture; parameters live in
/// [`FbiParams`]).
#[derive(Debug, Clone)]
pub struct Fbi {
    pub cfg: FbiConfig,
    feat: Mlp,
    gru: Gru,
    mu_head: Mlp,
    logsig_head: Mlp,
    dec_obs: Mlp,
    dec_rew: Mlp,
}

impl Fbi {
    pub fn new(cfg: FbiConfig) -> Self {
        let h = cfg.hidden;
        Fbi {
            feat: Mlp::new("feat", &[cfg.encoder_in(), h], 2f64.sqrt()),
            gru: Gru::new("gru", h, h),
            mu_head: Mlp::new("mu", &[h, cfg.latent_dim], 1.0),
            logsig_head: Mlp::new("logsig", &[h, cfg.latent_dim], 1.0),
            dec_obs: Mlp::new("dec", &[cfg.decoder_in(), h, h, cfg.obs_dim], 1.0),
            dec_rew: Mlp::new("dec", &[cfg.decoder_in(), h, h, 1], 1.0),
            cfg,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> FbiParams {
        let mut psi = ParamSet::new();
        self.feat.init(&mut psi, rng);
        self.gru.init(&mut psi, rng);
        self.mu_head.init(&mut psi, rng);
        self.logsig_head.init(&mut psi, rng);
        let mut phi = ParamSet::new();
        self.dec_obs.init(&mut phi, rng);
        let mut varphi = ParamSet::new();
        self.dec_rew.init(&mut varphi, rng);
        FbiParams {
            psi,
            phi,
            varphi,
            beta: self.cfg.beta,
        }
    }

    /// One encoder step on a recording tape. Inputs are row batches; returns
    /// (next hidden, mu, log_sigma) node ids.
    pub fn encode_step_tape(
        &self,
        tape: &mut Tape,
        psi: &ParamVars,
        hidden: VarId,
        obs: VarId,
        prev_action: VarId,
        reward: VarId,
    ) -> (VarId, VarId, VarId) {
        let ou = tape.concat_cols(obs, prev_action);
        let x = tape.concat_cols(ou, reward);
        let f = self.feat.forward(tape, psi, x);
        let f = tape.relu(f);
        let h = self.gru.step(tape, psi, f, hidden);
        let mu = self.mu_head.forward(tape, psi, h);
        let ls = self.logsig_head.forward(tape, psi, h);
        let ls = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        (h, mu, ls)
    }

    /// Inference-time encoder step (no gradients). `reward` is a Nx1 column.
    pub fn encode_step(
        &self,
        psi: &ParamSet,
        hidden: &RecurrentState,
        obs: &Array2<f64>,
        prev_action: &Array2<f64>,
        reward: &Array2<f64>,
    ) -> Result<(RecurrentState, Array2<f64>, Array2<f64>)> {
        if obs.ncols() != self.cfg.obs_dim
            || prev_action.ncols() != self.cfg.n_actions
            || reward.ncols() != 1
            || hidden.width() != self.cfg.hidden
        {
            return Err(FamError::Input("encoder input widths mismatch".into()));
        }
        let mut tape = Tape::new();
        let vars = psi.constants(&mut tape);
        let h = tape.constant(hidden.hidden.clone());
        let o = tape.constant(obs.clone());
        let a = tape.constant(prev_action.clone());
        let r = tape.constant(reward.clone());
        let (h2, mu, ls) = self.encode_step_tape(&mut tape, &vars, h, o, a, r);
        Ok((
            RecurrentState {
                hidden: tape.value(h2).clone(),
                step: hidden.step + 1,
            },
            tape.value(mu).clone(),
            tape.value(ls).clone(),
        ))
    }

    /// Predict the next observation from (o_t, u_t, z_t).
    pub fn decode_obs(
        &self,
        phi: &ParamSet,
        obs: &Array2<f64>,
        action: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.dec_obs.apply(phi, &self.decoder_input(obs, action, z))
    }

    /// Predict the next reward from (o_t, u_t, z_t).
    pub fn decode_rew(
        &self,
        varphi: &ParamSet,
        obs: &Array2<f64>,
        action: &Array2<f64>,
        z: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.dec_rew
            .apply(varphi, &self.decoder_input(obs, action, z))
    }

    fn decoder_input(&self, obs: &Array2<f64>, action: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
        if self.cfg.decoder_input_oa {
            ndarray::concatenate![Axis(1), obs.view(), action.view(), z.view()]
        } else {
            z.clone()
        }
    }

    fn decoder_input_tape(
        &self,
        tape: &mut Tape,
        obs: VarId,
        action: VarId,
        z: VarId,
    ) -> VarId {
        if self.cfg.decoder_input_oa {
            let oa = tape.concat_cols(obs, action);
            tape.concat_cols(oa, z)
        } else {
            z
        }
    }

    /// Full loss over a batch of aligned episodes, recorded on `tape` with
    /// psi/phi/varphi registered as differentiable leaves.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        params: &FbiParams,
        batch: &FbiBatch,
        eps: &[Array2<f64>],
    ) -> Result<FbiLossNodes> {
        batch.check(&self.cfg)?;
        let n_ep = batch.episodes.len();
        let t_len = batch.episodes[0].len();
        if eps.len() != t_len {
            return Err(FamError::Input("one noise draw per timestep".into()));
        }

        let psi = params.psi.leaves(tape);
        let phi = params.phi.leaves(tape);
        let varphi = params.varphi.leaves(tape);

        let mut h = tape.constant(Array2::zeros((n_ep, self.cfg.hidden)));
        let mut mus = Vec::with_capacity(t_len);
        let mut log_sigmas = Vec::with_capacity(t_len);
        let mut dec_ins = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let obs = tape.constant(batch.rows(t, |e| &e.obs));
            let prev_a = tape.constant(batch.rows(t, |e| &e.prev_action));
            let rew_in = tape.constant(batch.rows(t, |e| &e.reward_in));
            let (h2, mu, ls) = self.encode_step_tape(tape, &psi, h, obs, prev_a, rew_in);
            h = h2;
            // reparameterized sample
            let sigma = tape.exp(ls);
            let e = tape.constant(eps[t].clone());
            let noise = tape.mul(sigma, e);
            let z = tape.add(mu, noise);
            let act = tape.constant(batch.rows(t, |e| &e.action));
            dec_ins.push(self.decoder_input_tape(tape, obs, act, z));
            mus.push(mu);
            log_sigmas.push(ls);
        }

        let n_total = (n_ep * t_len) as f64;
        let dec_in = tape.concat_rows(&dec_ins);
        let mu_all = tape.concat_rows(&mus);
        let ls_all = tape.concat_rows(&log_sigmas);

        // mean over transitions of the summed squared observation error
        let recon_obs = if self.cfg.recon_obs {
            let pred = self.dec_obs.forward(tape, &phi, dec_in);
            let target = tape.constant(batch.stacked(|e| &e.next_obs));
            let diff = tape.sub(pred, target);
            let sq = tape.square(diff);
            let s = tape.sum_all(sq);
            Some(tape.scale(s, 1.0 / n_total))
        } else {
            None
        };
        let recon_rew = if self.cfg.recon_rew {
            let pred = self.dec_rew.forward(tape, &varphi, dec_in);
            let target = tape.constant(batch.stacked(|e| &e.reward_target));
            let diff = tape.sub(pred, target);
            let sq = tape.square(diff);
            let s = tape.sum_all(sq);
            Some(tape.scale(s, 1.0 / n_total))
        } else {
            None
        };

        // KL(q || N(0, I)) = -1/2 sum(1 + 2 log sigma - mu^2 - sigma^2)
        let two_ls = tape.scale(ls_all, 2.0);
        let sig2 = tape.exp(two_ls);
        let mu2 = tape.square(mu_all);
        let t1 = tape.add_scalar(two_ls, 1.0);
        let t2 = tape.sub(t1, mu2);
        let t3 = tape.sub(t2, sig2);
        let ksum = tape.sum_all(t3);
        let kl = tape.scale(ksum, -0.5 / n_total);

        let mut loss = tape.scale(kl, params.beta);
        if let Some(ro) = recon_obs {
            loss = tape.add(loss, ro);
        }
        if let Some(rr) = recon_rew {
            loss = tape.add(loss, rr);
        }

        Ok(FbiLossNodes {
            loss,
            recon_obs,
            recon_rew,
            kl,
            psi,
            phi,
            varphi,
        })
    }

    /// Loss value and per-component means for a batch (no gradients kept).
    pub fn loss(
        &self,
        params: &FbiParams,
        batch: &FbiBatch,
        eps: &[Array2<f64>],
    ) -> Result<(f64, FbiLossComponents)> {
        let mut tape = Tape::new();
        let nodes = self.loss_tape(&mut tape, params, batch, eps)?;
        Ok((tape.scalar(nodes.loss), nodes.components(&tape)))
    }
}

/// Tape node ids for the FBI loss and its parts.
pub struct FbiLossNodes {
    pub loss: VarId,
    pub recon_obs: Option<VarId>,
    pub recon_rew: Option<VarId>,
    pub kl: VarId,
    pub psi: ParamVars,
    pub phi: ParamVars,
    pub varphi: ParamVars,
}

impl FbiLossNodes {
    pub fn components(&self, tape: &Tape) -> FbiLossComponents {
        FbiLossComponents {
            recon_obs: self.recon_obs.map(|id| tape.scalar(id)),
            recon_rew: self.recon_rew.map(|id| tape.scalar(id)),
            kl: tape.scalar(self.kl),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbiLossComponents {
    pub recon_obs: Option<f64>,
    pub recon_rew: Option<f64>,
    pub kl: f64,
}

/// Aligned training sequences for the FBI loss. All episodes share one length.
#[derive(Debug, Clone, Default)]
pub struct FbiBatch {
    pub episodes: Vec<FbiEpisode>,
}

/// One episode of encoder inputs and decoder targets, time-major.
#[derive(Debug, Clone)]
pub struct FbiEpisode {
    /// o_t
    pub obs: Array2<f64>,
    /// one-hot u_{t-1}, zeros at t = 0
    pub prev_action: Array2<f64>,
    /// r_t column, zero at t = 0
    pub reward_in: Array2<f64>,
    /// one-hot u_t
    pub action: Array2<f64>,
    /// o_{t+1}
    pub next_obs: Array2<f64>,
    /// r_{t+1} column
    pub reward_target: Array2<f64>,
}

impl FbiEpisode {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }
}

impl FbiBatch {
    fn check(&self, cfg: &FbiConfig) -> Result<()> {
        if self.episodes.is_empty() || self.episodes[0].is_empty() {
            return Err(FamError::Input("empty fbi batch".into()));
        }
        let t_len = self.episodes[0].len();
        for e in &self.episodes {
            if e.len() != t_len
                || e.obs.ncols() != cfg.obs_dim
                || e.prev_action.ncols() != cfg.n_actions
                || e.action.ncols() != cfg.n_actions
                || e.next_obs.ncols() != cfg.obs_dim
                || e.reward_in.ncols() != 1
                || e.reward_target.ncols() != 1
            {
                return Err(FamError::Input("misaligned fbi episode".into()));
            }
        }
        Ok(())
    }

    /// Rows of one field at time t across episodes.
    fn rows<F>(&self, t: usize, f: F) -> Array2<f64>
    where
        F: Fn(&FbiEpisode) -> &Array2<f64>,
    {
        let views: Vec<_> = self
            .episodes
            .iter()
            .map(|e| f(e).slice(ndarray::s![t..t + 1, ..]))
            .collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    }

    /// All timesteps of one field, episode blocks ordered t-major to match
    /// `concat_rows` of per-step batches.
    fn stacked<F>(&self, f: F) -> Array2<f64>
    where
        F: Fn(&FbiEpisode) -> &Array2<f64>,
    {
        let t_len = self.episodes[0].len();
        let mut views = Vec::with_capacity(t_len * self.episodes.len());
        for t in 0..t_len {
            for e in &self.episodes {
                views.push(f(e).slice(ndarray::s![t..t + 1, ..]));
            }
        }
        ndarray::concatenate(Axis(0), &views).unwrap()
    }
}

/// Reparameterized draw: z = mu + exp(log_sigma) * eps.
pub fn sample_latent(mu: &Array2<f64>, log_sigma: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    mu + &(log_sigma.mapv(f64::exp) * eps)
}

/// Standard-normal noise with the same shape as a posterior batch.
pub fn draw_eps<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut e = Array2::zeros((rows, cols));
    e.mapv_inplace(|_: f64| rng.sample(StandardNormal));
    e
}

/// Closed-form KL(N(mu, sigma) || N(0, I)), summed over dimensions and
/// averaged over rows.
pub fn kl_to_standard_normal(mu: &Array2<f64>, log_sigma: &Array2<f64>) -> f64 {
    let n = mu.nrows() as f64;
    let mut total = 0.0;
    for (m, ls) in mu.iter().zip(log_sigma.iter()) {
        let s2 = (2.0 * ls).exp();
        total += -0.5 * (1.0 + 2.0 * ls - m * m - s2);
    }
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> FbiConfig {
        FbiConfig {
            obs_dim: 3,
            n_actions: 5,
            latent_dim: 2,
            hidden: 4,
            beta: 0.001,
            decoder_input_oa: true,
            recon_obs: true,
            recon_rew: true,
        }
    }

    fn zeroed(params: &mut ParamSet) {
        for (_, a) in params.iter_mut() {
            a.fill(0.0);
        }
    }

    #[test]
    fn zero_params_give_zero_posterior() {
        let fbi = Fbi::new(tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = fbi.init(&mut rng);
        zeroed(&mut p.psi);
        let h = RecurrentState::zeros(1, 4);
        let (h2, mu, ls) = fbi
            .encode_step(&p.psi, &h, &array![[1.0, 2.0, 3.0]], &Array2::zeros((1, 5)), &array![[0.5]])
            .unwrap();
        assert_eq!(mu, Array2::<f64>::zeros((1, 2)));
        assert_eq!(ls, Array2::<f64>::zeros((1, 2)));
        assert_eq!(h2.hidden, Array2::<f64>::zeros((1, 4)));
    }

    #[test]
    fn encoder_is_deterministic_over_history() {
        let fbi = Fbi::new(tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = fbi.init(&mut rng);
        let run = || {
            let mut h = RecurrentState::zeros(1, 4);
            let mut out = Vec::new();
            for t in 0..3 {
                let obs = array![[t as f64, 1.0, -1.0]];
                let mut act = Array2::zeros((1, 5));
                if t > 0 {
                    act[[0, t % 5]] = 1.0;
                }
                let r = array![[t as f64 * 0.1]];
                let (h2, mu, ls) = fbi.encode_step(&p.psi, &h, &obs, &act, &r).unwrap();
                h = h2;
                out.push((mu, ls));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_matches_primitive_composition_oracle() {
        // compose the mlp and gru primitives step by step
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = fbi.init(&mut rng);

        let feat = Mlp::new("feat", &[cfg.encoder_in(), cfg.hidden], 1.0);
        let gru = Gru::new("gru", cfg.hidden, cfg.hidden);
        let mu_head = Mlp::new("mu", &[cfg.hidden, cfg.latent_dim], 1.0);
        let ls_head = Mlp::new("logsig", &[cfg.hidden, cfg.latent_dim], 1.0);

        let mut h = RecurrentState::zeros(1, cfg.hidden);
        let mut h_oracle = RecurrentState::zeros(1, cfg.hidden);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        for t in 0..3 {
            let obs = draw_eps(&mut rng2, 1, 3);
            let mut act = Array2::zeros((1, 5));
            act[[0, t % 5]] = 1.0;
            let r = array![[0.3 * t as f64]];

            let (h2, mu, ls) = fbi.encode_step(&p.psi, &h, &obs, &act, &r).unwrap();

            let input = ndarray::concatenate![Axis(1), obs.view(), act.view(), r.view()];
            let f = feat.apply(&p.psi, &input).unwrap().mapv(|v| v.max(0.0));
            h_oracle = gru.apply(&p.psi, &h_oracle, &f).unwrap();
            let mu_expect = mu_head.apply(&p.psi, &h_oracle.hidden).unwrap();
            let ls_expect = ls_head
                .apply(&p.psi, &h_oracle.hidden)
                .unwrap()
                .mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));

            for (a, b) in mu.iter().zip(mu_expect.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            for (a, b) in ls.iter().zip(ls_expect.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            h = h2;
        }
    }

    #[test]
    fn sample_latent_identities() {
        let mu = array![[0.3, -0.7]];
        let ls = array![[0.0, 0.0]];
        assert_eq!(sample_latent(&mu, &ls, &Array2::zeros((1, 2))), mu);
        let e = array![[1.5, -0.5]];
        assert_eq!(sample_latent(&mu, &ls, &e), &mu + &e);
    }

    #[test]
    fn sample_latent_moments() {
        let mu = array![[0.5, -1.0]];
        let ls = array![[0.2, -0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for _ in 0..n {
            let e = draw_eps(&mut rng, 1, 2);
            let z = sample_latent(&mu, &ls, &e);
            for j in 0..2 {
                sum[j] += z[[0, j]];
                sumsq[j] += z[[0, j]] * z[[0, j]];
            }
        }
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let std = (sumsq[j] / n as f64 - mean * mean).sqrt();
            let sigma = ls[[0, j]].exp();
            let se_mean = sigma / (n as f64).sqrt();
            assert!((mean - mu[[0, j]]).abs() < 3.0 * se_mean);
            let se_std = sigma / (2.0 * n as f64).sqrt();
            assert!((std - sigma).abs() < 3.0 * se_std);
        }
    }

    #[test]
    fn decoders_zero_params_and_oracle() {
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = fbi.init(&mut rng);

        let obs = array![[0.1, 0.2, 0.3]];
        let act = array![[0.0, 1.0, 0.0, 0.0, 0.0]];
        let z = array![[0.4, -0.4]];

        // random params match the generic mlp oracle
        let dec = Mlp::new("dec", &[cfg.decoder_in(), cfg.hidden, cfg.hidden, cfg.obs_dim], 1.0);
        let input = ndarray::concatenate![Axis(1), obs.view(), act.view(), z.view()];
        let expect = dec.apply(&p.phi, &input).unwrap();
        assert_eq!(fbi.decode_obs(&p.phi, &obs, &act, &z).unwrap(), expect);

        zeroed(&mut p.phi);
        zeroed(&mut p.varphi);
        assert_eq!(
            fbi.decode_obs(&p.phi, &obs, &act, &z).unwrap(),
            Array2::<f64>::zeros((1, 3))
        );
        assert_eq!(
            fbi.decode_rew(&p.varphi, &obs, &act, &z).unwrap(),
            Array2::<f64>::zeros((1, 1))
        );
    }

    #[test]
    fn kl_values() {
        assert_abs_diff_eq!(
            kl_to_standard_normal(&Array2::zeros((1, 3)), &Array2::zeros((1, 3))),
            0.0
        );
        // d = 1, mu = 1, sigma = 1 -> 1/2 mu^2
        assert_abs_diff_eq!(
            kl_to_standard_normal(&array![[1.0]], &array![[0.0]]),
            0.5,
            epsilon = 1e-12
        );
        // d = 1, mu = 0, sigma^2 = 2 -> (2 - 1 - ln 2) / 2
        let ls = 0.5 * 2.0f64.ln();
        assert_abs_diff_eq!(
            kl_to_standard_normal(&array![[0.0]], &array![[ls]]),
            0.5 * (2.0 - 1.0 - 2.0f64.ln()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let mu = draw_eps(&mut rng, 1, 5) * 3.0;
            let ls = draw_eps(&mut rng, 1, 5);
            assert!(kl_to_standard_normal(&mu, &ls) >= 0.0);
        }
    }

    fn toy_batch(cfg: &FbiConfig, seed: u64, t_len: usize, n_ep: usize) -> FbiBatch {
        fn onehot<R: Rng>(rng: &mut R, t_len: usize, n_actions: usize) -> Array2<f64> {
            let mut a = Array2::zeros((t_len, n_actions));
            for t in 0..t_len {
                a[[t, rng.gen_range(0..n_actions)]] = 1.0;
            }
            a
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let episodes = (0..n_ep)
            .map(|_| FbiEpisode {
                obs: draw_eps(&mut rng, t_len, cfg.obs_dim),
                prev_action: onehot(&mut rng, t_len, cfg.n_actions),
                reward_in: draw_eps(&mut rng, t_len, 1),
                action: onehot(&mut rng, t_len, cfg.n_actions),
                next_obs: draw_eps(&mut rng, t_len, cfg.obs_dim),
                reward_target: draw_eps(&mut rng, t_len, 1),
            })
            .collect();
        FbiBatch { episodes }
    }

    #[test]
    fn loss_zero_for_perfect_reconstruction_at_prior() {
        // zero params: predictions 0, posterior = prior; zero targets -> loss 0
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = fbi.init(&mut rng);
        zeroed(&mut p.psi);
        zeroed(&mut p.phi);
        zeroed(&mut p.varphi);
        let t_len = 2;
        let batch = FbiBatch {
            episodes: vec![FbiEpisode {
                obs: Array2::zeros((t_len, 3)),
                prev_action: Array2::zeros((t_len, 5)),
                reward_in: Array2::zeros((t_len, 1)),
                action: Array2::zeros((t_len, 5)),
                next_obs: Array2::zeros((t_len, 3)),
                reward_target: Array2::zeros((t_len, 1)),
            }],
        };
        let eps = vec![Array2::zeros((1, 2)); t_len];
        let (loss, c) = fbi.loss(&p, &batch, &eps).unwrap();
        assert_abs_diff_eq!(loss, 0.0);
        assert_abs_diff_eq!(c.kl, 0.0);
    }

    #[test]
    fn loss_beta_zero_equals_recon_sum() {
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = fbi.init(&mut rng);
        p.beta = 0.0;
        let batch = toy_batch(&cfg, 1, 3, 2);
        let eps: Vec<_> = (0..3).map(|_| draw_eps(&mut rng, 2, 2)).collect();
        let (loss, c) = fbi.loss(&p, &batch, &eps).unwrap();
        assert_abs_diff_eq!(
            loss,
            c.recon_obs.unwrap() + c.recon_rew.unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_matches_hand_computed_oracle() {
        // independent arithmetic evaluation over a 2-transition batch
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = fbi.init(&mut rng);
        p.beta = 0.01;
        let batch = toy_batch(&cfg, 2, 2, 1);
        let eps: Vec<_> = (0..2).map(|_| draw_eps(&mut rng, 1, 2)).collect();

        let mut h = RecurrentState::zeros(1, cfg.hidden);
        let mut expect = 0.0;
        let ep = &batch.episodes[0];
        for t in 0..2 {
            let obs = ep.obs.slice(ndarray::s![t..t + 1, ..]).to_owned();
            let pa = ep.prev_action.slice(ndarray::s![t..t + 1, ..]).to_owned();
            let ri = ep.reward_in.slice(ndarray::s![t..t + 1, ..]).to_owned();
            let (h2, mu, ls) = fbi.encode_step(&p.psi, &h, &obs, &pa, &ri).unwrap();
            h = h2;
            let z = sample_latent(&mu, &ls, &eps[t]);
            let act = ep.action.slice(ndarray::s![t..t + 1, ..]).to_owned();
            let o_hat = fbi.decode_obs(&p.phi, &obs, &act, &z).unwrap();
            let r_hat = fbi.decode_rew(&p.varphi, &obs, &act, &z).unwrap();
            let o_next = ep.next_obs.slice(ndarray::s![t..t + 1, ..]);
            let r_next = ep.reward_target[[t, 0]];
            let ro: f64 = o_hat
                .iter()
                .zip(o_next.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let rr = (r_hat[[0, 0]] - r_next).powi(2);
            // per-transition KL, averaged at the end via the 1/2 factor below
            let mut kl = 0.0;
            for j in 0..2 {
                let (m, l) = (mu[[0, j]], ls[[0, j]]);
                kl += -0.5 * (1.0 + 2.0 * l - m * m - (2.0 * l).exp());
            }
            expect += (ro + rr + p.beta * kl) / 2.0;
        }

        let (loss, _) = fbi.loss(&p, &batch, &eps).unwrap();
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-10);
    }

    #[test]
    fn loss_invariant_to_episode_order() {
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = fbi.init(&mut rng);
        let batch = toy_batch(&cfg, 3, 2, 3);
        let eps: Vec<_> = (0..2).map(|_| draw_eps(&mut rng, 3, 2)).collect();
        let (loss, _) = fbi.loss(&p, &batch, &eps).unwrap();

        let mut swapped = batch.clone();
        swapped.episodes.swap(0, 2);
        let eps_swapped: Vec<_> = eps
            .iter()
            .map(|e| {
                let mut e2 = e.clone();
                let top = e2.row(0).to_owned();
                let bot = e2.row(2).to_owned();
                e2.row_mut(0).assign(&bot);
                e2.row_mut(2).assign(&top);
                e2
            })
            .collect();
        let (loss2, _) = fbi.loss(&p, &swapped, &eps_swapped).unwrap();
        assert_abs_diff_eq!(loss, loss2, epsilon = 1e-12);
    }

    #[test]
    fn encoder_is_causal() {
        // posterior at step t ignores inputs after t
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = fbi.init(&mut rng);
        let batch = toy_batch(&cfg, 4, 3, 1);
        let mut altered = batch.clone();
        altered.episodes[0].obs.row_mut(2).fill(9.0);
        altered.episodes[0].reward_in.row_mut(2).fill(-9.0);

        let prefix_posteriors = |b: &FbiBatch| {
            let ep = &b.episodes[0];
            let mut h = RecurrentState::zeros(1, cfg.hidden);
            let mut out = Vec::new();
            for t in 0..2 {
                let obs = ep.obs.slice(ndarray::s![t..t + 1, ..]).to_owned();
                let pa = ep.prev_action.slice(ndarray::s![t..t + 1, ..]).to_owned();
                let ri = ep.reward_in.slice(ndarray::s![t..t + 1, ..]).to_owned();
                let (h2, mu, ls) = fbi.encode_step(&p.psi, &h, &obs, &pa, &ri).unwrap();
                h = h2;
                out.push((mu, ls));
            }
            out
        };
        assert_eq!(prefix_posteriors(&batch), prefix_posteriors(&altered));
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = fbi.init(&mut rng);
        assert!(fbi.loss(&p, &FbiBatch::default(), &[]).is_err());
    }

    #[test]
    fn loss_descends_under_training() {
        use crate::nn::{compute_gradients, Adam};
        let cfg = tiny_cfg();
        let fbi = Fbi::new(cfg.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = fbi.init(&mut rng);
        let batch = toy_batch(&cfg, 5, 4, 3);
        let eps: Vec<_> = (0..4).map(|_| Array2::zeros((3, 2))).collect();

        let mut opt_psi = Adam::new(&p.psi, 1e-2);
        let mut opt_phi = Adam::new(&p.phi, 1e-2);
        let mut opt_varphi = Adam::new(&p.varphi, 1e-2);
        let (initial, _) = fbi.loss(&p, &batch, &eps).unwrap();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let nodes = fbi.loss_tape(&mut tape, &p, &batch, &eps).unwrap();
            let g_psi = compute_gradients(&tape, nodes.loss, &nodes.psi).unwrap();
            let g_phi = compute_gradients(&tape, nodes.loss, &nodes.phi).unwrap();
            let g_varphi = compute_gradients(&tape, nodes.loss, &nodes.varphi).unwrap();
            opt_psi.step(&mut p.psi, &g_psi).unwrap();
            opt_phi.step(&mut p.phi, &g_phi).unwrap();
            opt_varphi.step(&mut p.varphi, &g_varphi).unwrap();
        }
        let (trained, _) = fbi.loss(&p, &batch, &eps).unwrap();
        assert!(
            trained < initial,
            "loss should decrease: {initial} -> {trained}"
        );
    }
}
