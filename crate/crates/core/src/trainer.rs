//! Training loop, critic-trusted inference and evaluation.
//!
//! Each step every actor advances its own noisy session and pushes the
//! transition into the shared buffer. One minibatch then drives the critic
//! update, every actor's quantile loss, the click supervision and the
//! diversity term; each actor takes one Adam step on its share of the joint
//! loss and all target networks are soft-updated. Every `eval_interval`
//! steps the greedy population is evaluated and the bandit re-draws the
//! regularizer weights.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bandit::{Arm, BanditState, BetaParams};
use crate::critic::{sample_taus, CriticBatch, CriticConfig, CriticKind, CriticNet, DEFAULT_KAPPA};
use crate::env::{Environment, SessionConfig, SessionState};
use crate::metrics;
use crate::nn::{Matrix, ParamSet};
use crate::population::{
    actor_loss_on_actions, behavior_embedding_from_actions, diversity_loss, embedding_grad_to_actions,
    supervision_loss_on_actions, total_loss, top_n, Actor, Grouping, Population, PopulationConfig,
};
use crate::replay::{ReplayBuffer, Transition, DEFAULT_CAPACITY};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Parameters of the synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    pub heterogeneity: f64,
    pub seed: u64,
    pub session: SessionConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            dim: 8,
            heterogeneity: 1.0,
            seed: 0,
            session: SessionConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Environment> {
        Environment::synthetic(self.seed, self.users, self.items, self.dim, self.heterogeneity, self.session)
    }
}

/// Experiment variants beyond full UOEP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    DetCritic,
    NoDiv,
    NoSta,
    /// Both regularizers removed.
    NoReg,
    Disjoint,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::DetCritic => "det-critic",
            Ablation::NoDiv => "no-div",
            Ablation::NoSta => "no-sta",
            Ablation::NoReg => "no-div+no-sta",
            Ablation::Disjoint => "disjoint",
        }
    }

    /// Parses a `+`/`,`-separated flag list. Only `no-div` and `no-sta` may
    /// be combined.
    pub fn parse(text: &str) -> Result<Option<Self>> {
        let mut flags: Vec<&str> = text
            .split(['+', ','])
            .map(str::trim)
            .filter(|s| !s.is_empty() && *s != "none")
            .collect();
        flags.sort_unstable();
        flags.dedup();
        let known = ["det-critic", "disjoint", "no-div", "no-sta"];
        if let Some(bad) = flags.iter().find(|f| !known.contains(f)) {
            return Err(Error::InvalidConfig(format!("unknown ablation flag {bad:?}")));
        }
        match flags.as_slice() {
            [] => Ok(None),
            ["det-critic"] => Ok(Some(Ablation::DetCritic)),
            ["disjoint"] => Ok(Some(Ablation::Disjoint)),
            ["no-div"] => Ok(Some(Ablation::NoDiv)),
            ["no-sta"] => Ok(Some(Ablation::NoSta)),
            ["no-div", "no-sta"] => Ok(Some(Ablation::NoReg)),
            _ => Err(Error::InvalidConfig(format!("conflicting ablation flags: {}", flags.join(", ")))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub n_quantiles: usize,
    pub n_target_quantiles: usize,
    /// τ draws per state for the actor losses.
    pub k_cvar: usize,
    /// τ draws for the expectation that picks the serving actor.
    pub k_infer: usize,
    pub kappa: f64,
    pub mu: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub beta: f64,
    /// Quantile decay horizon; half of `total_steps` when unset.
    pub horizon: Option<u64>,
    pub length_scale: f64,
    pub jitter: f64,
    pub noise: f64,
    pub lambda: f64,
    pub bandit_window: usize,
    pub replay_capacity: usize,
    pub deterministic_critic: bool,
    pub no_div: bool,
    pub no_sta: bool,
    pub grouping: Grouping,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            batch_size: 64,
            gamma: 0.9,
            n_quantiles: 32,
            n_target_quantiles: 32,
            k_cvar: 8,
            k_infer: 32,
            kappa: DEFAULT_KAPPA,
            mu: 0.01,
            actor_lr: 5e-4,
            critic_lr: 1e-3,
            critic_hidden: vec![256, 64],
            actor_hidden: vec![64, 32],
            eval_interval: 500,
            eval_episodes: 50,
            seed: 0,
            alphas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            beta: 0.5,
            horizon: None,
            length_scale: 1.0,
            jitter: 1e-4,
            noise: 0.1,
            lambda: 16.0,
            bandit_window: 10,
            replay_capacity: DEFAULT_CAPACITY,
            deterministic_critic: false,
            no_div: false,
            no_sta: false,
            grouping: Grouping::Nested,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_quantiles", self.n_quantiles),
            ("n_target_quantiles", self.n_target_quantiles),
            ("k_cvar", self.k_cvar),
            ("k_infer", self.k_infer),
            ("eval_episodes", self.eval_episodes),
            ("bandit_window", self.bandit_window),
            ("replay_capacity", self.replay_capacity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::InvalidConfig(format!("mu {} outside (0, 1]", self.mu)));
        }
        if !(self.noise >= 0.0) || !(self.lambda >= 0.0) || !(self.kappa > 0.0) {
            return Err(Error::InvalidConfig("noise and lambda must be >= 0, kappa > 0".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::InvalidConfig("replay capacity smaller than the batch".into()));
        }
        self.population_config().validate()
    }

    /// The single-actor DDPG-style baseline: one actor at α = 1, scalar
    /// critic, no regularizers.
    pub fn baseline(&self) -> Self {
        Self {
            alphas: vec![1.0],
            deterministic_critic: true,
            no_div: true,
            no_sta: true,
            ..self.clone()
        }
    }

    pub fn with_ablation(&self, ablation: Option<Ablation>) -> Self {
        let mut c = self.clone();
        match ablation {
            None => {}
            Some(Ablation::DetCritic) => c.deterministic_critic = true,
            Some(Ablation::NoDiv) => c.no_div = true,
            Some(Ablation::NoSta) => c.no_sta = true,
            Some(Ablation::NoReg) => {
                c.no_div = true;
                c.no_sta = true;
            }
            Some(Ablation::Disjoint) => c.grouping = Grouping::Disjoint,
        }
        c
    }

    pub fn with_population_size(&self, m: usize) -> Self {
        Self {
            alphas: PopulationConfig::even_alphas(m),
            ..self.clone()
        }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon.unwrap_or((self.total_steps / 2).max(1))
    }

    /// The bandit runs only when both regularizers are available and there is
    /// more than one actor to diversify.
    pub fn bandit_enabled(&self) -> bool {
        !self.no_div && !self.no_sta && self.alphas.len() > 1
    }

    /// `(λ1, λ2)` when the bandit is off.
    pub fn fixed_weights(&self) -> (f64, f64) {
        let div = if self.alphas.len() > 1 { self.lambda } else { 0.0 };
        match (self.no_sta, self.no_div) {
            (true, true) => (0.0, 0.0),
            (false, true) => (self.lambda, 0.0),
            (true, false) => (0.0, div),
            (false, false) => (self.lambda, div),
        }
    }

    pub fn population_config(&self) -> PopulationConfig {
        PopulationConfig {
            alphas: self.alphas.clone(),
            beta: self.beta,
            horizon: self.horizon(),
            length_scale: self.length_scale,
            jitter: self.jitter,
            grouping: self.grouping,
            hidden: self.actor_hidden.clone(),
            learning_rate: self.actor_lr,
            seed: self.seed ^ 0xA5A5_0000,
        }
    }

    pub fn critic_config(&self, state_dim: usize, action_dim: usize) -> CriticConfig {
        CriticConfig {
            state_dim,
            action_dim,
            trunk_hidden: self.critic_hidden.clone(),
            feature_dim: 16,
            head_hidden: 32,
            kind: if self.deterministic_critic {
                CriticKind::Deterministic
            } else {
                CriticKind::Distributional
            },
            learning_rate: self.critic_lr,
            seed: self.seed ^ 0x5A5A_0000,
        }
    }
}

/// Outcome of one greedy evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    pub total_rewards: Vec<f64>,
    pub depths: Vec<usize>,
    /// Every list shown, in episode order.
    pub exposed: Vec<Vec<usize>>,
    /// How often each actor was chosen to serve.
    pub actor_choices: Vec<usize>,
}

impl EvalReport {
    pub fn mean_reward(&self) -> f64 {
        metrics::mean(&self.total_rewards).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditSnapshot {
    pub stability: BetaParams,
    pub diversity: BetaParams,
}

/// One line of `metrics.jsonl`. Field set is fixed; absent values are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub per_actor_mean_return: Vec<Option<f64>>,
    pub total_reward_mean: Option<f64>,
    pub total_reward_std: Option<f64>,
    pub depth_mean: Option<f64>,
    pub cvar_0_3: Option<f64>,
    pub cvar_0_4: Option<f64>,
    pub atr_0_4: Option<f64>,
    pub gini: Option<f64>,
    pub coverage: Option<f64>,
    pub ils: Option<f64>,
    pub actor_choices: Vec<usize>,
    pub bandit: Option<BanditSnapshot>,
    pub arm: Option<Arm>,
    pub lambda: [f64; 2],
    pub alphas: Vec<f64>,
    pub critic_loss: Option<f64>,
    pub diversity_skips: u64,
}

fn finite(v: Result<f64>) -> Option<f64> {
    v.ok().filter(|x| x.is_finite())
}

impl MetricsRecord {
    pub fn from_report(report: &EvalReport, catalog_size: usize, categories: &[usize]) -> Self {
        let r = &report.total_rewards;
        let depths: Vec<f64> = report.depths.iter().map(|&d| d as f64).collect();
        Self {
            step: report.step,
            per_actor_mean_return: vec![None; report.actor_choices.len()],
            total_reward_mean: finite(metrics::mean(r)),
            total_reward_std: finite(metrics::std_dev(r)),
            depth_mean: finite(metrics::mean(&depths)),
            cvar_0_3: finite(metrics::empirical_cvar(r, 0.3)),
            cvar_0_4: finite(metrics::empirical_cvar(r, 0.4)),
            atr_0_4: finite(metrics::atr_top(r, 0.4)),
            gini: finite(metrics::gini(r)),
            coverage: finite(metrics::coverage(&report.exposed, catalog_size)),
            ils: finite(metrics::mean_ils(&report.exposed, categories)),
            actor_choices: report.actor_choices.clone(),
            bandit: None,
            arm: None,
            lambda: [0.0, 0.0],
            alphas: Vec::new(),
            critic_loss: None,
            diversity_skips: 0,
        }
    }
}

/// Index of the serving actor, its action and its list.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub actor: usize,
    pub action: Vec<f64>,
    pub list: Vec<usize>,
}

/// Each actor proposes an action; the one with the largest expected return
/// under the critic serves. All actors are scored on the same τ draws and
/// ties go to the lowest index.
pub fn infer_action<R: Rng + ?Sized>(
    population: &Population,
    critic: &CriticNet,
    env: &Environment,
    state: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Inference> {
    let list_size = env.session_config().list_size;
    let states = Matrix::from_row(state);
    let actions: Vec<Vec<f64>> = population
        .actors()
        .iter()
        .map(|a| Ok(a.actions(&states)?.into_data()))
        .collect::<Result<_>>()?;
    let best = if actions.len() == 1 {
        0
    } else {
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        let taus = sample_taus(1, k, 0.0, 1.0, rng);
        let batch_states = Matrix::from_rows(&vec![state; actions.len()])?;
        let batch_actions = Matrix::from_rows(&actions)?;
        let batch_taus = Matrix::from_rows(&vec![taus.row(0); actions.len()])?;
        let z = critic.quantiles_batch(critic.online(), &batch_states, &batch_actions, &batch_taus)?;
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for i in 0..actions.len() {
            let q = z.row(i).iter().sum::<f64>() / k as f64;
            if q > best_value {
                best = i;
                best_value = q;
            }
        }
        best
    };
    let list = top_n(&env.catalog().scores(&actions[best]), list_size);
    Ok(Inference {
        actor: best,
        action: actions[best].clone(),
        list,
    })
}

fn episode_rng(seed: u64, episode: usize) -> rng::Rng {
    rng::stream(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(episode as u64), streams::EVAL)
}

/// Runs `episodes` greedy sessions. Episode `e` draws its user, its τ samples
/// and its clicks from a stream derived from `(seed, e)` only.
pub fn evaluate(
    population: &Population,
    critic: &CriticNet,
    env: &Environment,
    episodes: usize,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let mut report = EvalReport {
        step: 0,
        total_rewards: Vec::with_capacity(episodes),
        depths: Vec::with_capacity(episodes),
        exposed: Vec::new(),
        actor_choices: vec![0; population.len()],
    };
    for e in 0..episodes {
        let mut rng = episode_rng(seed, e);
        let mut session = env.sample_session(&mut rng);
        let mut total = 0.0;
        while !session.done {
            let state = env.encode_state(&session);
            let choice = infer_action(population, critic, env, &state, k, &mut rng)?;
            report.actor_choices[choice.actor] += 1;
            let outcome = env.respond(&session, &choice.list, &mut rng)?;
            total += outcome.reward;
            report.exposed.push(outcome.exposed);
            session = outcome.next;
        }
        report.total_rewards.push(total);
        report.depths.push(session.depth);
    }
    Ok(report)
}

struct Rollout {
    session: SessionState,
    return_so_far: f64,
}

/// Diagnostics the trainer accumulates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub updates: u64,
    pub diversity_skips: u64,
    pub target_checks: u64,
    pub last_critic_loss: Option<f64>,
    pub last_total_loss: Option<f64>,
}

pub struct Trainer {
    config: TrainConfig,
    env: Environment,
    population: Population,
    critic: CriticNet,
    buffer: ReplayBuffer,
    bandit: Option<BanditState>,
    weights: (f64, f64),
    step: u64,
    rollouts: Vec<Option<Rollout>>,
    completed: Vec<Vec<f64>>,
    rollout_rng: rng::Rng,
    noise_rng: rng::Rng,
    replay_rng: rng::Rng,
    quantile_rng: rng::Rng,
    bandit_rng: rng::Rng,
    stats: TrainStats,
    records: Vec<MetricsRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, env: Environment) -> Result<Self> {
        config.validate()?;
        let state_dim = env.state_dim();
        let action_dim = env.catalog().dim();
        let population = Population::new(config.population_config(), state_dim, action_dim)?;
        let critic = CriticNet::new(config.critic_config(state_dim, action_dim))?;
        let seed = config.seed;
        let mut bandit_rng = rng::stream(seed, streams::BANDIT);
        let (bandit, weights) = if config.bandit_enabled() {
            let mut b = BanditState::new(config.lambda, config.bandit_window)?;
            let (_, w) = b.select_arm(&mut bandit_rng);
            (Some(b), w)
        } else {
            (None, config.fixed_weights())
        };
        let m = population.len();
        Ok(Self {
            buffer: ReplayBuffer::new(config.replay_capacity)?,
            rollouts: (0..m).map(|_| None).collect(),
            completed: vec![Vec::new(); m],
            rollout_rng: rng::stream(seed, streams::ROLLOUT),
            noise_rng: rng::stream(seed, streams::NOISE),
            replay_rng: rng::stream(seed, streams::REPLAY),
            quantile_rng: rng::stream(seed, streams::QUANTILES),
            bandit_rng,
            config,
            env,
            population,
            critic,
            bandit,
            weights,
            step: 0,
            stats: TrainStats::default(),
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn critic(&self) -> &CriticNet {
        &self.critic
    }

    pub fn bandit(&self) -> Option<&BanditState> {
        self.bandit.as_ref()
    }

    pub fn weights(&self) -> (f64, f64) {
        self.weights
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn stats(&self) -> &TrainStats {
        &self.stats
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Every actor advances its own session by one noisy round.
    fn collect(&mut self) -> Result<()> {
        let noise = (self.config.noise > 0.0).then(|| Normal::new(0.0, self.config.noise).expect("positive std"));
        let list_size = self.env.session_config().list_size;
        for i in 0..self.population.len() {
            let rollout = self.rollouts[i].get_or_insert_with(|| Rollout {
                session: self.env.sample_session(&mut self.rollout_rng),
                return_so_far: 0.0,
            });
            let state = self.env.encode_state(&rollout.session);
            let mut action = self.population.actors()[i].action(&state)?;
            if let Some(n) = &noise {
                action.iter_mut().for_each(|a| *a += n.sample(&mut self.noise_rng));
            }
            let list = top_n(&self.env.catalog().scores(&action), list_size);
            let outcome = self.env.respond(&rollout.session, &list, &mut self.rollout_rng)?;
            rollout.return_so_far += outcome.reward;
            let done = outcome.next.done;
            let next_state = self.env.encode_state(&outcome.next);
            self.buffer.push(Transition {
                state,
                action,
                exposed: outcome.exposed,
                feedback: outcome.feedback,
                reward: outcome.reward,
                next_state,
                done,
                actor_id: i,
            });
            if done {
                self.completed[i].push(rollout.return_so_far);
                self.rollouts[i] = None;
            } else {
                rollout.session = outcome.next;
            }
        }
        Ok(())
    }

    fn critic_batch(&self, batch: &[&Transition]) -> Result<CriticBatch> {
        let rows = |f: &dyn Fn(&Transition) -> &[f64]| Matrix::from_rows(&batch.iter().map(|t| f(t)).collect::<Vec<_>>());
        let states = rows(&|t| &t.state)?;
        let actions = rows(&|t| &t.action)?;
        let next_states = rows(&|t| &t.next_state)?;
        let action_dim = actions.cols();
        let mut next_actions = Matrix::zeros(batch.len(), action_dim);
        for (i, actor) in self.population.actors().iter().enumerate() {
            let idx: Vec<usize> = (0..batch.len()).filter(|&r| batch[r].actor_id == i).collect();
            if idx.is_empty() {
                continue;
            }
            let s = Matrix::from_rows(&idx.iter().map(|&r| next_states.row(r)).collect::<Vec<_>>())?;
            let a = actor.target_actions(&s)?;
            for (k, &r) in idx.iter().enumerate() {
                next_actions.row_mut(r).copy_from_slice(a.row(k));
            }
        }
        Ok(CriticBatch {
            states,
            actions,
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_states,
            next_actions,
            dones: batch.iter().map(|t| t.done).collect(),
        })
    }

    /// Gradient updates for one step. Skipped until the buffer holds a batch.
    fn update(&mut self, check_targets: bool) -> Result<()> {
        let b = self.config.batch_size;
        if self.buffer.len() < b {
            return Ok(());
        }
        let batch = self.buffer.sample_minibatch(b, &mut self.replay_rng)?;
        let cb = self.critic_batch(&batch)?;
        let cl = self.critic.critic_loss(
            &cb,
            self.config.n_quantiles,
            self.config.n_target_quantiles,
            self.config.kappa,
            self.config.gamma,
            &mut self.quantile_rng,
        )?;
        self.critic.apply_gradients(&cl.grads)?;

        let intervals = self.population.quantile_intervals(self.step)?;
        let (lambda1, lambda2) = self.weights;
        let m = self.population.len();
        let mut forwards = Vec::with_capacity(m);
        let mut actor_losses = Vec::with_capacity(m);
        let mut sup_losses = Vec::with_capacity(m);
        let mut action_grads = Vec::with_capacity(m);
        for (i, actor) in self.population.actors().iter().enumerate() {
            let (actions, tape) = actor.forward(&cb.states)?;
            let al = actor_loss_on_actions(
                &self.critic,
                &cb.states,
                &actions,
                intervals[i],
                self.config.k_cvar,
                &mut self.quantile_rng,
            )?;
            let sl = supervision_loss_on_actions(self.env.catalog(), &actions, &batch)?;
            let mut grad = al.action_grad;
            if lambda1 > 0.0 {
                for (g, s) in grad.data_mut().iter_mut().zip(sl.action_grad.data()) {
                    *g += lambda1 * s;
                }
            }
            actor_losses.push(al.loss);
            sup_losses.push(sl.loss);
            action_grads.push(grad);
            forwards.push((actions, tape));
        }

        let mut div = 0.0;
        if lambda2 > 0.0 && m > 1 {
            let embeddings: Vec<Vec<f64>> = forwards
                .iter()
                .map(|(a, _)| behavior_embedding_from_actions(a).values)
                .collect();
            match diversity_loss(&embeddings, self.config.length_scale, self.config.jitter) {
                Ok(d) => {
                    div = d.loss;
                    for (i, g) in d.grads.iter().enumerate() {
                        let ga = embedding_grad_to_actions(&forwards[i].0, g);
                        for (x, y) in action_grads[i].data_mut().iter_mut().zip(ga.data()) {
                            *x += lambda2 * y;
                        }
                    }
                }
                Err(Error::Factorization { .. }) => self.stats.diversity_skips += 1,
                Err(e) => return Err(e),
            }
        }
        let total = total_loss(&actor_losses, &sup_losses, div, lambda1, lambda2)?;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: "total loss",
                index: self.step as usize,
                value: total,
            });
        }

        let param_grads: Vec<Vec<f64>> = self
            .population
            .actors()
            .iter()
            .zip(&forwards)
            .zip(&action_grads)
            .map(|((actor, (_, tape)), g)| actor.backward(tape, g))
            .collect::<Result<_>>()?;
        for (actor, g) in self.population.actors_mut().iter_mut().zip(&param_grads) {
            actor.apply_gradient(g)?;
        }

        let before = check_targets.then(|| (self.critic.target().clone(), self.critic.online().clone()));
        self.critic.soft_update_target(self.config.mu)?;
        if let Some((old_target, online)) = before {
            self.check_target(&old_target.trunk, &online.trunk, &self.critic.target().trunk)?;
            self.check_target(&old_target.embed, &online.embed, &self.critic.target().embed)?;
            self.check_target(&old_target.head, &online.head, &self.critic.target().head)?;
            self.stats.target_checks += 1;
        }
        for actor in self.population.actors_mut() {
            actor.soft_update_target(self.config.mu)?;
        }
        self.stats.updates += 1;
        self.stats.last_critic_loss = Some(cl.loss);
        self.stats.last_total_loss = Some(total);
        Ok(())
    }

    fn check_target(&self, old: &ParamSet, online: &ParamSet, new: &ParamSet) -> Result<()> {
        let mu = self.config.mu;
        for (i, ((t, o), n)) in old.values().iter().zip(online.values()).zip(new.values()).enumerate() {
            let expected = mu * o + (1.0 - mu) * t;
            if expected != *n {
                return Err(Error::NonFinite {
                    context: "critic target soft update",
                    index: i,
                    value: *n - expected,
                });
            }
        }
        Ok(())
    }

    /// Greedy evaluation with the trainer's fixed evaluation seed.
    pub fn evaluate_now(&self, episodes: usize) -> Result<EvalReport> {
        let mut report = evaluate(
            &self.population,
            &self.critic,
            &self.env,
            episodes,
            self.config.k_infer,
            self.config.seed,
        )?;
        report.step = self.step;
        Ok(report)
    }

    fn record(&mut self, report: &EvalReport) -> MetricsRecord {
        let mut rec = MetricsRecord::from_report(report, self.env.catalog().len(), self.env.catalog().categories());
        rec.per_actor_mean_return = self
            .completed
            .iter_mut()
            .map(|returns| {
                let m = metrics::mean(returns).ok();
                returns.clear();
                m
            })
            .collect();
        rec.bandit = self.bandit.as_ref().map(|b| BanditSnapshot {
            stability: b.params(Arm::Stability),
            diversity: b.params(Arm::Diversity),
        });
        rec.arm = self.bandit.as_ref().and_then(|b| b.last_selected);
        rec.lambda = [self.weights.0, self.weights.1];
        rec.alphas = self
            .population
            .quantile_intervals(self.step)
            .map(|v| v.iter().map(|q| q.hi).collect())
            .unwrap_or_default();
        rec.critic_loss = self.stats.last_critic_loss;
        rec.diversity_skips = self.stats.diversity_skips;
        rec
    }

    /// Advances one step. Returns the metrics record when the step closes an
    /// evaluation interval.
    pub fn step(&mut self) -> Result<Option<MetricsRecord>> {
        let boundary = (self.step + 1) % self.config.eval_interval == 0;
        self.collect()?;
        self.update(boundary)?;
        self.step += 1;
        if !boundary {
            return Ok(None);
        }
        let report = self.evaluate_now(self.config.eval_episodes)?;
        let record = self.record(&report);
        if let Some(b) = self.bandit.as_mut() {
            b.observe_evaluation(report.mean_reward())?;
            let (_, w) = b.select_arm(&mut self.bandit_rng);
            self.weights = w;
        }
        self.records.push(record.clone());
        Ok(Some(record))
    }

    /// Runs to `total_steps`, handing every record to `on_record`.
    pub fn run<F>(&mut self, mut on_record: F) -> Result<()>
    where
        F: FnMut(&Trainer, &MetricsRecord) -> Result<()>,
    {
        while self.step < self.config.total_steps {
            if let Some(rec) = self.step()? {
                on_record(self, &rec)?;
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> TrainOutcome {
        TrainOutcome {
            population: self.population,
            critic: self.critic,
            bandit: self.bandit,
            records: self.records,
            stats: self.stats,
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.population, &self.critic, self.bandit.as_ref())
    }
}

pub struct TrainOutcome {
    pub population: Population,
    pub critic: CriticNet,
    pub bandit: Option<BanditState>,
    pub records: Vec<MetricsRecord>,
    pub stats: TrainStats,
}

pub fn train(config: TrainConfig, env: Environment) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, env)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(trainer.into_parts())
}

/// Trains one ablation variant of `base`.
pub fn run_ablation(base: &TrainConfig, ablation: Option<Ablation>, env: Environment) -> Result<TrainOutcome> {
    train(base.with_ablation(ablation), env)
}

/// Writes `critic.bin`, `actor_<i>.bin` and `bandit.json` (null when the
/// bandit is off).
pub fn save_checkpoint(dir: &Path, population: &Population, critic: &CriticNet, bandit: Option<&BanditState>) -> Result<()> {
    fs::create_dir_all(dir)?;
    critic.save(&dir.join("critic.bin"))?;
    for actor in population.actors() {
        actor.save(&dir.join(format!("actor_{}.bin", actor.index())))?;
    }
    fs::write(dir.join("bandit.json"), serde_json::to_string_pretty(&bandit)?)?;
    Ok(())
}

pub fn load_checkpoint(
    dir: &Path,
    config: &TrainConfig,
    state_dim: usize,
    action_dim: usize,
) -> Result<(Population, CriticNet, Option<BanditState>)> {
    let fresh = Population::new(config.population_config(), state_dim, action_dim)?;
    let actors = fresh
        .actors()
        .iter()
        .map(|a| Actor::load(a.spec().clone(), config.actor_lr, &dir.join(format!("actor_{}.bin", a.index()))))
        .collect::<Result<Vec<_>>>()?;
    let population = Population::from_actors(config.population_config(), actors)?;
    let critic = CriticNet::load(config.critic_config(state_dim, action_dim), &dir.join("critic.bin"))?;
    let bandit: Option<BanditState> = serde_json::from_str(&fs::read_to_string(dir.join("bandit.json"))?)?;
    Ok((population, critic, bandit))
}
