//! Implicit-quantile distributional critic.
//!
//! `Z(s, a; τ) = head(trunk(s ⊕ a) ⊙ embed(τ))`: the trunk maps the
//! state-action pair to a feature vector, a single affine+relu layer embeds
//! the quantile fraction τ, and their elementwise product goes through a small
//! head. Trained with the quantile Huber loss over `N × N'` sampled quantile
//! pairs. The deterministic variant drops the τ path and regresses a scalar Q.
//!
//! CVaR and expectations are Monte-Carlo averages of `Z` over uniformly
//! sampled τ; they work against any [`QuantileFunction`], so analytic quantile
//! functions can stand in for the network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    adam_step, mlp_backward, mlp_backward_input, mlp_forward_batch, mlp_predict, soft_update, Activation, AdamState,
    Matrix, MlpSpec, ParamSet, Tape,
};
use crate::{Error, Result};

pub const DEFAULT_KAPPA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Distributional,
    /// Scalar Q head; τ is ignored everywhere.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub trunk_hidden: Vec<usize>,
    /// Width of the trunk output and of the quantile embedding.
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub kind: CriticKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl CriticConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            trunk_hidden: vec![256, 64],
            feature_dim: 16,
            head_hidden: 32,
            kind: CriticKind::Distributional,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Parameters of one critic copy (online or target).
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub trunk: ParamSet,
    pub embed: ParamSet,
    pub head: ParamSet,
}

/// Gradients laid out like [`CriticParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads {
    pub trunk: Vec<f64>,
    pub embed: Vec<f64>,
    pub head: Vec<f64>,
}

impl CriticGrads {
    fn zeros(params: &CriticParams) -> Self {
        Self {
            trunk: vec![0.0; params.trunk.len()],
            embed: vec![0.0; params.embed.len()],
            head: vec![0.0; params.head.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.trunk.iter().chain(&self.embed).chain(&self.head).copied().collect()
    }
}

/// State-action batch with its transitions' rewards and bootstrap inputs.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    /// Actions of the target policy at the next states.
    pub next_actions: Matrix,
    pub dones: Vec<bool>,
}

impl CriticBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads: CriticGrads,
}

struct ForwardCache {
    trunk_tape: Tape,
    embed_tape: Option<Tape>,
    head_tape: Tape,
    features: Matrix,
    embeddings: Option<Matrix>,
    per_row: usize,
}

#[derive(Debug, Clone)]
pub struct CriticNet {
    config: CriticConfig,
    trunk_spec: MlpSpec,
    embed_spec: MlpSpec,
    head_spec: MlpSpec,
    online: CriticParams,
    target: CriticParams,
    adam: [AdamState; 3],
}

impl CriticNet {
    pub fn new(config: CriticConfig) -> Result<Self> {
        if config.state_dim == 0 || config.action_dim == 0 || config.feature_dim == 0 || config.head_hidden == 0 {
            return Err(Error::InvalidConfig("critic dims must be positive".into()));
        }
        let mut trunk_dims = vec![config.state_dim + config.action_dim];
        trunk_dims.extend(&config.trunk_hidden);
        trunk_dims.push(config.feature_dim);
        let trunk_spec = MlpSpec::new(trunk_dims, Activation::Relu, config.seed)?;
        let embed_spec = MlpSpec::new(vec![1, config.feature_dim], Activation::Relu, config.seed.wrapping_add(1))?
            .with_output_activation(Activation::Relu);
        let head_spec = MlpSpec::new(
            vec![config.feature_dim, config.head_hidden, 1],
            Activation::Relu,
            config.seed.wrapping_add(2),
        )?;
        let online = CriticParams {
            trunk: trunk_spec.init_params(),
            embed: embed_spec.init_params(),
            head: head_spec.init_params(),
        };
        let lr = config.learning_rate;
        let adam = [
            AdamState::new(online.trunk.len(), lr)?,
            AdamState::new(online.embed.len(), lr)?,
            AdamState::new(online.head.len(), lr)?,
        ];
        Ok(Self {
            target: online.clone(),
            config,
            trunk_spec,
            embed_spec,
            head_spec,
            online,
            adam,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn kind(&self) -> CriticKind {
        self.config.kind
    }

    pub fn online(&self) -> &CriticParams {
        &self.online
    }

    pub fn target(&self) -> &CriticParams {
        &self.target
    }

    pub fn online_mut(&mut self) -> &mut CriticParams {
        &mut self.online
    }

    pub fn target_mut(&mut self) -> &mut CriticParams {
        &mut self.target
    }

    pub fn specs(&self) -> (&MlpSpec, &MlpSpec, &MlpSpec) {
        (&self.trunk_spec, &self.embed_spec, &self.head_spec)
    }

    fn check_taus(taus: &[f64]) -> Result<()> {
        match taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            Some(t) => Err(Error::OutOfRange(format!("quantile fraction {t} outside (0, 1)"))),
            None => Ok(()),
        }
    }

    fn state_action(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix> {
        if states.cols() != self.config.state_dim || actions.cols() != self.config.action_dim {
            return Err(Error::DimensionMismatch {
                context: "critic state/action",
                expected: self.config.state_dim + self.config.action_dim,
                actual: states.cols() + actions.cols(),
            });
        }
        Matrix::hconcat(states, actions)
    }

    /// Quantile values `B × K` for per-row τ grids `taus` (`B × K`).
    pub fn quantiles_batch(&self, params: &CriticParams, states: &Matrix, actions: &Matrix, taus: &Matrix) -> Result<Matrix> {
        Self::check_taus(taus.data())?;
        let sa = self.state_action(states, actions)?;
        let features = mlp_predict(&self.trunk_spec, &params.trunk, &sa)?;
        match self.config.kind {
            CriticKind::Deterministic => {
                let q = mlp_predict(&self.head_spec, &params.head, &features)?;
                Ok(broadcast_columns(&q, taus.cols()))
            }
            CriticKind::Distributional => {
                let tau_col = Matrix::new(taus.data().len(), 1, taus.data().to_vec())?;
                let embeddings = mlp_predict(&self.embed_spec, &params.embed, &tau_col)?;
                let mixed = mix(&features, &embeddings, taus.cols());
                let z = mlp_predict(&self.head_spec, &params.head, &mixed)?;
                Matrix::new(taus.rows(), taus.cols(), z.into_data())
            }
        }
    }

    fn forward_recorded(&self, params: &CriticParams, sa: &Matrix, taus: &Matrix) -> Result<(Matrix, ForwardCache)> {
        Self::check_taus(taus.data())?;
        let (features, trunk_tape) = mlp_forward_batch(&self.trunk_spec, &params.trunk, sa)?;
        match self.config.kind {
            CriticKind::Deterministic => {
                let (q, head_tape) = mlp_forward_batch(&self.head_spec, &params.head, &features)?;
                let z = broadcast_columns(&q, taus.cols());
                Ok((
                    z,
                    ForwardCache {
                        trunk_tape,
                        embed_tape: None,
                        head_tape,
                        features,
                        embeddings: None,
                        per_row: taus.cols(),
                    },
                ))
            }
            CriticKind::Distributional => {
                let tau_col = Matrix::new(taus.data().len(), 1, taus.data().to_vec())?;
                let (embeddings, embed_tape) = mlp_forward_batch(&self.embed_spec, &params.embed, &tau_col)?;
                let mixed = mix(&features, &embeddings, taus.cols());
                let (z, head_tape) = mlp_forward_batch(&self.head_spec, &params.head, &mixed)?;
                let z = Matrix::new(taus.rows(), taus.cols(), z.into_data())?;
                Ok((
                    z,
                    ForwardCache {
                        trunk_tape,
                        embed_tape: Some(embed_tape),
                        head_tape,
                        features,
                        embeddings: Some(embeddings),
                        per_row: taus.cols(),
                    },
                ))
            }
        }
    }

    /// Backpropagates `dz` (`B × K`). Returns parameter gradients when
    /// requested and always the gradient wrt the `s ⊕ a` input.
    fn backward(
        &self,
        params: &CriticParams,
        cache: &ForwardCache,
        dz: &Matrix,
        want_params: bool,
    ) -> Result<(Option<CriticGrads>, Matrix)> {
        let rows = cache.features.rows();
        let k = cache.per_row;
        let mut grads = want_params.then(|| CriticGrads::zeros(params));
        let d_features = match self.config.kind {
            CriticKind::Deterministic => {
                let dq: Vec<f64> = (0..rows).map(|r| dz.row(r).iter().sum()).collect();
                let dq = Matrix::new(rows, 1, dq)?;
                if let Some(g) = grads.as_mut() {
                    let hg = mlp_backward(&self.head_spec, &params.head, &cache.head_tape, &dq)?;
                    g.head = hg.params;
                    hg.input
                } else {
                    mlp_backward_input(&self.head_spec, &params.head, &cache.head_tape, &dq)?
                }
            }
            CriticKind::Distributional => {
                let dz_col = Matrix::new(rows * k, 1, dz.data().to_vec())?;
                let d_mixed = if let Some(g) = grads.as_mut() {
                    let hg = mlp_backward(&self.head_spec, &params.head, &cache.head_tape, &dz_col)?;
                    g.head = hg.params;
                    hg.input
                } else {
                    mlp_backward_input(&self.head_spec, &params.head, &cache.head_tape, &dz_col)?
                };
                let embeddings = cache.embeddings.as_ref().expect("distributional cache");
                let width = cache.features.cols();
                let mut d_features = Matrix::zeros(rows, width);
                let mut d_embed = Matrix::zeros(rows * k, width);
                for r in 0..rows {
                    let f = cache.features.row(r);
                    for j in 0..k {
                        let idx = r * k + j;
                        let dm = d_mixed.row(idx);
                        let e = embeddings.row(idx);
                        let df = d_features.row_mut(r);
                        for c in 0..width {
                            df[c] += dm[c] * e[c];
                        }
                        let de = d_embed.row_mut(idx);
                        for c in 0..width {
                            de[c] = dm[c] * f[c];
                        }
                    }
                }
                if let Some(g) = grads.as_mut() {
                    let tape = cache.embed_tape.as_ref().expect("distributional cache");
                    g.embed = mlp_backward(&self.embed_spec, &params.embed, tape, &d_embed)?.params;
                }
                d_features
            }
        };
        let d_input = if let Some(g) = grads.as_mut() {
            let tg = mlp_backward(&self.trunk_spec, &params.trunk, &cache.trunk_tape, &d_features)?;
            g.trunk = tg.params;
            tg.input
        } else {
            mlp_backward_input(&self.trunk_spec, &params.trunk, &cache.trunk_tape, &d_features)?
        };
        Ok((grads, d_input))
    }

    /// `Z(s, a; τ_i)` for each τ under the online parameters.
    pub fn z_value(&self, state: &[f64], action: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        let z = self.quantiles_batch(
            &self.online,
            &Matrix::from_row(state),
            &Matrix::from_row(action),
            &Matrix::from_row(taus),
        )?;
        Ok(z.into_data())
    }

    /// Mean of `Z` over each row's τ grid, averaged over the batch, and its
    /// gradient wrt the actions. Critic parameters are left untouched.
    pub fn mean_value_and_action_grad(&self, states: &Matrix, actions: &Matrix, taus: &Matrix) -> Result<(f64, Matrix)> {
        let sa = self.state_action(states, actions)?;
        let (z, cache) = self.forward_recorded(&self.online, &sa, taus)?;
        let rows = z.rows();
        let count = (rows * z.cols()) as f64;
        let value = z.data().iter().sum::<f64>() / count;
        let dz = Matrix::new(rows, z.cols(), vec![1.0 / count; rows * z.cols()])?;
        let (_, d_input) = self.backward(&self.online, &cache, &dz, false)?;
        Ok((value, d_input.columns(self.config.state_dim, self.config.action_dim)))
    }

    /// Loss on explicitly given τ grids (`B × N` online, `B × N'` target).
    pub fn critic_loss_with_taus(
        &self,
        batch: &CriticBatch,
        taus: &Matrix,
        target_taus: &Matrix,
        kappa: f64,
        gamma: f64,
    ) -> Result<CriticLoss> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::OutOfRange(format!("discount {gamma} outside [0, 1)")));
        }
        if !(kappa > 0.0) {
            return Err(Error::OutOfRange(format!("kappa must be > 0, got {kappa}")));
        }
        let rows = batch.len();
        if rows == 0 || taus.rows() != rows || target_taus.rows() != rows || batch.dones.len() != rows {
            return Err(Error::DimensionMismatch {
                context: "critic batch",
                expected: rows,
                actual: taus.rows(),
            });
        }
        let sa = self.state_action(&batch.states, &batch.actions)?;
        let (z, cache) = self.forward_recorded(&self.online, &sa, taus)?;
        let z_next = self.quantiles_batch(&self.target, &batch.next_states, &batch.next_actions, target_taus)?;

        let (n, n_target) = (taus.cols(), target_taus.cols());
        let mut dz = Matrix::zeros(rows, n);
        let mut total = 0.0;
        match self.config.kind {
            CriticKind::Distributional => {
                let scale = 1.0 / (n * n_target) as f64;
                for b in 0..rows {
                    let discount = if batch.dones[b] { 0.0 } else { gamma };
                    let zo = z.row(b);
                    let zt = z_next.row(b);
                    let tau_row = taus.row(b);
                    let dzr = dz.row_mut(b);
                    let mut row_loss = 0.0;
                    for i in 0..n {
                        let mut grad_i = 0.0;
                        for &target in zt {
                            let delta = batch.rewards[b] + discount * target - zo[i];
                            row_loss += quantile_huber(delta, tau_row[i], kappa);
                            grad_i += quantile_huber_grad(delta, tau_row[i], kappa);
                        }
                        // ∂δ/∂z_i = -1
                        dzr[i] = -grad_i * scale / rows as f64;
                    }
                    total += row_loss * scale;
                }
            }
            CriticKind::Deterministic => {
                for b in 0..rows {
                    let discount = if batch.dones[b] { 0.0 } else { gamma };
                    let delta = batch.rewards[b] + discount * z_next.get(b, 0) - z.get(b, 0);
                    total += 0.5 * delta * delta;
                    dz.row_mut(b)[0] = -delta / rows as f64;
                }
            }
        }
        let loss = total / rows as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "critic loss",
                index: 0,
                value: loss,
            });
        }
        let (grads, _) = self.backward(&self.online, &cache, &dz, true)?;
        Ok(CriticLoss {
            loss,
            grads: grads.expect("parameter gradients requested"),
        })
    }

    /// Samples `N` online and `N'` target fractions per transition from U(0,1)
    /// and evaluates the loss on them.
    pub fn critic_loss<R: Rng + ?Sized>(
        &self,
        batch: &CriticBatch,
        n: usize,
        n_target: usize,
        kappa: f64,
        gamma: f64,
        rng: &mut R,
    ) -> Result<CriticLoss> {
        if n == 0 || n_target == 0 {
            return Err(Error::InvalidConfig("N and N' must be >= 1".into()));
        }
        let (n, n_target) = match self.config.kind {
            CriticKind::Distributional => (n, n_target),
            CriticKind::Deterministic => (1, 1),
        };
        let taus = sample_taus(batch.len(), n, 0.0, 1.0, rng);
        let target_taus = sample_taus(batch.len(), n_target, 0.0, 1.0, rng);
        self.critic_loss_with_taus(batch, &taus, &target_taus, kappa, gamma)
    }

    pub fn apply_gradients(&mut self, grads: &CriticGrads) -> Result<()> {
        let [trunk, embed, head] = &mut self.adam;
        adam_step(trunk, &mut self.online.trunk, &grads.trunk)?;
        if self.config.kind == CriticKind::Distributional {
            adam_step(embed, &mut self.online.embed, &grads.embed)?;
        }
        adam_step(head, &mut self.online.head, &grads.head)
    }

    pub fn soft_update_target(&mut self, mu: f64) -> Result<()> {
        soft_update(&mut self.target.trunk, &self.online.trunk, mu)?;
        soft_update(&mut self.target.embed, &self.online.embed, mu)?;
        soft_update(&mut self.target.head, &self.online.head, mu)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CRITIC_MAGIC)?;
        for p in [
            &self.online.trunk,
            &self.online.embed,
            &self.online.head,
            &self.target.trunk,
            &self.target.embed,
            &self.target.head,
        ] {
            p.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Restores parameters saved by [`CriticNet::save`] into a net built from `config`.
    pub fn load(config: CriticConfig, path: &Path) -> Result<Self> {
        let mut net = Self::new(config)?;
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CRITIC_MAGIC {
            return Err(Error::Checkpoint {
                path: path.to_owned(),
                reason: "bad magic".into(),
            });
        }
        let mut read = |expected: &ParamSet| -> Result<ParamSet> {
            let p = ParamSet::read_from(&mut r)?;
            if p.layout() != expected.layout() {
                return Err(Error::Checkpoint {
                    path: path.to_owned(),
                    reason: "critic shape differs from config".into(),
                });
            }
            Ok(p)
        };
        let online = CriticParams {
            trunk: read(&net.online.trunk)?,
            embed: read(&net.online.embed)?,
            head: read(&net.online.head)?,
        };
        let target = CriticParams {
            trunk: read(&net.online.trunk)?,
            embed: read(&net.online.embed)?,
            head: read(&net.online.head)?,
        };
        net.online = online;
        net.target = target;
        Ok(net)
    }
}

const CRITIC_MAGIC: &[u8; 8] = b"UOEPCRT1";

/// Row `r*k + j` of the result is `features[r] ⊙ embeddings[r*k + j]`.
fn mix(features: &Matrix, embeddings: &Matrix, k: usize) -> Matrix {
    let width = features.cols();
    let mut out = Matrix::zeros(features.rows() * k, width);
    for r in 0..features.rows() {
        let f = features.row(r);
        for j in 0..k {
            let idx = r * k + j;
            let e = embeddings.row(idx);
            for (o, (a, b)) in out.row_mut(idx).iter_mut().zip(f.iter().zip(e)) {
                *o = a * b;
            }
        }
    }
    out
}

fn broadcast_columns(column: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(column.rows(), k);
    for r in 0..column.rows() {
        out.row_mut(r).fill(column.get(r, 0));
    }
    out
}

/// `rows × k` fractions drawn from U(lo, hi), strictly inside the interval.
pub fn sample_taus<R: Rng + ?Sized>(rows: usize, k: usize, lo: f64, hi: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * k)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            lo + (hi - lo) * u
        })
        .collect();
    Matrix::new(rows, k, data).expect("sized buffer")
}

/// `δ_ij = r + γ(1 − done) z'_j − z_i`, as an `N × N'` matrix.
pub fn td_errors(reward: f64, gamma: f64, z_target: &[f64], z_online: &[f64], done: bool) -> Result<Matrix> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::OutOfRange(format!("discount {gamma} outside [0, 1)")));
    }
    let discount = if done { 0.0 } else { gamma };
    let data = z_online
        .iter()
        .flat_map(|&z| z_target.iter().map(move |&t| reward + discount * t - z))
        .collect();
    Matrix::new(z_online.len(), z_target.len(), data)
}

/// Asymmetric Huber loss `|τ − 1{δ<0}| · huber_κ(δ)`.
#[inline]
pub fn quantile_huber(delta: f64, tau: f64, kappa: f64) -> f64 {
    let weight = (tau - if delta < 0.0 { 1.0 } else { 0.0 }).abs();
    let abs = delta.abs();
    let huber = if abs <= kappa {
        delta * delta / (2.0 * kappa)
    } else {
        abs - kappa / 2.0
    };
    weight * huber
}

/// Derivative of [`quantile_huber`] wrt δ.
#[inline]
pub fn quantile_huber_grad(delta: f64, tau: f64, kappa: f64) -> f64 {
    let weight = (tau - if delta < 0.0 { 1.0 } else { 0.0 }).abs();
    let slope = if delta.abs() <= kappa {
        delta / kappa
    } else {
        delta.signum()
    };
    weight * slope
}

/// Anything that can report return quantiles for a state-action pair.
pub trait QuantileFunction {
    fn quantiles(&self, state: &[f64], action: &[f64], taus: &[f64]) -> Result<Vec<f64>>;
}

impl QuantileFunction for CriticNet {
    fn quantiles(&self, state: &[f64], action: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        self.z_value(state, action, taus)
    }
}

/// State-free quantile function `τ ↦ f(τ)`.
pub struct AnalyticQuantile<F>(pub F);

impl<F: Fn(f64) -> f64> QuantileFunction for AnalyticQuantile<F> {
    fn quantiles(&self, _state: &[f64], _action: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        Ok(taus.iter().map(|&t| (self.0)(t)).collect())
    }
}

/// Mean of `Z` over `K` fractions drawn from U(lo, hi).
pub fn interval_cvar_estimate<Q: QuantileFunction + ?Sized, R: Rng + ?Sized>(
    model: &Q,
    state: &[f64],
    action: &[f64],
    lo: f64,
    hi: f64,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::OutOfRange(format!("quantile interval ({lo}, {hi}) is empty or outside [0, 1]")));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    let taus = sample_taus(1, k, lo, hi, rng);
    let z = model.quantiles(state, action, taus.data())?;
    Ok(z.iter().sum::<f64>() / k as f64)
}

/// Monte-Carlo CVaR: mean of `Z` over `K` fractions drawn from U(0, α).
pub fn cvar_estimate<Q: QuantileFunction + ?Sized, R: Rng + ?Sized>(
    model: &Q,
    state: &[f64],
    action: &[f64],
    alpha: f64,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::OutOfRange(format!("CVaR level {alpha} outside (0, 1]")));
    }
    interval_cvar_estimate(model, state, action, 0.0, alpha, k, rng)
}

/// Expected return: mean of `Z` over `K` fractions drawn from U(0, 1).
pub fn q_expectation<Q: QuantileFunction + ?Sized, R: Rng + ?Sized>(
    model: &Q,
    state: &[f64],
    action: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    interval_cvar_estimate(model, state, action, 0.0, 1.0, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_config(kind: CriticKind) -> CriticConfig {
        CriticConfig {
            state_dim: 3,
            action_dim: 2,
            trunk_hidden: vec![8, 6],
            feature_dim: 4,
            head_hidden: 5,
            kind,
            learning_rate: 1e-3,
            seed: 7,
        }
    }

    fn random_batch(rows: usize, seed: u64) -> CriticBatch {
        let mut rng = rng::seeded(seed);
        let mut m = |cols: usize| {
            Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let states = m(3);
        let actions = m(2);
        let next_states = m(3);
        let next_actions = m(2);
        let mut rng = rng::seeded(seed + 1);
        CriticBatch {
            states,
            actions,
            rewards: (0..rows).map(|_| rng.random_range(-0.2..1.0)).collect(),
            next_states,
            next_actions,
            dones: (0..rows).map(|i| i % 3 == 0).collect(),
        }
    }

    #[test]
    fn zero_head_gives_zero_quantiles() {
        let mut net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        net.online_mut().head.values_mut().fill(0.0);
        let z = net.z_value(&[0.1, 0.2, 0.3], &[1.0, -1.0], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn repeated_tau_gives_repeated_value() {
        let net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        let z = net.z_value(&[0.1, 0.2, 0.3], &[1.0, -1.0], &[0.3, 0.3, 0.3]).unwrap();
        assert!(z.iter().all(|&v| v == z[0]));
        assert!(net.z_value(&[0.1, 0.2, 0.3], &[1.0, -1.0], &[0.0]).is_err());
        assert!(net.z_value(&[0.1, 0.2, 0.3], &[1.0, -1.0], &[1.0]).is_err());
    }

    #[test]
    fn hand_set_toy_net_matches_manual_evaluation() {
        // state dim 1, action dim 1, no trunk hidden layer, feature dim 2.
        let config = CriticConfig {
            state_dim: 1,
            action_dim: 1,
            trunk_hidden: vec![],
            feature_dim: 2,
            head_hidden: 2,
            kind: CriticKind::Distributional,
            learning_rate: 1e-3,
            seed: 0,
        };
        let mut net = CriticNet::new(config).unwrap();
        // trunk: f = W [s, a] + b, W = [[1, 2], [0.5, -1]], b = [0, 0.1]
        net.online_mut().trunk = ParamSet::from_values(&[2, 2], vec![1.0, 2.0, 0.5, -1.0, 0.0, 0.1]).unwrap();
        // embed: e = relu(w τ + c), w = [1, -1], c = [0, 1]
        net.online_mut().embed = ParamSet::from_values(&[1, 2], vec![1.0, -1.0, 0.0, 1.0]).unwrap();
        // head: h = relu(V m + d), V = I, d = 0; z = [1, 2]·h + 0.5
        net.online_mut().head =
            ParamSet::from_values(&[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.5]).unwrap();
        // s = 1, a = 0.5: f = (2.0, 0.1); τ = 0.25: e = (0.25, 0.75)
        // m = (0.5, 0.075); z = 0.5 + 0.15 + 0.5 = 1.15
        let z = net.z_value(&[1.0], &[0.5], &[0.25]).unwrap();
        assert_relative_eq!(z[0], 1.15, epsilon = 1e-14);
    }

    #[test]
    fn td_error_cases() {
        let d = td_errors(0.0, 0.0, &[5.0, 6.0], &[1.0, 2.0], false).unwrap();
        assert_eq!(d.data(), &[-1.0, -1.0, -2.0, -2.0]);
        let d = td_errors(0.5, 0.9, &[5.0, 6.0], &[1.0], true).unwrap();
        assert_eq!(d.data(), &[-0.5, -0.5]);
        let d = td_errors(1.0, 0.9, &[2.0], &[0.5], false).unwrap();
        assert_relative_eq!(d.get(0, 0), 2.3, epsilon = 1e-15);
        assert!(td_errors(1.0, 1.0, &[2.0], &[0.5], false).is_err());
    }

    #[test]
    fn quantile_huber_cases() {
        assert_eq!(quantile_huber(0.0, 0.3, 1.0), 0.0);
        assert_relative_eq!(quantile_huber(0.5, 0.5, 1.0), 0.0625, epsilon = 1e-15);
        assert_relative_eq!(quantile_huber(-2.0, 0.9, 1.0), 0.15, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn quantile_huber_nonnegative_and_continuous(delta in -5.0f64..5.0, tau in 0.001f64..0.999, kappa in 0.1f64..3.0) {
            let v = quantile_huber(delta, tau, kappa);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, delta == 0.0);
            for edge in [kappa, -kappa] {
                let lo = quantile_huber(edge - 1e-9, tau, kappa);
                let hi = quantile_huber(edge + 1e-9, tau, kappa);
                prop_assert!((lo - hi).abs() < 1e-8);
            }
        }
    }

    /// Independent double loop over the explicit Eq.-level definition.
    fn brute_force_loss(net: &CriticNet, batch: &CriticBatch, taus: &Matrix, target_taus: &Matrix, gamma: f64) -> f64 {
        let mut total = 0.0;
        for b in 0..batch.len() {
            let z = net.z_value(batch.states.row(b), batch.actions.row(b), taus.row(b)).unwrap();
            let zt = net
                .quantiles_batch(
                    net.target(),
                    &Matrix::from_row(batch.next_states.row(b)),
                    &Matrix::from_row(batch.next_actions.row(b)),
                    &Matrix::from_row(target_taus.row(b)),
                )
                .unwrap()
                .into_data();
            let mut acc = 0.0;
            for i in 0..z.len() {
                for j in 0..zt.len() {
                    let not_done = if batch.dones[b] { 0.0 } else { 1.0 };
                    let delta = batch.rewards[b] + gamma * not_done * zt[j] - z[i];
                    acc += quantile_huber(delta, taus.get(b, i), 1.0);
                }
            }
            total += acc / (z.len() * zt.len()) as f64;
        }
        total / batch.len() as f64
    }

    #[test]
    fn critic_loss_matches_double_loop() {
        let mut net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        for v in net.target_mut().head.values_mut() {
            *v *= 1.5;
        }
        let batch = random_batch(6, 3);
        let mut rng = rng::seeded(9);
        let taus = sample_taus(6, 2, 0.0, 1.0, &mut rng);
        let target_taus = sample_taus(6, 2, 0.0, 1.0, &mut rng);
        let fast = net.critic_loss_with_taus(&batch, &taus, &target_taus, 1.0, 0.9).unwrap().loss;
        let slow = brute_force_loss(&net, &batch, &taus, &target_taus, 0.9);
        assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1e-300));
    }

    #[test]
    fn single_quantile_reduces_to_one_term() {
        let net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        let batch = random_batch(1, 5);
        let taus = Matrix::from_row(&[0.3]);
        let target_taus = Matrix::from_row(&[0.6]);
        let loss = net.critic_loss_with_taus(&batch, &taus, &target_taus, 1.0, 0.9).unwrap().loss;
        let z = net.z_value(batch.states.row(0), batch.actions.row(0), &[0.3]).unwrap()[0];
        let zt = net
            .quantiles_batch(net.target(), &batch.next_states, &batch.next_actions, &target_taus)
            .unwrap()
            .get(0, 0);
        let delta = batch.rewards[0] + 0.9 * if batch.dones[0] { 0.0 } else { zt } - z;
        assert_relative_eq!(loss, quantile_huber(delta, 0.3, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_td_error_gives_zero_loss() {
        let mut net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        net.online_mut().head.values_mut().fill(0.0);
        net.target_mut().head.values_mut().fill(0.0);
        let mut batch = random_batch(4, 1);
        batch.rewards.fill(0.0);
        let l = net.critic_loss(&batch, 3, 3, 1.0, 0.9, &mut rng::seeded(0)).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grads.flatten().iter().all(|&g| g == 0.0));
    }

    fn fd_rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-7)
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        for kind in [CriticKind::Distributional, CriticKind::Deterministic] {
            let net = CriticNet::new(small_config(kind)).unwrap();
            let batch = random_batch(5, 2);
            let mut rng = rng::seeded(4);
            let taus = sample_taus(5, 3, 0.0, 1.0, &mut rng);
            let target_taus = sample_taus(5, 3, 0.0, 1.0, &mut rng);
            let analytic = net.critic_loss_with_taus(&batch, &taus, &target_taus, 1.0, 0.9).unwrap().grads;
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for part in 0..3 {
                let len = match part {
                    0 => net.online().trunk.len(),
                    1 => net.online().embed.len(),
                    _ => net.online().head.len(),
                };
                if kind == CriticKind::Deterministic && part == 1 {
                    continue;
                }
                for i in 0..len {
                    let eval = |delta: f64| {
                        let mut n = net.clone();
                        let p = match part {
                            0 => &mut n.online_mut().trunk,
                            1 => &mut n.online_mut().embed,
                            _ => &mut n.online_mut().head,
                        };
                        p.values_mut()[i] += delta;
                        n.critic_loss_with_taus(&batch, &taus, &target_taus, 1.0, 0.9).unwrap().loss
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = match part {
                        0 => analytic.trunk[i],
                        1 => analytic.embed[i],
                        _ => analytic.head[i],
                    };
                    worst = worst.max(fd_rel_err(a, fd));
                }
            }
            assert!(worst < 1e-4, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        let batch = random_batch(4, 8);
        let taus = sample_taus(4, 5, 0.0, 0.6, &mut rng::seeded(1));
        let (_, grad) = net.mean_value_and_action_grad(&batch.states, &batch.actions, &taus).unwrap();
        let h = 1e-6;
        for r in 0..4 {
            for c in 0..2 {
                let eval = |d: f64| {
                    let mut a = batch.actions.clone();
                    a.row_mut(r)[c] += d;
                    net.mean_value_and_action_grad(&batch.states, &a, &taus).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(fd_rel_err(grad.get(r, c), fd) < 1e-4);
            }
        }
    }

    #[test]
    fn deterministic_critic_ignores_tau() {
        let net = CriticNet::new(small_config(CriticKind::Deterministic)).unwrap();
        let z = net.z_value(&[0.1, 0.2, 0.3], &[1.0, -1.0], &[0.01, 0.5, 0.99]).unwrap();
        assert!(z.iter().all(|&v| v == z[0]));
    }

    #[test]
    fn constant_model_gives_constant_estimates() {
        let c = AnalyticQuantile(|_| 2.5);
        let mut rng = rng::seeded(0);
        for alpha in [0.1, 0.5, 1.0] {
            assert_eq!(cvar_estimate(&c, &[], &[], alpha, 7, &mut rng).unwrap(), 2.5);
        }
        assert_eq!(interval_cvar_estimate(&c, &[], &[], 0.2, 0.4, 3, &mut rng).unwrap(), 2.5);
        assert_eq!(q_expectation(&c, &[], &[], 3, &mut rng).unwrap(), 2.5);
        assert!(cvar_estimate(&c, &[], &[], 0.0, 7, &mut rng).is_err());
        assert!(interval_cvar_estimate(&c, &[], &[], 0.4, 0.4, 3, &mut rng).is_err());
    }

    #[test]
    fn estimators_converge_to_closed_forms() {
        let k = 100_000;
        let mut rng = rng::seeded(13);
        let id = AnalyticQuantile(|t| t);
        // (1/α)∫₀^α τ dτ = α/2
        assert!((cvar_estimate(&id, &[], &[], 0.5, k, &mut rng).unwrap() - 0.25).abs() < 1e-2);
        assert!((interval_cvar_estimate(&id, &[], &[], 0.2, 0.4, k, &mut rng).unwrap() - 0.3).abs() < 1e-2);
        let two = AnalyticQuantile(|t| 2.0 * t);
        assert!((q_expectation(&two, &[], &[], k, &mut rng).unwrap() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn interval_from_zero_matches_cvar_in_law() {
        let id = AnalyticQuantile(|t: f64| t * t);
        let a = cvar_estimate(&id, &[], &[], 0.3, 1000, &mut rng::seeded(3)).unwrap();
        let b = interval_cvar_estimate(&id, &[], &[], 0.0, 0.3, 1000, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, b);
        let full = cvar_estimate(&id, &[], &[], 1.0, 1000, &mut rng::seeded(5)).unwrap();
        let q = q_expectation(&id, &[], &[], 1000, &mut rng::seeded(5)).unwrap();
        assert_eq!(full, q);
    }

    #[test]
    fn cvar_is_nondecreasing_in_alpha() {
        let k = 1_000_000;
        let f = |t: f64| (t * 6.0).exp() - 3.0;
        let model = AnalyticQuantile(f);
        let mut prev = f64::NEG_INFINITY;
        let mut rng = rng::seeded(17);
        for alpha in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let est = cvar_estimate(&model, &[], &[], alpha, k, &mut rng).unwrap();
            // per-draw std bounded by the range of f on (0, α)
            let sigma = (f(alpha) - f(0.0)) / (k as f64).sqrt();
            assert!(est + 3.0 * sigma >= prev, "alpha {alpha}: {est} < {prev}");
            prev = est;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("critic.bin");
        let mut net = CriticNet::new(small_config(CriticKind::Distributional)).unwrap();
        net.online_mut().head.values_mut()[0] = 3.0;
        net.save(&path).unwrap();
        let loaded = CriticNet::load(small_config(CriticKind::Distributional), &path).unwrap();
        assert_eq!(loaded.online(), net.online());
        assert_eq!(loaded.target(), net.target());
        let mut other = small_config(CriticKind::Distributional);
        other.feature_dim = 5;
        assert!(CriticNet::load(other, &path).is_err());
    }
}
