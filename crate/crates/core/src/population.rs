//! The actor population: action generation, quantile-targeted actor losses,
//! behavior embeddings with the SE-kernel log-det diversity loss, and the
//! click supervision loss.
//!
//! Loss functions return gradients with respect to the action matrices; the
//! trainer sums them per actor and runs a single backward pass through each
//! actor network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{sample_taus, CriticNet};
use crate::env::{sigmoid, ItemCatalog};
use crate::nn::{
    adam_step, mlp_backward, mlp_forward_batch, mlp_predict, soft_update, Activation, AdamState, Matrix, MlpSpec,
    ParamSet, Tape,
};
use crate::replay::Transition;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Actor i optimizes CVaR over (0, α_i).
    Nested,
    /// Actor i optimizes the mean over (α_{i-1}, α_i).
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub alphas: Vec<f64>,
    pub beta: f64,
    /// Decay horizon H in steps; `t = t_step / H`.
    pub horizon: u64,
    pub length_scale: f64,
    pub jitter: f64,
    pub grouping: Grouping,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl PopulationConfig {
    pub fn new(alphas: Vec<f64>) -> Self {
        Self {
            alphas,
            beta: 0.5,
            horizon: 10_000,
            length_scale: 1.0,
            jitter: 1e-4,
            grouping: Grouping::Nested,
            hidden: vec![64, 32],
            learning_rate: 5e-4,
            seed: 0,
        }
    }

    /// `{1/m, 2/m, …, 1}`.
    pub fn even_alphas(m: usize) -> Vec<f64> {
        (1..=m).map(|i| i as f64 / m as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::InvalidConfig("population needs at least one actor".into()));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidConfig(format!("quantile levels must lie in (0, 1]: {:?}", self.alphas)));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "quantile levels must be strictly ascending: {:?}",
                self.alphas
            )));
        }
        if !(self.beta > 0.0) || self.horizon == 0 || !(self.length_scale > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidConfig("beta, horizon and length scale must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("actor learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `α_t = max{α, 1 − β(1 − α)·t_step/H}`.
pub fn decayed_alpha(alpha: f64, beta: f64, t_step: u64, horizon: u64) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("decay horizon must be positive".into()));
    }
    let t = t_step as f64 / horizon as f64;
    Ok(alpha.max(1.0 - beta * (1.0 - alpha) * t))
}

/// The `n` highest-scoring item ids, ties broken by ascending id.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    // -0.0 ranks with 0.0 and NaN ranks last
    let keys: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_nan() { f64::NEG_INFINITY } else { s + 0.0 })
        .collect();
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| keys[*b].total_cmp(&keys[*a]).then(a.cmp(b));
    let n = n.min(ids.len());
    if n == 0 {
        return Vec::new();
    }
    if n < ids.len() {
        ids.select_nth_unstable_by(n - 1, cmp);
        ids.truncate(n);
    }
    ids.sort_unstable_by(cmp);
    ids
}

#[derive(Debug, Clone)]
pub struct Actor {
    index: usize,
    alpha: f64,
    spec: MlpSpec,
    params: ParamSet,
    target: ParamSet,
    adam: AdamState,
}

impl Actor {
    pub fn new(index: usize, alpha: f64, spec: MlpSpec, learning_rate: f64) -> Result<Self> {
        let params = spec.init_params();
        Ok(Self {
            index,
            alpha,
            adam: AdamState::new(params.len(), learning_rate)?,
            target: params.clone(),
            params,
            spec,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn target(&self) -> &ParamSet {
        &self.target
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn action(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(mlp_predict(&self.spec, &self.params, &Matrix::from_row(state))?.into_data())
    }

    pub fn actions(&self, states: &Matrix) -> Result<Matrix> {
        mlp_predict(&self.spec, &self.params, states)
    }

    pub fn target_actions(&self, states: &Matrix) -> Result<Matrix> {
        mlp_predict(&self.spec, &self.target, states)
    }

    pub fn forward(&self, states: &Matrix) -> Result<(Matrix, Tape)> {
        mlp_forward_batch(&self.spec, &self.params, states)
    }

    /// Parameter gradient for a loss whose gradient wrt the actions is `d_actions`.
    pub fn backward(&self, tape: &Tape, d_actions: &Matrix) -> Result<Vec<f64>> {
        Ok(mlp_backward(&self.spec, &self.params, tape, d_actions)?.params)
    }

    /// Action vector and its top-`n` list over the catalog.
    pub fn act(&self, catalog: &ItemCatalog, state: &[f64], n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let action = self.action(state)?;
        let list = top_n(&catalog.scores(&action), n);
        Ok((action, list))
    }

    pub fn apply_gradient(&mut self, grad: &[f64]) -> Result<()> {
        adam_step(&mut self.adam, &mut self.params, grad)
    }

    pub fn soft_update_target(&mut self, mu: f64) -> Result<()> {
        soft_update(&mut self.target, &self.params, mu)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(ACTOR_MAGIC)?;
        w.write_all(&(self.index as u64).to_le_bytes())?;
        w.write_all(&self.alpha.to_le_bytes())?;
        self.params.write_to(&mut w)?;
        self.target.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Restores an actor saved by [`Actor::save`] onto `spec`.
    pub fn load(spec: MlpSpec, learning_rate: f64, path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_owned(),
            reason: reason.into(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ACTOR_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let index = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let alpha = f64::from_le_bytes(word);
        let params = ParamSet::read_from(&mut r)?;
        let target = ParamSet::read_from(&mut r)?;
        if params.layer_dims() != spec.layer_dims() || target.layer_dims() != spec.layer_dims() {
            return Err(bad("actor shape differs from config"));
        }
        let mut actor = Self::new(index, alpha, spec, learning_rate)?;
        actor.params = params;
        actor.target = target;
        Ok(actor)
    }
}

const ACTOR_MAGIC: &[u8; 8] = b"UOEPACT1";

#[derive(Debug, Clone)]
pub struct Population {
    config: PopulationConfig,
    actors: Vec<Actor>,
}

impl Population {
    pub fn new(config: PopulationConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        config.validate()?;
        let actors = config
            .alphas
            .iter()
            .enumerate()
            .map(|(i, &alpha)| {
                let mut dims = vec![state_dim];
                dims.extend(&config.hidden);
                dims.push(action_dim);
                let seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
                let spec = MlpSpec::new(dims, Activation::Relu, seed)?.with_output_activation(Activation::Tanh);
                Actor::new(i, alpha, spec, config.learning_rate)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, actors })
    }

    pub fn from_actors(config: PopulationConfig, actors: Vec<Actor>) -> Result<Self> {
        config.validate()?;
        if actors.len() != config.alphas.len() {
            return Err(Error::DimensionMismatch {
                context: "population size",
                expected: config.alphas.len(),
                actual: actors.len(),
            });
        }
        Ok(Self { config, actors })
    }

    pub fn config(&self) -> &PopulationConfig {
        &self.config
    }

    pub fn actors(&self) -> &[Actor] {
        &self.actors
    }

    pub fn actors_mut(&mut self) -> &mut [Actor] {
        &mut self.actors
    }

    pub fn len(&self) -> usize {
        self.actors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actors.is_empty()
    }

    /// Decayed levels of every actor at `t_step`.
    pub fn decayed_alphas(&self, t_step: u64) -> Result<Vec<f64>> {
        self.config
            .alphas
            .iter()
            .map(|&a| decayed_alpha(a, self.config.beta, t_step, self.config.horizon))
            .collect()
    }

    /// Quantile interval each actor optimizes at `t_step`.
    pub fn quantile_intervals(&self, t_step: u64) -> Result<Vec<QuantileInterval>> {
        let alphas = self.decayed_alphas(t_step)?;
        Ok(alphas
            .iter()
            .enumerate()
            .map(|(i, &hi)| match self.config.grouping {
                Grouping::Nested => QuantileInterval { lo: 0.0, hi },
                Grouping::Disjoint => {
                    let lo = if i == 0 { 0.0 } else { alphas[i - 1] };
                    // Before decay starts every level sits at 1 and the band is empty.
                    QuantileInterval {
                        lo: if lo < hi { lo } else { 0.0 },
                        hi,
                    }
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileInterval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct ActionLoss {
    pub loss: f64,
    /// Gradient wrt each row of the action matrix.
    pub action_grad: Matrix,
}

/// `−mean_b mean_k Z(s_b, a_b; τ_bk)` with `τ_bk ~ U(lo, hi)`.
pub fn actor_loss_on_actions<R: Rng + ?Sized>(
    critic: &CriticNet,
    states: &Matrix,
    actions: &Matrix,
    interval: QuantileInterval,
    k: usize,
    rng: &mut R,
) -> Result<ActionLoss> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be >= 1".into()));
    }
    let QuantileInterval { lo, hi } = interval;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::OutOfRange(format!("quantile interval ({lo}, {hi}) is empty or outside [0, 1]")));
    }
    let taus = sample_taus(states.rows(), k, lo, hi, rng);
    actor_loss_with_taus(critic, states, actions, &taus)
}

/// Actor loss on explicit τ draws (`B × K`).
pub fn actor_loss_with_taus(critic: &CriticNet, states: &Matrix, actions: &Matrix, taus: &Matrix) -> Result<ActionLoss> {
    let (value, grad) = critic.mean_value_and_action_grad(states, actions, taus)?;
    let mut action_grad = grad;
    action_grad.data_mut().iter_mut().for_each(|g| *g = -*g);
    Ok(ActionLoss {
        loss: -value,
        action_grad,
    })
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub loss: f64,
    pub param_grad: Vec<f64>,
}

/// Quantile-targeted loss of one actor and its parameter gradient; the critic
/// is only read.
pub fn actor_loss<R: Rng + ?Sized>(
    actor: &Actor,
    critic: &CriticNet,
    states: &Matrix,
    interval: QuantileInterval,
    k: usize,
    rng: &mut R,
) -> Result<ActorLoss> {
    let (actions, tape) = actor.forward(states)?;
    let l = actor_loss_on_actions(critic, states, &actions, interval, k, rng)?;
    Ok(ActorLoss {
        loss: l.loss,
        param_grad: actor.backward(&tape, &l.action_grad)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEmbedding {
    pub values: Vec<f64>,
    /// Rows whose action was exactly zero and were left at zero.
    pub zero_rows: usize,
}

/// Row-wise L2-normalized actions, flattened.
pub fn behavior_embedding_from_actions(actions: &Matrix) -> BehaviorEmbedding {
    let mut values = actions.data().to_vec();
    let mut zero_rows = 0;
    for row in values.chunks_mut(actions.cols().max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zero_rows += 1;
        }
    }
    BehaviorEmbedding { values, zero_rows }
}

pub fn behavior_embedding(actor: &Actor, states: &Matrix) -> Result<BehaviorEmbedding> {
    if states.rows() == 0 {
        return Err(Error::Empty("state batch"));
    }
    Ok(behavior_embedding_from_actions(&actor.actions(states)?))
}

/// Pulls an embedding gradient back through the row normalization.
pub fn embedding_grad_to_actions(actions: &Matrix, embedding_grad: &[f64]) -> Matrix {
    let cols = actions.cols();
    let mut out = Matrix::zeros(actions.rows(), cols);
    for r in 0..actions.rows() {
        let a = actions.row(r);
        let g = &embedding_grad[r * cols..(r + 1) * cols];
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let proj: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>() / norm;
        for ((o, x), y) in out.row_mut(r).iter_mut().zip(a).zip(g) {
            *o = (y - proj * x / norm) / norm;
        }
    }
    out
}

/// `exp(−‖x1 − x2‖² / 2l²)`.
pub fn se_kernel(x1: &[f64], x2: &[f64], length_scale: f64) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel inputs",
            expected: x1.len(),
            actual: x2.len(),
        });
    }
    if !(length_scale > 0.0) {
        return Err(Error::OutOfRange(format!("length scale must be > 0, got {length_scale}")));
    }
    let d2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-d2 / (2.0 * length_scale * length_scale)).exp())
}

/// Lower Cholesky factor of a row-major SPD matrix, or `None` if a pivot is
/// not strictly positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of `L Lᵀ` from its Cholesky factor.
fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    inv
}

#[derive(Debug, Clone)]
pub struct DiversityLoss {
    pub loss: f64,
    /// Gradient wrt each embedding.
    pub grads: Vec<Vec<f64>>,
    /// Diagonal jitter that finally factorized.
    pub jitter: f64,
    pub escalations: usize,
}

const MAX_JITTER_ESCALATIONS: usize = 3;

/// `−log det(K + jitter·I)` over the SE kernel of the embeddings.
///
/// A failed factorization retries with the jitter multiplied by 10, at most
/// three times, then reports [`Error::Factorization`].
pub fn diversity_loss(embeddings: &[Vec<f64>], length_scale: f64, jitter: f64) -> Result<DiversityLoss> {
    let m = embeddings.len();
    if m == 0 {
        return Err(Error::Empty("behavior embeddings"));
    }
    let mut kernel = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let k = se_kernel(&embeddings[i], &embeddings[j], length_scale)?;
            kernel[i * m + j] = k;
            kernel[j * m + i] = k;
        }
    }
    let mut current = jitter;
    for escalations in 0..=MAX_JITTER_ESCALATIONS {
        let mut a = kernel.clone();
        for i in 0..m {
            a[i * m + i] += current;
        }
        if let Some(l) = cholesky(&a, m) {
            let log_det: f64 = 2.0 * (0..m).map(|i| l[i * m + i].ln()).sum::<f64>();
            let inv = cholesky_inverse(&l, m);
            let scale = 2.0 / (length_scale * length_scale);
            let grads = (0..m)
                .map(|i| {
                    let mut g = vec![0.0; embeddings[i].len()];
                    for j in (0..m).filter(|&j| j != i) {
                        let w = scale * inv[i * m + j] * kernel[i * m + j];
                        for ((gc, a), b) in g.iter_mut().zip(&embeddings[i]).zip(&embeddings[j]) {
                            *gc += w * (a - b);
                        }
                    }
                    g
                })
                .collect();
            return Ok(DiversityLoss {
                loss: -log_det,
                grads,
                jitter: current,
                escalations,
            });
        }
        current = if current > 0.0 { current * 10.0 } else { 1e-10 };
    }
    Err(Error::Factorization { jitter: current / 10.0 })
}

/// Mean binary cross-entropy of `sigmoid(a_b · v_item)` against the clicks of
/// each transition's exposed list, with its gradient wrt the actions.
pub fn supervision_loss_on_actions(
    catalog: &ItemCatalog,
    actions: &Matrix,
    transitions: &[&Transition],
) -> Result<ActionLoss> {
    if transitions.len() != actions.rows() {
        return Err(Error::DimensionMismatch {
            context: "supervision batch",
            expected: actions.rows(),
            actual: transitions.len(),
        });
    }
    let total: usize = transitions.iter().map(|t| t.exposed.len()).sum();
    if total == 0 {
        return Err(Error::Empty("exposed items"));
    }
    let mut loss = 0.0;
    let mut action_grad = Matrix::zeros(actions.rows(), actions.cols());
    for (b, t) in transitions.iter().enumerate() {
        if t.feedback.len() != t.exposed.len() {
            return Err(Error::DimensionMismatch {
                context: "feedback",
                expected: t.exposed.len(),
                actual: t.feedback.len(),
            });
        }
        let a = actions.row(b);
        let grad = action_grad.row_mut(b);
        for (&item, &clicked) in t.exposed.iter().zip(&t.feedback) {
            let v = catalog.embedding(item);
            let logit: f64 = a.iter().zip(v).map(|(x, y)| x * y).sum();
            // log(1 + e^{-|x|}) form keeps the loss finite for confident logits
            let y = if clicked { 1.0 } else { 0.0 };
            loss += logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
            let residual = (sigmoid(logit) - y) / total as f64;
            for (g, vj) in grad.iter_mut().zip(v) {
                *g += residual * vj;
            }
        }
    }
    Ok(ActionLoss {
        loss: loss / total as f64,
        action_grad,
    })
}

pub fn supervision_loss(actor: &Actor, catalog: &ItemCatalog, transitions: &[&Transition]) -> Result<ActorLoss> {
    if transitions.is_empty() {
        return Err(Error::Empty("supervision batch"));
    }
    let states = Matrix::from_rows(&transitions.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>())?;
    let (actions, tape) = actor.forward(&states)?;
    let l = supervision_loss_on_actions(catalog, &actions, transitions)?;
    Ok(ActorLoss {
        loss: l.loss,
        param_grad: actor.backward(&tape, &l.action_grad)?,
    })
}

/// `Σ_i (L_actor,i + λ1·L_sta,i) + λ2·L_div`.
pub fn total_loss(actor_losses: &[f64], sup_losses: &[f64], div_loss: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if actor_losses.len() != sup_losses.len() {
        return Err(Error::DimensionMismatch {
            context: "per-actor losses",
            expected: actor_losses.len(),
            actual: sup_losses.len(),
        });
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::OutOfRange(format!("loss weights must be >= 0, got ({lambda1}, {lambda2})")));
    }
    let per_actor: f64 = actor_losses.iter().zip(sup_losses).map(|(a, s)| a + lambda1 * s).sum();
    Ok(per_actor + lambda2 * div_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticConfig;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn catalog(items: usize, dim: usize, seed: u64) -> ItemCatalog {
        let mut r = rng::seeded(seed);
        ItemCatalog::with_derived_categories(dim, (0..items * dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_population(m: usize) -> Population {
        let mut cfg = PopulationConfig::new(PopulationConfig::even_alphas(m));
        cfg.hidden = vec![6];
        Population::new(cfg, 4, 3).unwrap()
    }

    fn random_states(rows: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::new(rows, 4, (0..rows * 4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_actor_acts_with_tie_break() {
        let mut pop = small_population(1);
        pop.actors_mut()[0].params_mut().values_mut().fill(0.0);
        let cat = catalog(20, 3, 1);
        let (a, list) = pop.actors()[0].act(&cat, &[0.1, 0.2, 0.3, 0.4], 5).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        assert_eq!(list, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn aligned_action_ranks_item_first() {
        let cat = catalog(20, 3, 2);
        let list = top_n(&cat.scores(cat.embedding(13)), 3);
        // the self dot product is the largest unless another item is longer
        // and close in direction; check against a full sort instead of assuming
        let mut order: Vec<usize> = (0..20).collect();
        let s = cat.scores(cat.embedding(13));
        order.sort_by(|a, b| s[*b].total_cmp(&s[*a]).then(a.cmp(b)));
        assert_eq!(list, order[..3]);
        let onehot = top_n(&[0.0, 0.0, 5.0, 0.0], 2);
        assert_eq!(onehot, vec![2, 0]);
    }

    proptest! {
        #[test]
        fn top_n_matches_full_sort(scores in proptest::collection::vec(-3i32..3, 1..40), n in 1usize..15) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
            order.truncate(n);
            prop_assert_eq!(top_n(&scores, n), order);
        }
    }

    #[test]
    fn decayed_alpha_cases() {
        assert_eq!(decayed_alpha(0.2, 0.5, 0, 100).unwrap(), 1.0);
        assert_relative_eq!(decayed_alpha(0.2, 0.5, 200, 100).unwrap(), 0.2, epsilon = 1e-15);
        for t in [0, 10, 1000, 100_000] {
            assert_eq!(decayed_alpha(1.0, 0.5, t, 100).unwrap(), 1.0);
        }
        assert!(decayed_alpha(0.2, 0.5, 0, 0).is_err());
    }

    #[test]
    fn decayed_alpha_is_bounded_and_monotone() {
        for alpha in [0.05, 0.2, 0.5, 0.9, 1.0] {
            for beta in [0.1, 0.5, 1.0, 3.0] {
                let mut prev = 1.0;
                for t in (0..500).step_by(7) {
                    let a = decayed_alpha(alpha, beta, t, 100).unwrap();
                    assert!((alpha..=1.0).contains(&a));
                    assert!(a <= prev);
                    prev = a;
                }
            }
        }
    }

    #[test]
    fn disjoint_intervals_follow_neighbors() {
        let mut cfg = PopulationConfig::new(vec![0.5, 1.0]);
        cfg.grouping = Grouping::Disjoint;
        cfg.hidden = vec![4];
        cfg.horizon = 100;
        let pop = Population::new(cfg, 4, 3).unwrap();
        let start = pop.quantile_intervals(0).unwrap();
        assert_eq!(start[1], QuantileInterval { lo: 0.0, hi: 1.0 });
        let end = pop.quantile_intervals(200).unwrap();
        assert_eq!(end[0], QuantileInterval { lo: 0.0, hi: 0.5 });
        assert_eq!(end[1], QuantileInterval { lo: 0.5, hi: 1.0 });
    }

    fn constant_critic(c: f64) -> CriticNet {
        let cfg = CriticConfig {
            trunk_hidden: vec![5],
            feature_dim: 3,
            head_hidden: 4,
            ..CriticConfig::new(4, 3)
        };
        let mut net = CriticNet::new(cfg).unwrap();
        let head = &mut net.online_mut().head;
        let out_bias = head.bias_mut(1);
        out_bias[0] = c;
        head.weights_mut(1).fill(0.0);
        net
    }

    #[test]
    fn constant_critic_gives_constant_loss_and_zero_gradient() {
        let pop = small_population(2);
        let critic = constant_critic(1.75);
        let states = random_states(5, 1);
        let l = actor_loss(
            &pop.actors()[0],
            &critic,
            &states,
            QuantileInterval { lo: 0.0, hi: 0.4 },
            8,
            &mut rng::seeded(0),
        )
        .unwrap();
        assert_eq!(l.loss, -1.75);
        assert!(l.param_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn actor_loss_matches_hand_monte_carlo_mean() {
        let pop = small_population(1);
        let critic = CriticNet::new(CriticConfig {
            trunk_hidden: vec![5],
            feature_dim: 3,
            head_hidden: 4,
            ..CriticConfig::new(4, 3)
        })
        .unwrap();
        let states = random_states(1, 3);
        let action = pop.actors()[0].actions(&states).unwrap();
        let taus = sample_taus(1, 6, 0.0, 0.3, &mut rng::seeded(5));
        let expected = -critic.z_value(states.row(0), action.row(0), taus.row(0)).unwrap().iter().sum::<f64>() / 6.0;
        let got = actor_loss_on_actions(
            &critic,
            &states,
            &action,
            QuantileInterval { lo: 0.0, hi: 0.3 },
            6,
            &mut rng::seeded(5),
        )
        .unwrap();
        assert_relative_eq!(got.loss, expected, epsilon = 1e-14);
    }

    #[test]
    fn actor_param_gradient_matches_finite_differences() {
        let pop = small_population(1);
        let actor = &pop.actors()[0];
        let critic = CriticNet::new(CriticConfig {
            trunk_hidden: vec![5],
            feature_dim: 3,
            head_hidden: 4,
            ..CriticConfig::new(4, 3)
        })
        .unwrap();
        let states = random_states(4, 9);
        let taus = sample_taus(4, 5, 0.0, 0.6, &mut rng::seeded(2));
        let (actions, tape) = actor.forward(&states).unwrap();
        let l = actor_loss_with_taus(&critic, &states, &actions, &taus).unwrap();
        let grad = actor.backward(&tape, &l.action_grad).unwrap();
        let h = 1e-5;
        for i in 0..actor.params().len() {
            let eval = |d: f64| {
                let mut a = actor.clone();
                a.params_mut().values_mut()[i] += d;
                let acts = a.actions(&states).unwrap();
                actor_loss_with_taus(&critic, &states, &acts, &taus).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (grad[i] - fd).abs() / (grad[i].abs() + fd.abs()).max(1e-7);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn behavior_embedding_cases() {
        let pop = small_population(2);
        let states = random_states(1, 4);
        let e = behavior_embedding(&pop.actors()[0], &states).unwrap();
        let a = pop.actors()[0].action(states.row(0)).unwrap();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (x, y) in e.values.iter().zip(&a) {
            assert_relative_eq!(*x, y / norm, epsilon = 1e-15);
        }
        let twin = pop.actors()[0].clone();
        assert_eq!(behavior_embedding(&twin, &states).unwrap(), e);
        let zero = behavior_embedding_from_actions(&Matrix::zeros(2, 3));
        assert_eq!(zero.zero_rows, 2);
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embeddings_differ_only_in_changed_block() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 4.0], [1.0, 1.0]]).unwrap();
        let mut b = a.clone();
        b.row_mut(2).copy_from_slice(&[-4.0, 3.0]);
        let ea = behavior_embedding_from_actions(&a).values;
        let eb = behavior_embedding_from_actions(&b).values;
        for (i, (x, y)) in ea.iter().zip(&eb).enumerate() {
            assert_eq!(x != y, i / 2 == 2, "entry {i}");
        }
    }

    #[test]
    fn se_kernel_cases() {
        assert_eq!(se_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        // ‖x1 − x2‖² = 2 = 2l² with l = 1
        assert_relative_eq!(se_kernel(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        let mut prev = 1.0;
        for d in 1..40 {
            let k = se_kernel(&[0.0], &[d as f64 * 0.5], 1.0).unwrap();
            assert!(k < prev);
            prev = k;
        }
        assert!(prev < 1e-40);
        assert!(se_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn diversity_loss_cases() {
        let single = diversity_loss(&[vec![0.3, 0.1]], 1.0, 1e-4).unwrap();
        assert_relative_eq!(single.loss, -(1.0f64 + 1e-4).ln(), epsilon = 1e-15);

        let same = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(diversity_loss(&same, 1.0, 1e-4).unwrap().loss > 8.0);
        let degenerate = diversity_loss(&same, 1.0, 0.0).unwrap();
        assert!(degenerate.escalations > 0 && degenerate.loss.is_finite());

        let (e1, e2) = (vec![0.0, 1.0], vec![0.6, 0.2]);
        let k = se_kernel(&e1, &e2, 1.0).unwrap();
        let j = 1e-3;
        let two = diversity_loss(&[e1, e2], 1.0, j).unwrap();
        assert_relative_eq!(two.loss, -((1.0 + j) * (1.0 + j) - k * k).ln(), epsilon = 1e-12);
    }

    #[test]
    fn diversity_gradient_matches_finite_differences() {
        let mut r = rng::seeded(11);
        let emb: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| r.random_range(-0.6..0.6)).collect()).collect();
        let d = diversity_loss(&emb, 0.8, 1e-4).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for c in 0..3 {
                let eval = |delta: f64| {
                    let mut e = emb.clone();
                    e[i][c] += delta;
                    diversity_loss(&e, 0.8, 1e-4).unwrap().loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (d.grads[i][c] - fd).abs() / (d.grads[i][c].abs() + fd.abs()).max(1e-7);
                assert!(err < 1e-4);
            }
        }
    }

    #[test]
    fn moving_apart_lowers_diversity_loss() {
        let emb = vec![vec![0.1, 0.2], vec![0.3, 0.1], vec![-0.2, 0.0]];
        let base = diversity_loss(&emb, 1.0, 1e-4).unwrap().loss;
        let mut moved = emb.clone();
        let dir: Vec<f64> = emb[0].iter().zip(&emb[1]).map(|(a, b)| a - b).collect();
        for (x, d) in moved[0].iter_mut().zip(&dir) {
            *x += 1e-3 * d;
        }
        assert!(diversity_loss(&moved, 1.0, 1e-4).unwrap().loss < base);
        assert!(base >= -3.0 * (1.0f64 + 1e-4).ln());
    }

    fn transition(state: Vec<f64>, exposed: Vec<usize>, feedback: Vec<bool>) -> Transition {
        Transition {
            next_state: state.clone(),
            state,
            action: vec![],
            exposed,
            feedback,
            reward: 0.0,
            done: false,
            actor_id: 0,
        }
    }

    #[test]
    fn supervision_loss_cases() {
        let cat = ItemCatalog::new(1, vec![1.0, 1.0, -1.0], vec![0, 0, 0]).unwrap();
        let t = transition(vec![], vec![0, 1], vec![true, false]);
        let half = supervision_loss_on_actions(&cat, &Matrix::from_row(&[0.0]), &[&t]).unwrap();
        assert_relative_eq!(half.loss, 2f64.ln(), epsilon = 1e-15);

        let confident = transition(vec![], vec![0, 2], vec![true, false]);
        let l = supervision_loss_on_actions(&cat, &Matrix::from_row(&[40.0]), &[&confident]).unwrap();
        assert!(l.loss < 1e-15);

        // logits chosen so p = (0.9, 0.2)
        let p1: f64 = 0.9;
        let p2: f64 = 0.2;
        let (l1, l2) = ((p1 / (1.0 - p1)).ln(), (p2 / (1.0 - p2)).ln());
        let cat = ItemCatalog::new(1, vec![l1, l2], vec![0, 1]).unwrap();
        let t = transition(vec![], vec![0, 1], vec![true, false]);
        let got = supervision_loss_on_actions(&cat, &Matrix::from_row(&[1.0]), &[&t]).unwrap();
        assert_relative_eq!(got.loss, -(0.9f64.ln() + 0.8f64.ln()) / 2.0, epsilon = 1e-12);
        assert!((got.loss - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn supervision_gradient_matches_finite_differences() {
        let cat = catalog(12, 3, 5);
        let ts: Vec<Transition> = (0..3)
            .map(|b| transition(vec![0.0; 4], vec![b, b + 3, b + 6], vec![b % 2 == 0, true, false]))
            .collect();
        let refs: Vec<&Transition> = ts.iter().collect();
        let actions = Matrix::from_rows(&[[0.3, -0.2, 0.5], [0.9, 0.1, -0.4], [-0.7, 0.2, 0.05]]).unwrap();
        let l = supervision_loss_on_actions(&cat, &actions, &refs).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..3 {
                let eval = |d: f64| {
                    let mut a = actions.clone();
                    a.row_mut(r)[c] += d;
                    supervision_loss_on_actions(&cat, &a, &refs).unwrap().loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = l.action_grad.get(r, c);
                assert!((g - fd).abs() / (g.abs() + fd.abs()).max(1e-7) < 1e-4);
            }
        }
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let actions = Matrix::from_rows(&[[0.3, -0.2, 0.5], [0.0, 0.0, 0.0]]).unwrap();
        let weights = [0.7, -1.1, 0.4, 2.0, 0.3, -0.5];
        let f = |a: &Matrix| -> f64 {
            behavior_embedding_from_actions(a).values.iter().zip(&weights).map(|(x, w)| x * w).sum()
        };
        let g = embedding_grad_to_actions(&actions, &weights);
        let h = 1e-6;
        for c in 0..3 {
            let mut p = actions.clone();
            p.row_mut(0)[c] += h;
            let mut m = actions.clone();
            m.row_mut(0)[c] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g.get(0, c) - fd).abs() < 1e-8);
        }
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(&[-1.0, -2.0], &[0.5, 0.5], 0.7, 0.0, 0.0).unwrap(), -3.0);
        assert_eq!(total_loss(&[-1.0], &[0.5], 0.7, 16.0, 0.0).unwrap(), -1.0 + 8.0);
        assert_relative_eq!(total_loss(&[-1.0, -2.0], &[0.5, 0.5], 0.7, 1.0, 2.0).unwrap(), -0.6, epsilon = 1e-15);
        assert!(total_loss(&[-1.0], &[0.5], 0.7, -1.0, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PopulationConfig::new(vec![0.5, 0.2]).validate().is_err());
        assert!(PopulationConfig::new(vec![]).validate().is_err());
        assert!(PopulationConfig::new(vec![0.0, 1.0]).validate().is_err());
        assert_eq!(PopulationConfig::even_alphas(2), vec![0.5, 1.0]);
    }

    #[test]
    fn actor_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pop = small_population(2);
        let a = &pop.actors()[1];
        let path = dir.path().join("actor_1.bin");
        a.save(&path).unwrap();
        let b = Actor::load(a.spec().clone(), 5e-4, &path).unwrap();
        assert_eq!(b.index(), 1);
        assert_eq!(b.alpha(), 1.0);
        assert_eq!(b.params(), a.params());
        assert_eq!(b.target(), a.target());
    }
}
