//! Session-based recommendation environment.
//!
//! A synthetic population of users with long-tailed activity levels and a
//! catalog of item embeddings. Each session shows the user `n` items per
//! round; every item is clicked independently with the ground-truth
//! probability `sigmoid(u·v + b_u)`. Clicked items pay `1`, skipped items
//! `-0.2`, and the round reward is their mean. A temper budget drains with
//! poor rounds and ends the session, as does the depth cap.
//!
//! An interaction log in CSV form can replace the synthetic ground truth
//! with a fitted logistic response model.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{adam_update, read_u64, AdamState};
use crate::rng;
use crate::{Error, Result};

pub const CLICK_REWARD: f64 = 1.0;
pub const SKIP_REWARD: f64 = -0.2;
pub const DEFAULT_CATEGORIES: usize = 8;

/// Scale of user and item latent entries; keeps `std(u·v) = 1.5` for any dim.
fn latent_std(dim: usize) -> f64 {
    (1.5 / (dim as f64).sqrt()).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub id: usize,
    pub latent: Vec<f64>,
    pub activity_bias: f64,
    /// Static features visible to the recommender.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    dim: usize,
    embeddings: Vec<f64>,
    categories: Vec<usize>,
}

impl ItemCatalog {
    pub fn new(dim: usize, embeddings: Vec<f64>, categories: Vec<usize>) -> Result<Self> {
        if dim == 0 || embeddings.len() != dim * categories.len() {
            return Err(Error::DimensionMismatch {
                context: "item embeddings",
                expected: dim * categories.len(),
                actual: embeddings.len(),
            });
        }
        if let Some((index, &value)) = embeddings.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "item embeddings",
                index,
                value,
            });
        }
        Ok(Self {
            dim,
            embeddings,
            categories,
        })
    }

    /// Categories from the index of the largest of the first
    /// `DEFAULT_CATEGORIES` embedding coordinates.
    pub fn with_derived_categories(dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { embeddings.len() / dim };
        let width = dim.min(DEFAULT_CATEGORIES).max(1);
        let categories = (0..n)
            .map(|i| {
                let v = &embeddings[i * dim..i * dim + width];
                (0..width)
                    .max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect();
        Self::new(dim, embeddings, categories)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, item: usize) -> &[f64] {
        &self.embeddings[item * self.dim..(item + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn category(&self, item: usize) -> usize {
        self.categories[item]
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    /// `action · v_item` for every item.
    pub fn scores(&self, action: &[f64]) -> Vec<f64> {
        self.embeddings
            .chunks_exact(self.dim)
            .map(|v| v.iter().zip(action).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Synthetic users and items. Deterministic in `seed`.
///
/// Activity biases are `-softplus(E)` with `E ~ Exponential(1/heterogeneity)`,
/// so `heterogeneity = 0` gives every user the same bias `-ln 2`.
pub fn gen_population(
    seed: u64,
    num_users: usize,
    num_items: usize,
    dim: usize,
    heterogeneity: f64,
) -> Result<(Vec<UserProfile>, ItemCatalog)> {
    if num_users == 0 || num_items == 0 || dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "population needs users, items and dim >= 1 (got {num_users}, {num_items}, {dim})"
        )));
    }
    if !(heterogeneity >= 0.0 && heterogeneity.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "heterogeneity must be finite and >= 0, got {heterogeneity}"
        )));
    }
    let mut rng = rng::stream(seed, rng::streams::POPULATION);
    let latent = Normal::new(0.0, latent_std(dim)).expect("positive std");
    let activity = (heterogeneity > 0.0).then(|| Exp::new(1.0 / heterogeneity).expect("positive rate"));

    let users = (0..num_users)
        .map(|id| {
            let u: Vec<f64> = (0..dim).map(|_| latent.sample(&mut rng)).collect();
            let e = activity.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            UserProfile {
                id,
                features: u.clone(),
                latent: u,
                activity_bias: -softplus(e),
            }
        })
        .collect();
    let embeddings: Vec<f64> = (0..num_items * dim).map(|_| latent.sample(&mut rng)).collect();
    let catalog = ItemCatalog::with_derived_categories(dim, embeddings)?;
    Ok((users, catalog))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub list_size: usize,
    pub max_depth: usize,
    pub initial_temper: f64,
    /// Fixed temper cost of every round on top of the skip fraction.
    pub temper_base_cost: f64,
    pub history_window: usize,
    /// Weight ratio between consecutive history entries, newest weighs 1.
    pub recency_decay: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            list_size: 10,
            max_depth: 20,
            initial_temper: 10.0,
            temper_base_cost: 0.2,
            history_window: 10,
            recency_decay: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub user: usize,
    /// Clicked item ids, oldest first, at most `history_window` long.
    pub history: VecDeque<usize>,
    pub temper: f64,
    pub depth: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub exposed: Vec<usize>,
    pub feedback: Vec<bool>,
    pub reward: f64,
    pub next: SessionState,
}

impl StepOutcome {
    pub fn clicks(&self) -> usize {
        self.feedback.iter().filter(|&&c| c).count()
    }
}

/// Mean over the list of `+1` per click and `-0.2` per skip.
pub fn list_reward(feedback: &[bool]) -> f64 {
    if feedback.is_empty() {
        return 0.0;
    }
    let clicks = feedback.iter().filter(|&&c| c).count() as f64;
    let skips = feedback.len() as f64 - clicks;
    (clicks * CLICK_REWARD + skips * SKIP_REWARD) / feedback.len() as f64
}

#[derive(Debug, Clone)]
pub enum ResponseModel {
    /// `sigmoid(u·v + b_u)` from the user and item latents.
    GroundTruth,
    Fitted(LogisticResponseModel),
}

#[derive(Debug, Clone)]
pub struct Environment {
    users: Vec<UserProfile>,
    catalog: ItemCatalog,
    session: SessionConfig,
    response: ResponseModel,
    /// Users new sessions are drawn from.
    pool: Vec<usize>,
}

impl Environment {
    pub fn new(
        users: Vec<UserProfile>,
        catalog: ItemCatalog,
        session: SessionConfig,
        response: ResponseModel,
    ) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::Empty("user population"));
        }
        if catalog.len() < session.list_size || session.list_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "catalog of {} items cannot fill lists of {}",
                catalog.len(),
                session.list_size
            )));
        }
        if session.max_depth == 0 || !(session.initial_temper > 0.0) {
            return Err(Error::InvalidConfig("max depth and initial temper must be positive".into()));
        }
        let feature_dim = users[0].features.len();
        for u in &users {
            if u.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    context: "user features",
                    expected: feature_dim,
                    actual: u.features.len(),
                });
            }
            if matches!(response, ResponseModel::GroundTruth) && u.latent.len() != catalog.dim() {
                return Err(Error::DimensionMismatch {
                    context: "user latent",
                    expected: catalog.dim(),
                    actual: u.latent.len(),
                });
            }
        }
        let pool = (0..users.len()).collect();
        Ok(Self {
            users,
            catalog,
            session,
            response,
            pool,
        })
    }

    pub fn synthetic(
        seed: u64,
        num_users: usize,
        num_items: usize,
        dim: usize,
        heterogeneity: f64,
        session: SessionConfig,
    ) -> Result<Self> {
        let (users, catalog) = gen_population(seed, num_users, num_items, dim, heterogeneity)?;
        Self::new(users, catalog, session, ResponseModel::GroundTruth)
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    pub fn catalog(&self) -> &ItemCatalog {
        &self.catalog
    }

    pub fn session_config(&self) -> &SessionConfig {
        &self.session
    }

    pub fn response(&self) -> &ResponseModel {
        &self.response
    }

    pub fn user_pool(&self) -> &[usize] {
        &self.pool
    }

    /// Same environment with sessions drawn only from `users`.
    pub fn restricted_to(&self, users: &[usize]) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::Empty("user pool"));
        }
        if let Some(&bad) = users.iter().find(|&&u| u >= self.users.len()) {
            return Err(Error::OutOfRange(format!("user {bad} not in population")));
        }
        let mut env = self.clone();
        env.pool = users.to_vec();
        Ok(env)
    }

    pub fn click_probability(&self, user: usize, item: usize) -> f64 {
        match &self.response {
            ResponseModel::GroundTruth => {
                let u = &self.users[user];
                let dot: f64 = u
                    .latent
                    .iter()
                    .zip(self.catalog.embedding(item))
                    .map(|(a, b)| a * b)
                    .sum();
                sigmoid(dot + u.activity_bias)
            }
            ResponseModel::Fitted(model) => model.probability(user, item),
        }
    }

    /// Expected click-through rate of `user` under uniformly random exposure.
    pub fn user_ctr(&self, user: usize) -> f64 {
        (0..self.catalog.len())
            .map(|i| self.click_probability(user, i))
            .sum::<f64>()
            / self.catalog.len() as f64
    }

    /// Users ordered by ascending ground-truth CTR (ties by id).
    pub fn users_by_activity(&self) -> Vec<usize> {
        let ctr: Vec<f64> = (0..self.users.len()).map(|u| self.user_ctr(u)).collect();
        let mut order: Vec<usize> = (0..self.users.len()).collect();
        order.sort_by(|&a, &b| ctr[a].total_cmp(&ctr[b]).then(a.cmp(&b)));
        order
    }

    pub fn start_session(&self, user: usize) -> SessionState {
        SessionState {
            user,
            history: VecDeque::with_capacity(self.session.history_window),
            temper: self.session.initial_temper,
            depth: 0,
            done: false,
        }
    }

    /// New session for a user drawn uniformly from the pool.
    pub fn sample_session<R: Rng + ?Sized>(&self, rng: &mut R) -> SessionState {
        let user = self.pool[rng.random_range(0..self.pool.len())];
        self.start_session(user)
    }

    pub fn respond<R: Rng + ?Sized>(
        &self,
        state: &SessionState,
        list: &[usize],
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::SessionDone);
        }
        if list.len() != self.session.list_size {
            return Err(Error::DimensionMismatch {
                context: "recommendation list",
                expected: self.session.list_size,
                actual: list.len(),
            });
        }
        for (i, &item) in list.iter().enumerate() {
            if item >= self.catalog.len() {
                return Err(Error::OutOfRange(format!("item {item} not in catalog")));
            }
            if list[..i].contains(&item) {
                return Err(Error::InvalidConfig(format!("item {item} listed twice")));
            }
        }
        let feedback: Vec<bool> = list
            .iter()
            .map(|&item| rng.random::<f64>() < self.click_probability(state.user, item))
            .collect();
        Ok(self.apply_feedback(state, list, feedback))
    }

    /// Session transition for already-known feedback.
    pub fn apply_feedback(&self, state: &SessionState, list: &[usize], feedback: Vec<bool>) -> StepOutcome {
        let reward = list_reward(&feedback);
        let clicked = feedback.iter().filter(|&&c| c).count() as f64;
        let click_fraction = clicked / feedback.len().max(1) as f64;

        let mut next = state.clone();
        for (&item, &c) in list.iter().zip(&feedback) {
            if c {
                next.history.push_back(item);
                if next.history.len() > self.session.history_window {
                    next.history.pop_front();
                }
            }
        }
        next.temper -= self.session.temper_base_cost + (1.0 - click_fraction);
        next.depth += 1;
        next.done = next.temper <= 0.0 || next.depth >= self.session.max_depth;
        StepOutcome {
            exposed: list.to_vec(),
            feedback,
            reward,
            next,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.catalog.dim() + self.users[0].features.len() + 2
    }

    /// Recency-weighted mean of clicked item embeddings, then the user's static
    /// features, then depth and temper normalized by their caps.
    pub fn encode_state(&self, state: &SessionState) -> Vec<f64> {
        let dim = self.catalog.dim();
        let mut out = Vec::with_capacity(self.state_dim());
        let mut history = vec![0.0; dim];
        let mut total = 0.0;
        let mut weight = 1.0;
        for &item in state.history.iter().rev() {
            for (h, v) in history.iter_mut().zip(self.catalog.embedding(item)) {
                *h += weight * v;
            }
            total += weight;
            weight *= self.session.recency_decay;
        }
        if total > 0.0 {
            history.iter_mut().for_each(|h| *h /= total);
        }
        out.extend_from_slice(&history);
        out.extend_from_slice(&self.users[state.user].features);
        out.push(state.depth as f64 / self.session.max_depth as f64);
        out.push(state.temper / self.session.initial_temper);
        out
    }
}

// --- population checkpoint ---------------------------------------------------

const POPULATION_MAGIC: &[u8; 8] = b"UOEPPOP1";

/// Binary checkpoint: magic, `u64` users, items, latent dim, feature dim, then
/// per user latent, bias and features, then item embeddings and categories.
/// All reals little-endian `f64`.
pub fn write_population(path: &Path, users: &[UserProfile], catalog: &ItemCatalog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let feature_dim = users.first().map_or(0, |u| u.features.len());
    w.write_all(POPULATION_MAGIC)?;
    for v in [users.len(), catalog.len(), catalog.dim(), feature_dim] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for u in users {
        for x in u.latent.iter().chain([&u.activity_bias]).chain(&u.features) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for x in catalog.embeddings() {
        w.write_all(&x.to_le_bytes())?;
    }
    for &c in catalog.categories() {
        w.write_all(&(c as u64).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_population(path: &Path) -> Result<(Vec<UserProfile>, ItemCatalog)> {
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_owned(),
        reason: reason.to_owned(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != POPULATION_MAGIC {
        return Err(bad("bad magic"));
    }
    let num_users = read_u64(&mut r)? as usize;
    let num_items = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let feature_dim = read_u64(&mut r)? as usize;
    if num_users > 1 << 24 || num_items > 1 << 24 || dim > 1 << 12 || feature_dim > 1 << 12 {
        return Err(bad("implausible dimensions"));
    }
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut buf = [0u8; 8];
        (0..n)
            .map(|_| {
                r.read_exact(&mut buf)?;
                Ok(f64::from_le_bytes(buf))
            })
            .collect()
    };
    let mut users = Vec::with_capacity(num_users);
    for id in 0..num_users {
        let latent = read_f64s(dim)?;
        let activity_bias = read_f64s(1)?[0];
        let features = read_f64s(feature_dim)?;
        users.push(UserProfile {
            id,
            latent,
            activity_bias,
            features,
        });
    }
    let embeddings = read_f64s(num_items * dim)?;
    let categories = (0..num_items)
        .map(|_| read_u64(&mut r).map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let catalog = ItemCatalog::new(dim, embeddings, categories).map_err(|e| bad(&e.to_string()))?;
    Ok((users, catalog))
}

// --- interaction log ------------------------------------------------------------

/// One row of the interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user_id: u64,
    pub item_id: u64,
    pub clicked: bool,
    pub timestamp: f64,
    pub features: Vec<f64>,
}

/// Reads `user_id,item_id,label,timestamp,feat_0..feat_k` rows and returns
/// them in chronological order. Every malformed row is reported with its line.
pub fn read_interaction_log(path: &Path) -> Result<Vec<InteractionRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let expected = ["user_id", "item_id", "label", "timestamp"];
    let header_ok = headers.len() > expected.len()
        && expected.iter().zip(headers.iter()).all(|(a, b)| *a == b)
        && headers
            .iter()
            .skip(expected.len())
            .enumerate()
            .all(|(k, h)| h == format!("feat_{k}"));
    if !header_ok {
        return Err(Error::MalformedLog {
            rows: vec![(
                1,
                format!(
                    "header must be user_id,item_id,label,timestamp,feat_0..feat_k; got {}",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            )],
        });
    }
    let feature_count = headers.len() - expected.len();
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                bad.push((line, e.to_string()));
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line() as usize);
        match parse_row(&row, feature_count) {
            Ok(r) => records.push(r),
            Err(reason) => bad.push((line, reason)),
        }
    }
    if !bad.is_empty() {
        return Err(Error::MalformedLog { rows: bad });
    }
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(records)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MalformedLog {
            rows: vec![(1, format!("{other:?}"))],
        },
    }
}

fn parse_row(row: &csv::StringRecord, feature_count: usize) -> std::result::Result<InteractionRecord, String> {
    if row.len() != 4 + feature_count {
        return Err(format!("expected {} fields, found {}", 4 + feature_count, row.len()));
    }
    let int = |i: usize, name: &str| row[i].parse::<u64>().map_err(|_| format!("bad {name} {:?}", &row[i]));
    let real = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let v = row[i].parse::<f64>().map_err(|_| format!("bad {name} {:?}", &row[i]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite {name}"))
        }
    };
    let clicked = match &row[2] {
        "0" => false,
        "1" => true,
        other => return Err(format!("label must be 0 or 1, got {other:?}")),
    };
    Ok(InteractionRecord {
        user_id: int(0, "user_id")?,
        item_id: int(1, "item_id")?,
        clicked,
        timestamp: real(3, "timestamp")?,
        features: (0..feature_count)
            .map(|k| real(4 + k, "feature"))
            .collect::<std::result::Result<_, _>>()?,
    })
}

pub fn write_interaction_log(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = records.first().map_or(0, |r| r.features.len());
    write!(w, "user_id,item_id,label,timestamp")?;
    for i in 0..k {
        write!(w, ",feat_{i}")?;
    }
    writeln!(w)?;
    for r in records {
        write!(w, "{},{},{},{}", r.user_id, r.item_id, u8::from(r.clicked), r.timestamp)?;
        for f in &r.features {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Random exposures labelled by the environment's response model.
pub fn synthesize_log(env: &Environment, rows: usize, seed: u64) -> Vec<InteractionRecord> {
    let mut rng = rng::stream(seed, rng::streams::ROLLOUT);
    (0..rows)
        .map(|t| {
            let user = env.pool[rng.random_range(0..env.pool.len())];
            let item = rng.random_range(0..env.catalog.len());
            let clicked = rng.random::<f64>() < env.click_probability(user, item);
            InteractionRecord {
                user_id: user as u64,
                item_id: item as u64,
                clicked,
                timestamp: t as f64,
                features: env.users[user].features.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogFitConfig {
    pub min_rows: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogFitConfig {
    fn default() -> Self {
        Self {
            min_rows: 10,
            epochs: 400,
            learning_rate: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// `p(click) = sigmoid(f_u·q_i + b_u + c_i)` where `f_u` are the logged user
/// features and `q_i`, `b_u`, `c_i` are fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticResponseModel {
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
    user_features: Vec<Vec<f64>>,
    user_bias: Vec<f64>,
    item_embeddings: Vec<f64>,
    item_bias: Vec<f64>,
    dim: usize,
}

impl LogisticResponseModel {
    pub fn probability(&self, user: usize, item: usize) -> f64 {
        let q = &self.item_embeddings[item * self.dim..(item + 1) * self.dim];
        let dot: f64 = self.user_features[user].iter().zip(q).map(|(a, b)| a * b).sum();
        sigmoid(dot + self.user_bias[user] + self.item_bias[item])
    }

    pub fn user_index(&self, user_id: u64) -> Option<usize> {
        self.user_ids.binary_search(&user_id).ok()
    }

    pub fn item_index(&self, item_id: u64) -> Option<usize> {
        self.item_ids.binary_search(&item_id).ok()
    }

    /// Probability for logged ids; `None` for ids never seen in training.
    pub fn predict(&self, user_id: u64, item_id: u64) -> Option<f64> {
        Some(self.probability(self.user_index(user_id)?, self.item_index(item_id)?))
    }

    /// Mean negative log-likelihood over the records with known ids.
    pub fn log_loss(&self, records: &[InteractionRecord]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for r in records {
            if let Some(p) = self.predict(r.user_id, r.item_id) {
                total += bernoulli_nll(p, r.clicked);
                n += 1;
            }
        }
        total / n.max(1) as f64
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Environment whose users, catalog and responses come from this model.
    pub fn into_environment(self, session: SessionConfig) -> Result<Environment> {
        let users = self
            .user_features
            .iter()
            .enumerate()
            .map(|(id, f)| UserProfile {
                id,
                latent: f.clone(),
                activity_bias: self.user_bias[id],
                features: f.clone(),
            })
            .collect();
        let catalog = ItemCatalog::with_derived_categories(self.dim, self.item_embeddings.clone())?;
        Environment::new(users, catalog, session, ResponseModel::Fitted(self))
    }
}

pub(crate) fn bernoulli_nll(p: f64, y: bool) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Full-batch Adam on the logistic log-likelihood with a small L2 penalty.
pub fn fit_response_model(records: &[InteractionRecord], config: &LogFitConfig) -> Result<LogisticResponseModel> {
    if records.len() < config.min_rows.max(1) {
        return Err(Error::TooFewRows {
            found: records.len(),
            required: config.min_rows.max(1),
        });
    }
    let dim = records[0].features.len();
    if dim == 0 {
        return Err(Error::InvalidConfig("interaction log needs at least one feature column".into()));
    }
    let mut user_features: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut items: BTreeMap<u64, ()> = BTreeMap::new();
    for r in records {
        user_features.entry(r.user_id).or_insert_with(|| r.features.clone());
        items.insert(r.item_id, ());
    }
    let user_ids: Vec<u64> = user_features.keys().copied().collect();
    let item_ids: Vec<u64> = items.keys().copied().collect();
    let user_features: Vec<Vec<f64>> = user_features.into_values().collect();
    let rows: Vec<(usize, usize, f64)> = records
        .iter()
        .map(|r| {
            (
                user_ids.binary_search(&r.user_id).unwrap(),
                item_ids.binary_search(&r.item_id).unwrap(),
                if r.clicked { 1.0 } else { 0.0 },
            )
        })
        .collect();

    let (nu, ni) = (user_ids.len(), item_ids.len());
    // [item embeddings | item bias | user bias]
    let emb_len = ni * dim;
    let mut theta = vec![0.0; emb_len + ni + nu];
    let mut rng = rng::stream(config.seed, rng::streams::INIT);
    let init = Normal::new(0.0, 0.01).expect("positive std");
    for v in &mut theta[..emb_len] {
        *v = init.sample(&mut rng);
    }
    let mut adam = AdamState::new(theta.len(), config.learning_rate)?;
    let mut grad = vec![0.0; theta.len()];
    let scale = 1.0 / rows.len() as f64;
    for _ in 0..config.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &(u, i, y) in &rows {
            let f = &user_features[u];
            let q = &theta[i * dim..(i + 1) * dim];
            let logit: f64 =
                f.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + theta[emb_len + i] + theta[emb_len + ni + u];
            let err = (sigmoid(logit) - y) * scale;
            for (g, x) in grad[i * dim..(i + 1) * dim].iter_mut().zip(f) {
                *g += err * x;
            }
            grad[emb_len + i] += err;
            grad[emb_len + ni + u] += err;
        }
        for (g, t) in grad.iter_mut().zip(&theta) {
            *g += config.l2 * t;
        }
        adam_update(&mut adam, &mut theta, &grad)?;
    }
    Ok(LogisticResponseModel {
        user_ids,
        item_ids,
        user_features,
        user_bias: theta[emb_len + ni..].to_vec(),
        item_bias: theta[emb_len..emb_len + ni].to_vec(),
        item_embeddings: theta[..emb_len].to_vec(),
        dim,
    })
}

pub fn load_interaction_log(path: &Path, config: &LogFitConfig) -> Result<LogisticResponseModel> {
    let records = read_interaction_log(path)?;
    fit_response_model(&records, config)
}
