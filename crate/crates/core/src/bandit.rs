//! Two-armed Thompson sampling that picks which regularizer is active.
//!
//! Arms only gain successes: a failed round leaves both posteriors untouched.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 16.0;
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Stability,
    Diversity,
}

impl Arm {
    fn index(self) -> usize {
        match self {
            Arm::Stability => 0,
            Arm::Diversity => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    pub arms: [BetaParams; 2],
    pub lambda: f64,
    pub pending: Option<Arm>,
    pub last_selected: Option<Arm>,
    /// Last smoothed evaluation return, `None` before the first observation.
    pub last_return: Option<f64>,
    pub window: usize,
    recent: VecDeque<f64>,
}

impl BanditState {
    pub fn new(lambda: f64, window: usize) -> Result<Self> {
        if !(lambda >= 0.0) || window == 0 {
            return Err(Error::InvalidConfig(format!(
                "bandit needs lambda >= 0 and window >= 1 (got {lambda}, {window})"
            )));
        }
        Ok(Self {
            arms: [BetaParams { a: 1.0, b: 1.0 }; 2],
            lambda,
            pending: None,
            last_selected: None,
            last_return: None,
            window,
            recent: VecDeque::with_capacity(window),
        })
    }

    pub fn params(&self, arm: Arm) -> BetaParams {
        self.arms[arm.index()]
    }

    /// `(λ1, λ2)` for an arm.
    pub fn weights(&self, arm: Arm) -> (f64, f64) {
        match arm {
            Arm::Stability => (self.lambda, 0.0),
            Arm::Diversity => (0.0, self.lambda),
        }
    }

    /// Draws one sample per posterior and pulls the larger; ties go to stability.
    pub fn select_arm<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Arm, (f64, f64)) {
        let draw = |p: BetaParams, rng: &mut R| Beta::new(p.a, p.b).expect("positive beta parameters").sample(rng);
        let s = draw(self.arms[0], rng);
        let d = draw(self.arms[1], rng);
        let arm = if d > s { Arm::Diversity } else { Arm::Stability };
        self.pending = Some(arm);
        self.last_selected = Some(arm);
        (arm, self.weights(arm))
    }

    /// Scores the pending arm against the previous return. The first
    /// observation only records the baseline. Returns whether the arm was
    /// rewarded.
    pub fn observe(&mut self, next_return: f64) -> Result<bool> {
        let arm = self.pending.take().ok_or(Error::NoPendingArm)?;
        let improved = self.last_return.is_some_and(|last| next_return > last);
        if improved {
            self.arms[arm.index()].a += 1.0;
        }
        self.last_return = Some(next_return);
        Ok(improved)
    }

    /// Pushes an evaluation mean into the moving window and observes the
    /// window average.
    pub fn observe_evaluation(&mut self, evaluation_mean: f64) -> Result<bool> {
        if self.pending.is_none() {
            return Err(Error::NoPendingArm);
        }
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(evaluation_mean);
        let avg = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.observe(avg)
    }

    pub fn smoothed_return(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }
}

/// Runs `rounds` select/observe cycles where each arm improves the return
/// with a fixed probability; returns how often each arm was selected.
pub fn simulate_stationary<R: Rng + ?Sized>(
    state: &mut BanditState,
    improve_prob: [f64; 2],
    rounds: usize,
    rng: &mut R,
) -> Result<[usize; 2]> {
    let mut counts = [0usize; 2];
    let mut level = 0.0;
    // seed the baseline so the first round is scored
    state.pending = Some(Arm::Stability);
    state.observe(level)?;
    for _ in 0..rounds {
        let (arm, _) = state.select_arm(rng);
        counts[arm.index()] += 1;
        level += if rng.random::<f64>() < improve_prob[arm.index()] { 1.0 } else { -1.0 };
        state.observe(level)?;
    }
    Ok(counts)
}
