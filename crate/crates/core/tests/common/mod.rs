#![allow(dead_code)]

use rand::Rng;
use uoep_core::critic::{CriticBatch, CriticConfig, CriticKind, CriticNet};
use uoep_core::nn::Matrix;
use uoep_core::rng;

pub const PROBE_TAUS: [f64; 4] = [0.1, 0.3, 0.7, 0.9];

/// Inverse CDF of the return that is 0 or 1 with equal probability.
pub fn two_point_quantile(tau: f64) -> f64 {
    if tau < 0.5 {
        0.0
    } else {
        1.0
    }
}

/// Trains a critic on a single constant state-action pair whose one-step
/// return is 0 or 1 with equal probability, with no bootstrapping.
pub fn train_two_point(kind: CriticKind, kappa: f64, steps: usize, seed: u64) -> CriticNet {
    let mut cfg = CriticConfig::new(2, 2);
    cfg.kind = kind;
    cfg.seed = seed;
    let mut net = CriticNet::new(cfg).unwrap();
    let mut r = rng::seeded(seed ^ 0x7770);
    let batch_size = 64;
    let ones = Matrix::new(batch_size, 2, vec![0.5; batch_size * 2]).unwrap();
    for _ in 0..steps {
        let rewards: Vec<f64> = (0..batch_size).map(|_| f64::from(u8::from(r.random::<bool>()))).collect();
        let batch = CriticBatch {
            states: ones.clone(),
            actions: ones.clone(),
            rewards,
            next_states: ones.clone(),
            next_actions: ones.clone(),
            dones: vec![false; batch_size],
        };
        let loss = net.critic_loss(&batch, 32, 32, kappa, 0.0, &mut r).unwrap();
        net.apply_gradients(&loss.grads).unwrap();
        net.soft_update_target(0.01).unwrap();
    }
    net
}

pub fn probe(net: &CriticNet, taus: &[f64]) -> Vec<f64> {
    net.z_value(&[0.5, 0.5], &[0.5, 0.5], taus).unwrap()
}

/// Largest |Z(τ) − F⁻¹(τ)| over the probe levels.
pub fn two_point_error(net: &CriticNet) -> f64 {
    probe(net, &PROBE_TAUS)
        .iter()
        .zip(PROBE_TAUS)
        .map(|(z, t)| (z - two_point_quantile(t)).abs())
        .fold(0.0, f64::max)
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}
