//! Shared FIFO replay buffer for the whole actor population.

use rand::Rng;

use crate::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub exposed: Vec<usize>,
    pub feedback: Vec<bool>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Index of the actor that produced the action.
    pub actor_id: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    /// Slot the next push overwrites once full.
    next: usize,
    insertions: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            insertions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn insertions(&self) -> u64 {
        self.insertions
    }

    pub fn push(&mut self, transition: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[self.next] = transition;
        }
        self.next = (self.next + 1) % self.capacity;
        self.insertions += 1;
    }

    /// Live transitions, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity { 0 } else { self.next };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    fn indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch == 0 || self.storage.len() < batch {
            return Err(Error::Underfilled {
                size: self.storage.len(),
                requested: batch,
            });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.storage.len())).collect())
    }

    /// Uniform draws with replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self.indices(batch, rng)?.into_iter().map(|i| &self.storage[i]).collect())
    }

    pub fn sample_states<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&[f64]>> {
        Ok(self
            .indices(batch, rng)?
            .into_iter()
            .map(|i| self.storage[i].state.as_slice())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn t(tag: f64) -> Transition {
        Transition {
            state: vec![tag, 2.0 * tag],
            action: vec![tag],
            exposed: vec![0],
            feedback: vec![false],
            reward: -0.2,
            next_state: vec![tag, tag],
            done: false,
            actor_id: 0,
        }
    }

    #[test]
    fn push_and_evict() {
        let mut b = ReplayBuffer::new(2).unwrap();
        b.push(t(1.0));
        assert_eq!(b.len(), 1);
        b.push(t(2.0));
        b.push(t(3.0));
        let tags: Vec<f64> = b.iter().map(|x| x.state[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0]);
    }

    #[test]
    fn counts_after_many_pushes() {
        let mut b = ReplayBuffer::new(500).unwrap();
        for i in 0..1000 {
            b.push(t(i as f64));
        }
        assert_eq!(b.len(), 500);
        assert_eq!(b.insertions(), 1000);
        assert_eq!(b.iter().next().unwrap().state[0], 500.0);
    }

    #[test]
    fn underfilled_sampling_is_rejected() {
        let mut b = ReplayBuffer::new(10).unwrap();
        b.push(t(1.0));
        assert!(matches!(
            b.sample_minibatch(2, &mut rng::seeded(0)),
            Err(Error::Underfilled { size: 1, requested: 2 })
        ));
        let one = b.sample_minibatch(1, &mut rng::seeded(0)).unwrap();
        assert_eq!(one[0].state[0], 1.0);
        assert_eq!(b.sample_states(1, &mut rng::seeded(0)).unwrap()[0], &[1.0, 2.0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            b.push(t(i as f64));
        }
        let a: Vec<f64> = b.sample_minibatch(32, &mut rng::seeded(4)).unwrap().iter().map(|x| x.state[0]).collect();
        let c: Vec<f64> = b.sample_minibatch(32, &mut rng::seeded(4)).unwrap().iter().map(|x| x.state[0]).collect();
        assert_eq!(a, c);
        let s1 = b.sample_states(16, &mut rng::seeded(8)).unwrap();
        let s2 = b.sample_states(16, &mut rng::seeded(8)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..4 {
            b.push(t(i as f64));
        }
        let draws = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = rng::seeded(21);
        for _ in 0..draws / 4 {
            for x in b.sample_minibatch(4, &mut rng).unwrap() {
                counts[x.state[0] as usize] += 1;
            }
        }
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 / 4.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn sampled_state_mean_converges() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            b.push(t(i as f64 / 10.0));
        }
        let mut rng = rng::seeded(2);
        let states: Vec<&[f64]> = (0..10_000).flat_map(|_| b.sample_states(10, &mut rng).unwrap()).collect();
        let mean0 = states.iter().map(|s| s[0]).sum::<f64>() / states.len() as f64;
        let mean1 = states.iter().map(|s| s[1]).sum::<f64>() / states.len() as f64;
        assert!((mean0 - 0.45).abs() < 1e-2);
        assert!((mean1 - 0.9).abs() < 1e-2);
    }

    proptest! {
        #[test]
        fn fifo_window(capacity in 1usize..20, pushes in 0usize..60) {
            let mut b = ReplayBuffer::new(capacity).unwrap();
            for i in 0..pushes {
                b.push(t(i as f64));
            }
            prop_assert_eq!(b.len(), pushes.min(capacity));
            let live: Vec<f64> = b.iter().map(|x| x.state[0]).collect();
            let expected: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|i| i as f64).collect();
            prop_assert_eq!(live, expected);
        }
    }
}
