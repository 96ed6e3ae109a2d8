//! Shared domain types: states, actions, transitions and the replay buffer.

use std::collections::VecDeque;
use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the state space, in environment units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVec(Vec<f64>);

impl StateVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state entry {v}")));
        }
        Ok(StateVec(values))
    }

    pub fn zeros(dim: usize) -> Self {
        StateVec(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for StateVec {
    fn from(values: Vec<f64>) -> Self {
        StateVec(values)
    }
}

impl Deref for StateVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteAction(pub usize);

impl DiscreteAction {
    pub fn checked(id: usize, n_actions: usize) -> Result<Self> {
        if id < n_actions {
            Ok(DiscreteAction(id))
        } else {
            Err(Error::Action {
                action: id,
                n_actions,
            })
        }
    }

    pub fn id(self) -> usize {
        self.0
    }
}

/// One experience tuple `(s, a, s', r, done)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: StateVec,
    pub a: DiscreteAction,
    pub s_next: StateVec,
    pub r: f64,
    pub done: bool,
}

impl Transition {
    pub fn new(s: StateVec, a: DiscreteAction, s_next: StateVec, r: f64, done: bool) -> Result<Self> {
        if s.dim() != s_next.dim() {
            return Err(Error::Dimension {
                expected: s.dim(),
                got: s_next.dim(),
            });
        }
        if !r.is_finite() {
            return Err(Error::Numerical(format!("non-finite reward {r}")));
        }
        Ok(Transition {
            s,
            a,
            s_next,
            r,
            done,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.s.dim()
    }
}

/// Concatenate `s` with a one-hot encoding of `a` scaled by `action_weight`.
/// This is the embedding used wherever a distance over state-action pairs is
/// needed.
pub fn state_action_key(s: &[f64], a: DiscreteAction, n_actions: usize, action_weight: f64) -> Vec<f64> {
    let mut key = Vec::with_capacity(s.len() + n_actions);
    key.extend_from_slice(s);
    key.extend((0..n_actions).map(|i| if i == a.0 { action_weight } else { 0.0 }));
    key
}

/// Euclidean distance. Every norm in the crate goes through this.
pub fn l2_distance(x: &[f64], y: &[f64]) -> f64 {
    squared_distance(x, y).sqrt()
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 1_000_000;

/// Bounded FIFO replay buffer. Iteration order is insertion order.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    insert_count: u64,
    state_dim: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            insert_count: 0,
            state_dim: None,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert_count(&self) -> u64 {
        self.insert_count
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.state_dim
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.s.dim() != t.s_next.dim() {
            return Err(Error::Dimension {
                expected: t.s.dim(),
                got: t.s_next.dim(),
            });
        }
        match self.state_dim {
            Some(d) if d != t.s.dim() => {
                return Err(Error::Dimension {
                    expected: d,
                    got: t.s.dim(),
                })
            }
            _ => self.state_dim = Some(t.s.dim()),
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.insert_count += 1;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` draws, uniform with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{RngSeed, Stream};

    fn t(x: f64) -> Transition {
        Transition::new(vec![x, x].into(), DiscreteAction(0), vec![x + 1.0, x].into(), 0.0, false).unwrap()
    }

    #[test]
    fn push_into_empty() {
        let mut b = ReplayBuffer::new(4);
        b.push(t(1.0)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.get(0), Some(&t(1.0)));
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2);
        for x in [1.0, 2.0, 3.0] {
            b.push(t(x)).unwrap();
        }
        let v: Vec<_> = b.iter().cloned().collect();
        assert_eq!(v, vec![t(2.0), t(3.0)]);
        assert_eq!(b.insert_count(), 3);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let mut b = ReplayBuffer::new(4);
        b.push(t(1.0)).unwrap();
        let bad = Transition::new(vec![0.0; 3].into(), DiscreteAction(0), vec![0.0; 3].into(), 0.0, false).unwrap();
        assert!(matches!(b.push(bad), Err(Error::Dimension { expected: 2, got: 3 })));
        let mismatched = Transition {
            s: vec![0.0; 2].into(),
            a: DiscreteAction(0),
            s_next: vec![0.0; 3].into(),
            r: 0.0,
            done: false,
        };
        assert!(matches!(b.push(mismatched), Err(Error::Dimension { .. })));
    }

    #[test]
    fn singleton_sampling() {
        let mut b = ReplayBuffer::new(4);
        b.push(t(7.0)).unwrap();
        let mut rng = RngSeed(1).stream(Stream::Minibatch);
        let s = b.sample_uniform(3, &mut rng).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| **x == t(7.0)));
    }

    #[test]
    fn empty_sampling_errors() {
        let b = ReplayBuffer::new(4);
        let mut rng = RngSeed(1).stream(Stream::Minibatch);
        assert!(matches!(b.sample_uniform(1, &mut rng), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let mut b = ReplayBuffer::new(1000);
        for i in 0..1000 {
            b.push(t(i as f64)).unwrap();
        }
        let mut rng = RngSeed(3).stream(Stream::Minibatch);
        let n = 100_000;
        let mut counts = vec![0usize; 1000];
        for x in b.sample_uniform(n, &mut rng).unwrap() {
            counts[x.s[0] as usize] += 1;
        }
        let p = 1.0 / 1000.0;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        // per-item 3-sigma band; with 1000 items a handful of excursions are
        // expected, so bound the excursion count instead of requiring none
        let outside = counts.iter().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sd).count();
        assert!(outside <= 10, "{outside} items outside the 3-sigma band");
        // chi-square with 999 dof: mean 999, sd ~44.7
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 999.0 + 4.0 * (2.0f64 * 999.0).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..100 {
            b.push(t(i as f64)).unwrap();
        }
        let a: Vec<_> = b.sample_uniform(50, &mut RngSeed(9).stream(Stream::Minibatch)).unwrap();
        let c: Vec<_> = b.sample_uniform(50, &mut RngSeed(9).stream(Stream::Minibatch)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn state_action_key_layout() {
        let k = state_action_key(&[1.0, 2.0], DiscreteAction(1), 3, 0.5);
        assert_eq!(k, vec![1.0, 2.0, 0.0, 0.5, 0.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn push_never_changes_stored_items(cap in 1usize..20, xs in proptest::collection::vec(-10.0f64..10.0, 1..60)) {
                let mut b = ReplayBuffer::new(cap);
                for (i, &x) in xs.iter().enumerate() {
                    let before: Vec<_> = b.iter().cloned().collect();
                    b.push(t(x)).unwrap();
                    prop_assert!(b.len() <= cap);
                    let after: Vec<_> = b.iter().cloned().collect();
                    // surviving old items are unchanged and in order
                    let dropped = before.len() + 1 - after.len();
                    prop_assert_eq!(&before[dropped..], &after[..after.len() - 1]);
                    prop_assert_eq!(b.insert_count(), i as u64 + 1);
                }
            }
        }
    }
}
