//! DQN learner: bootstrap target with a frozen copy, single-sample
//! semi-gradient update, periodic target sync and epsilon-greedy acting.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DiscreteAction, Transition};
use crate::error::{Error, Result};
use crate::nn::{Activation, GradVec, MlpParams};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub alpha: f64,
    pub gamma: f64,
    pub sync_period: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            alpha: 1e-3,
            gamma: 0.99,
            sync_period: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub theta: MlpParams,
    pub theta_minus: MlpParams,
    pub alpha: f64,
    pub gamma: f64,
    /// Updates between `theta_minus <- theta`; 0 disables automatic syncs.
    pub sync_period: u64,
    pub updates: u64,
    pub syncs: u64,
}

/// Outcome of one update, for logging and audits.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateInfo {
    pub target: f64,
    pub q: f64,
    pub td_error: f64,
    pub synced: bool,
}

impl QNetwork {
    pub fn new(state_dim: usize, n_actions: usize, cfg: &AgentConfig, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(n_actions);
        let theta = MlpParams::new(&sizes, cfg.activation, Activation::Linear, rng);
        Self::from_params(theta, cfg.alpha, cfg.gamma, cfg.sync_period)
    }

    pub fn from_params(theta: MlpParams, alpha: f64, gamma: f64, sync_period: u64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::config("agent.alpha", format!("must be > 0, got {alpha}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::config("agent.gamma", format!("must lie in [0, 1], got {gamma}")));
        }
        Ok(QNetwork {
            theta_minus: theta.clone(),
            theta,
            alpha,
            gamma,
            sync_period,
            updates: 0,
            syncs: 0,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.theta.output_dim()
    }

    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.theta.forward(s)
    }

    pub fn q_values_target(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.theta_minus.forward(s)
    }

    /// `(Q(s, a; theta), grad_theta Q(s, a; theta))`.
    pub fn q_and_grad(&self, s: &[f64], a: DiscreteAction) -> Result<(f64, GradVec)> {
        if a.0 >= self.n_actions() {
            return Err(Error::Action {
                action: a.0,
                n_actions: self.n_actions(),
            });
        }
        let tape = self.theta.forward_tape(s)?;
        let mut upstream = vec![0.0; self.n_actions()];
        upstream[a.0] = 1.0;
        let (g, _) = self.theta.backward(&tape, &upstream)?;
        Ok((tape.output[a.0], g))
    }

    /// `max_a Q(s, a; theta_minus)`.
    pub fn max_q_target(&self, s: &[f64]) -> Result<f64> {
        Ok(self.q_values_target(s)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// `y = r + gamma * max_a' Q(s', a'; theta_minus)`, no bootstrap when done.
    pub fn dqn_target(&self, t: &Transition) -> Result<f64> {
        let y = if t.done {
            t.r
        } else {
            t.r + self.gamma * self.max_q_target(&t.s_next)?
        };
        if !y.is_finite() {
            return Err(Error::Numerical(format!("non-finite target {y}")));
        }
        Ok(y)
    }

    /// `alpha (y - Q(s, a)) grad_theta Q(s, a)` at the current parameters.
    pub fn update_step(&self, t: &Transition) -> Result<(GradVec, UpdateInfo)> {
        let (q, g) = self.q_and_grad(&t.s, t.a)?;
        let y = self.dqn_target(t)?;
        let td = y - q;
        let step: GradVec = g.iter().map(|gi| self.alpha * td * gi).collect();
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite update (td error {td})")));
        }
        Ok((
            step,
            UpdateInfo {
                target: y,
                q,
                td_error: td,
                synced: false,
            },
        ))
    }

    fn count_update(&mut self) -> bool {
        self.updates += 1;
        if self.sync_period > 0 && self.updates % self.sync_period == 0 {
            self.target_sync();
            true
        } else {
            false
        }
    }

    /// `theta <- theta + alpha (y - Q(s, a; theta)) grad Q(s, a; theta)`.
    pub fn dqn_update(&mut self, t: &Transition) -> Result<UpdateInfo> {
        let (step, mut info) = self.update_step(t)?;
        self.theta.add_scaled(&step, 1.0)?;
        info.synced = self.count_update();
        Ok(info)
    }

    /// Average of the per-sample updates, all evaluated at the same
    /// parameters. Counts as one update for target syncing.
    pub fn dqn_update_batch(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut acc = vec![0.0; self.theta.num_params()];
        let mut sq = 0.0;
        for t in batch {
            let (step, info) = self.update_step(t)?;
            sq += info.td_error * info.td_error;
            for (a, s) in acc.iter_mut().zip(&step) {
                *a += s;
            }
        }
        self.theta.add_scaled(&acc, 1.0 / batch.len() as f64)?;
        self.count_update();
        Ok(sq / batch.len() as f64)
    }

    /// `theta_minus <- theta`.
    pub fn target_sync(&mut self) {
        self.theta_minus = self.theta.clone();
        self.syncs += 1;
    }

    /// Argmax with ties going to the lowest action id.
    pub fn act_greedy(&self, s: &[f64]) -> Result<DiscreteAction> {
        Ok(DiscreteAction(argmax(&self.q_values(s)?)))
    }

    /// One uniform draw decides exploration; a second picks the random
    /// action when exploring.
    pub fn act_epsilon_greedy(&self, s: &[f64], eps: f64, rng: &mut Rng) -> Result<DiscreteAction> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Numerical(format!("exploration probability {eps} outside [0, 1]")));
        }
        let u: f64 = rng.random();
        if u < eps {
            Ok(DiscreteAction(rng.random_range(0..self.n_actions())))
        } else {
            self.act_greedy(s)
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear decay from `start` to `end` over the first `fraction` of
/// `total_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
    pub total_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(total_steps: u64) -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            fraction: 0.2,
            total_steps,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        let span = (self.fraction * self.total_steps as f64).max(1.0);
        let t = (step as f64 / span).min(1.0);
        (self.start + (self.end - self.start) * t).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::seed::{RngSeed, Stream};

    fn tr(s: Vec<f64>, a: usize, sn: Vec<f64>, r: f64, done: bool) -> Transition {
        Transition::new(s.into(), DiscreteAction(a), sn.into(), r, done).unwrap()
    }

    fn linear_q(theta: f64, alpha: f64, gamma: f64) -> QNetwork {
        let mut l = Layer::zeros(1, 1, Activation::Linear);
        l.w[0] = theta;
        QNetwork::from_params(MlpParams::from_layers(vec![l]).unwrap(), alpha, gamma, 0).unwrap()
    }

    fn random_q(seed: u64, gamma: f64) -> QNetwork {
        let mut r = RngSeed(seed).stream(Stream::AgentInit);
        let cfg = AgentConfig {
            hidden: vec![8, 6],
            gamma,
            alpha: 0.05,
            ..Default::default()
        };
        let mut q = QNetwork::new(3, 4, &cfg, &mut r).unwrap();
        // make the target copy differ so the frozen-target contract is visible
        let th = q.theta_minus.flat().iter().map(|v| v * 0.7 + 0.01).collect::<Vec<_>>();
        q.theta_minus.set_flat(&th).unwrap();
        q
    }

    #[test]
    fn myopic_and_terminal_targets() {
        let q = random_q(1, 0.0);
        assert_eq!(q.dqn_target(&tr(vec![0.1, 0.2, 0.3], 0, vec![1.0, 2.0, 3.0], 0.7, false)).unwrap(), 0.7);
        let q = random_q(1, 0.99);
        assert_eq!(q.dqn_target(&tr(vec![0.1, 0.2, 0.3], 0, vec![1.0, 2.0, 3.0], 1.0, true)).unwrap(), 1.0);
    }

    #[test]
    fn target_matches_reevaluation() {
        let q = random_q(2, 0.9);
        let sn = vec![0.3, -0.2, 0.5];
        let t = tr(vec![0.0; 3], 1, sn.clone(), 0.25, false);
        // straight-line forward pass of the target net
        let mut h = sn.clone();
        for (li, l) in q.theta_minus.layers.iter().enumerate() {
            let mut o = vec![0.0; l.out_dim];
            for i in 0..l.out_dim {
                let mut z = l.b[i];
                for j in 0..l.in_dim {
                    z += l.w[i * l.in_dim + j] * h[j];
                }
                o[i] = if li + 1 == q.theta_minus.layers.len() { z } else { z.tanh() };
            }
            h = o;
        }
        let m = h.iter().cloned().fold(f64::MIN, f64::max);
        assert!((q.dqn_target(&t).unwrap() - (0.25 + 0.9 * m)).abs() < 1e-12);
    }

    #[test]
    fn hand_update() {
        let mut q = linear_q(0.0, 0.1, 0.0);
        q.dqn_update(&tr(vec![1.0], 0, vec![0.0], 1.0, false)).unwrap();
        assert!((q.theta.layers[0].w[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_td_fixed_point() {
        let mut q = linear_q(0.5, 0.1, 0.0);
        let before = q.theta.clone();
        q.dqn_update(&tr(vec![2.0], 0, vec![0.0], 1.0, false)).unwrap();
        assert_eq!(q.theta, before);
    }

    #[test]
    fn update_is_gradient_descent_on_frozen_loss() {
        for seed in 0..20 {
            let mut q = random_q(seed, 0.9);
            let t = tr(vec![0.3, -0.1, 0.2], (seed % 4) as usize, vec![0.1, 0.4, -0.3], 0.5, false);
            let y = q.dqn_target(&t).unwrap();
            let theta0 = q.theta.flat();
            let loss = |th: &[f64]| {
                let mut net = q.theta.clone();
                net.set_flat(th).unwrap();
                let v = net.forward(&t.s).unwrap()[t.a.0];
                0.5 * (y - v) * (y - v)
            };
            let mut fd = vec![0.0; theta0.len()];
            for i in 0..theta0.len() {
                let mut p = theta0.clone();
                p[i] += 1e-6;
                let mut m = theta0.clone();
                m[i] -= 1e-6;
                fd[i] = (loss(&p) - loss(&m)) / 2e-6;
            }
            let alpha = q.alpha;
            let tm = q.theta_minus.clone();
            q.dqn_update(&t).unwrap();
            assert_eq!(q.theta_minus, tm);
            let theta1 = q.theta.flat();
            for i in 0..theta0.len() {
                let delta = theta1[i] - theta0[i];
                let expect = -alpha * fd[i];
                assert!((delta - expect).abs() <= 1e-5 * expect.abs().max(1e-3), "{delta} vs {expect}");
            }
        }
    }

    #[test]
    fn greedy_tie_rule_and_invariance() {
        let mut l = Layer::zeros(1, 3, Activation::Linear);
        l.b = vec![0.1, 0.9, 0.9];
        let q = QNetwork::from_params(MlpParams::from_layers(vec![l.clone()]).unwrap(), 0.1, 0.9, 0).unwrap();
        let mut r = RngSeed(0).stream(Stream::Explore);
        assert_eq!(q.act_epsilon_greedy(&[0.0], 0.0, &mut r).unwrap(), DiscreteAction(1));
        l.b.iter_mut().for_each(|b| *b += 5.0);
        let q = QNetwork::from_params(MlpParams::from_layers(vec![l]).unwrap(), 0.1, 0.9, 0).unwrap();
        assert_eq!(q.act_greedy(&[0.0]).unwrap(), DiscreteAction(1));
    }

    #[test]
    fn uniform_exploration() {
        let q = random_q(3, 0.9);
        let mut r = RngSeed(4).stream(Stream::Explore);
        let n = 100_000;
        let mut c = [0usize; 4];
        for _ in 0..n {
            c[q.act_epsilon_greedy(&[0.0; 3], 1.0, &mut r).unwrap().0] += 1;
        }
        let p = 0.25;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for k in c {
            assert!((k as f64 - n as f64 * p).abs() < 3.0 * sd, "{c:?}");
        }
    }

    #[test]
    fn sync_semantics() {
        let mut q = random_q(5, 0.9);
        q.target_sync();
        let t = tr(vec![0.0; 3], 0, vec![0.2, 0.1, 0.0], 0.3, false);
        let with_theta = 0.3 + 0.9 * q.q_values(&t.s_next).unwrap().into_iter().fold(f64::MIN, f64::max);
        assert_eq!(q.dqn_target(&t).unwrap(), with_theta);
        let snapshot = q.theta_minus.clone();
        q.target_sync();
        assert_eq!(q.theta_minus, snapshot);
    }

    #[test]
    fn sync_count_audit() {
        let mut q = random_q(6, 0.9);
        q.sync_period = 7;
        q.syncs = 0;
        let t = tr(vec![0.1, 0.1, 0.1], 2, vec![0.0; 3], 1.0, false);
        for _ in 0..100 {
            q.dqn_update(&t).unwrap();
        }
        assert_eq!(q.syncs, 100 / 7);
    }

    #[test]
    fn non_finite_target_errors() {
        let mut q = random_q(7, 0.9);
        let t = Transition {
            s: vec![0.0; 3].into(),
            a: DiscreteAction(0),
            s_next: vec![f64::NAN; 3].into(),
            r: 0.0,
            done: false,
        };
        assert!(matches!(q.dqn_update(&t), Err(Error::Numerical(_))));
    }

    #[test]
    fn epsilon_schedule() {
        let e = EpsilonSchedule::new(1000);
        assert_eq!(e.value(0), 1.0);
        assert!((e.value(100) - 0.525).abs() < 1e-12);
        assert!((e.value(200) - 0.05).abs() < 1e-12);
        assert!((e.value(999) - 0.05).abs() < 1e-12);
    }
}
