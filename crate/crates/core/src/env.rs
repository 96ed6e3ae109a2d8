//! Built-in environments.
//!
//! `DiscretePendulumEnv` is an inverted pendulum balance task with three torque
//! levels and deterministic dynamics; only the initial state is random.
//! `LinearGaussianEnv` has linear-Gaussian dynamics whose mean map has a
//! Lipschitz constant computable in closed form, which makes it the reference
//! environment for the bound harness.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DiscreteAction, StateVec};
use crate::error::{Error, Result};
use crate::seed::{Rng, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub n_actions: usize,
    /// Maximum episode length.
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub s_next: StateVec,
    pub r: f64,
    pub done: bool,
}

pub trait Environment {
    fn spec(&self) -> EnvSpec;

    /// Draw an initial state from the initial-state distribution.
    fn reset(&self, rng: &mut Rng) -> StateVec;

    /// Sample `s' ~ P*(s, a)` and label it with the known reward.
    fn step(&self, s: &[f64], a: DiscreteAction, rng: &mut Rng) -> Result<Step>;

    /// The known reward function `r(s, a)`.
    fn reward(&self, s: &[f64], a: DiscreteAction) -> f64;

    /// Termination rule, applied to real and simulated next states alike.
    fn is_terminal(&self, s: &[f64]) -> bool;

    /// Declared bound `D1` with `|r(s, a)| <= D1` on every state.
    fn reward_bound(&self) -> f64;

    /// Axis-aligned box used for uniform (pre-training) sampling.
    fn state_box(&self) -> (Vec<f64>, Vec<f64>);

    fn check_action(&self, a: DiscreteAction) -> Result<()> {
        DiscreteAction::checked(a.0, self.spec().n_actions).map(|_| ())
    }

    /// Uniform draw over the state box.
    fn sample_state_uniform(&self, rng: &mut Rng) -> StateVec {
        let (lo, hi) = self.state_box();
        lo.iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
            .collect::<Vec<_>>()
            .into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub max_torque: f64,
    pub n_torques: usize,
    pub dt: f64,
    pub angle_bound: f64,
    pub velocity_bound: f64,
    pub init_angle: f64,
    pub init_velocity: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            gravity: 9.8,
            length: 1.0,
            mass: 1.0,
            max_torque: 5.0,
            n_torques: 3,
            dt: 0.05,
            angle_bound: 0.4,
            velocity_bound: 3.0,
            init_angle: 0.1,
            init_velocity: 0.1,
            horizon: 200,
            gamma: 0.95,
        }
    }
}

/// Inverted pendulum, angle measured from upright. State is `(angle, velocity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePendulumEnv {
    pub params: PendulumParams,
}

impl DiscretePendulumEnv {
    pub fn new(params: PendulumParams) -> Result<Self> {
        if params.n_torques < 2 {
            return Err(Error::config("env.n_torques", "need at least two torque levels"));
        }
        if !(params.dt > 0.0) || !(params.length > 0.0) || !(params.mass > 0.0) {
            return Err(Error::config("env.dt", "dt, length and mass must be positive"));
        }
        if params.horizon == 0 {
            return Err(Error::config("env.horizon", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&params.gamma) {
            return Err(Error::config("env.gamma", "must lie in [0, 1]"));
        }
        Ok(DiscretePendulumEnv { params })
    }

    /// Torque levels evenly spaced over `[-max_torque, max_torque]`.
    pub fn torque(&self, a: DiscreteAction) -> f64 {
        let p = &self.params;
        let n = p.n_torques as f64;
        -p.max_torque + 2.0 * p.max_torque * a.0 as f64 / (n - 1.0)
    }

    fn dynamics(&self, s: &[f64], torque: f64) -> [f64; 2] {
        let p = &self.params;
        let (th, om) = (s[0], s[1]);
        let acc = p.gravity / p.length * th.sin() + torque / (p.mass * p.length * p.length);
        // explicit Euler
        [th + p.dt * om, om + p.dt * acc]
    }
}

impl Default for DiscretePendulumEnv {
    fn default() -> Self {
        DiscretePendulumEnv {
            params: PendulumParams::default(),
        }
    }
}

impl Environment for DiscretePendulumEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            state_dim: 2,
            n_actions: self.params.n_torques,
            horizon: self.params.horizon,
            gamma: self.params.gamma,
        }
    }

    fn reset(&self, rng: &mut Rng) -> StateVec {
        let p = &self.params;
        let th = if p.init_angle > 0.0 {
            rng.random_range(-p.init_angle..p.init_angle)
        } else {
            0.0
        };
        let om = if p.init_velocity > 0.0 {
            rng.random_range(-p.init_velocity..p.init_velocity)
        } else {
            0.0
        };
        vec![th, om].into()
    }

    fn step(&self, s: &[f64], a: DiscreteAction, _rng: &mut Rng) -> Result<Step> {
        self.check_action(a)?;
        if s.len() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: s.len(),
            });
        }
        let next = self.dynamics(s, self.torque(a));
        Ok(Step {
            r: self.reward(s, a),
            done: self.is_terminal(&next),
            s_next: next.to_vec().into(),
        })
    }

    /// `1 - 0.5 u_th^2 - 0.1 u_om^2 - 0.05 u_tau^2` with each `u` the
    /// normalized magnitude clipped to `[0, 1]`. Equals 1 upright at rest with
    /// zero torque and never leaves `[0.35, 1]`.
    fn reward(&self, s: &[f64], a: DiscreteAction) -> f64 {
        let p = &self.params;
        let u_th = (s[0].abs() / p.angle_bound).min(1.0);
        let u_om = (s[1].abs() / p.velocity_bound).min(1.0);
        let u_tau = (self.torque(a).abs() / p.max_torque).min(1.0);
        1.0 - 0.5 * u_th * u_th - 0.1 * u_om * u_om - 0.05 * u_tau * u_tau
    }

    fn is_terminal(&self, s: &[f64]) -> bool {
        s[0].abs() > self.params.angle_bound || s[1].abs() > self.params.velocity_bound || !s.iter().all(|v| v.is_finite())
    }

    fn reward_bound(&self) -> f64 {
        1.0
    }

    fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        let p = &self.params;
        (
            vec![-p.angle_bound, -p.velocity_bound],
            vec![p.angle_bound, p.velocity_bound],
        )
    }
}

/// `s' = A s + B onehot(a) + sigma * xi`, `xi ~ N(0, I)`, reward
/// `-sum_i w_i s_i^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianEnv {
    pub dim: usize,
    pub n_actions: usize,
    /// Row-major `dim x dim`.
    pub a_mat: Vec<f64>,
    /// Row-major `dim x n_actions`.
    pub b_mat: Vec<f64>,
    pub sigma: Vec<f64>,
    pub reward_weights: Vec<f64>,
    /// Half-width of the uniform initial box; 0 gives a point mass at the origin.
    pub init_scale: f64,
    /// Half-width of the sampling box used for pre-training.
    pub box_half_width: f64,
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinGaussParams {
    pub dim: usize,
    pub n_actions: usize,
    pub sigma: f64,
    /// Target operator norm of `A`.
    pub a_norm: f64,
    pub b_scale: f64,
    pub init_scale: f64,
    pub box_half_width: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub matrix_seed: u64,
}

impl Default for LinGaussParams {
    fn default() -> Self {
        LinGaussParams {
            dim: 4,
            n_actions: 2,
            sigma: 0.1,
            a_norm: 0.9,
            b_scale: 0.3,
            init_scale: 0.5,
            box_half_width: 1.0,
            horizon: 100,
            gamma: 0.95,
            matrix_seed: 7,
        }
    }
}

impl LinearGaussianEnv {
    /// Random `A` rescaled to operator norm `a_norm`, random `B`, isotropic noise.
    pub fn from_params(p: &LinGaussParams) -> Result<Self> {
        if p.dim == 0 || p.n_actions == 0 {
            return Err(Error::config("env.dim", "dim and n_actions must be positive"));
        }
        if p.sigma < 0.0 {
            return Err(Error::config("env.sigma", "must be nonnegative"));
        }
        let mut rng = RngSeed(p.matrix_seed).substream(0);
        let d = p.dim;
        let mut a: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = operator_norm(&a, d, d);
        if norm > 0.0 {
            a.iter_mut().for_each(|v| *v *= p.a_norm / norm);
        }
        let b: Vec<f64> = (0..d * p.n_actions)
            .map(|_| p.b_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(LinearGaussianEnv {
            dim: d,
            n_actions: p.n_actions,
            a_mat: a,
            b_mat: b,
            sigma: vec![p.sigma; d],
            reward_weights: vec![1.0 / d as f64; d],
            init_scale: p.init_scale,
            box_half_width: p.box_half_width,
            horizon: p.horizon,
            gamma: p.gamma,
        })
    }

    pub fn identity(dim: usize, n_actions: usize, sigma: f64) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        LinearGaussianEnv {
            dim,
            n_actions,
            a_mat: a,
            b_mat: vec![0.0; dim * n_actions],
            sigma: vec![sigma; dim],
            reward_weights: vec![1.0 / dim as f64; dim],
            init_scale: 0.0,
            box_half_width: 1.0,
            horizon: 100,
            gamma: 0.95,
        }
    }

    /// True mean `mu(s, a) = A s + B e_a`.
    pub fn mean(&self, s: &[f64], a: DiscreteAction) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let row = &self.a_mat[i * d..(i + 1) * d];
                row.iter().zip(s).map(|(x, y)| x * y).sum::<f64>() + self.b_mat[i * self.n_actions + a.0]
            })
            .collect()
    }

    /// Per-dimension noise variance `sigma^2(s, a)` (state independent).
    pub fn variance(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }

    /// Lipschitz constant of `mu` with respect to the key
    /// `(s, action_weight * onehot(a))`: the operator norm of `[A, B / w]`.
    pub fn mean_lipschitz(&self, action_weight: f64) -> f64 {
        let d = self.dim;
        let cols = d + self.n_actions;
        let mut m = vec![0.0; d * cols];
        for i in 0..d {
            m[i * cols..i * cols + d].copy_from_slice(&self.a_mat[i * d..(i + 1) * d]);
            for j in 0..self.n_actions {
                m[i * cols + d + j] = self.b_mat[i * self.n_actions + j] / action_weight;
            }
        }
        operator_norm(&m, d, cols)
    }

    /// Closed-form reward constants on the ball `|s| <= radius`:
    /// `(L1, D1) = (2 max_i w_i radius, max_i w_i radius^2)`.
    pub fn reward_constants(&self, radius: f64) -> (f64, f64) {
        let wmax = self.reward_weights.iter().cloned().fold(0.0, f64::max);
        (2.0 * wmax * radius, wmax * radius * radius)
    }
}

impl Environment for LinearGaussianEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            state_dim: self.dim,
            n_actions: self.n_actions,
            horizon: self.horizon,
            gamma: self.gamma,
        }
    }

    fn reset(&self, rng: &mut Rng) -> StateVec {
        if self.init_scale > 0.0 {
            (0..self.dim)
                .map(|_| rng.random_range(-self.init_scale..self.init_scale))
                .collect::<Vec<_>>()
                .into()
        } else {
            StateVec::zeros(self.dim)
        }
    }

    fn step(&self, s: &[f64], a: DiscreteAction, rng: &mut Rng) -> Result<Step> {
        self.check_action(a)?;
        if s.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: s.len(),
            });
        }
        let mut next = self.mean(s, a);
        for (x, sd) in next.iter_mut().zip(&self.sigma) {
            if *sd > 0.0 {
                *x += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Step {
            r: self.reward(s, a),
            done: false,
            s_next: next.into(),
        })
    }

    fn reward(&self, s: &[f64], _a: DiscreteAction) -> f64 {
        -s.iter().zip(&self.reward_weights).map(|(x, w)| w * x * x).sum::<f64>()
    }

    fn is_terminal(&self, s: &[f64]) -> bool {
        !s.iter().all(|v| v.is_finite())
    }

    /// Bound over the sampling box.
    fn reward_bound(&self) -> f64 {
        let r2 = self.box_half_width * self.box_half_width * self.dim as f64;
        self.reward_constants(r2.sqrt()).1
    }

    fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.box_half_width; self.dim], vec![self.box_half_width; self.dim])
    }
}

/// Largest singular value of a row-major `rows x cols` matrix by power
/// iteration on `M^T M`.
pub fn operator_norm(m: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(m.len(), rows * cols);
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..1000 {
        let mv: Vec<f64> = (0..rows)
            .map(|i| m[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut mtmv = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                mtmv[j] += m[i * cols + j] * mv[i];
            }
        }
        let n = crate::data::l2_norm(&mtmv);
        if n == 0.0 {
            return 0.0;
        }
        v = mtmv.iter().map(|x| x / n).collect();
        let new_sigma = n.sqrt();
        if (new_sigma - sigma).abs() <= 1e-14 * new_sigma {
            sigma = new_sigma;
            break;
        }
        sigma = new_sigma;
    }
    sigma
}

/// Named environment selected from config.
#[derive(Debug, Clone)]
pub enum EnvKind {
    Pendulum(DiscretePendulumEnv),
    LinGauss(LinearGaussianEnv),
}

impl EnvKind {
    pub fn as_env(&self) -> &dyn Environment {
        match self {
            EnvKind::Pendulum(e) => e,
            EnvKind::LinGauss(e) => e,
        }
    }
}
