//! Estimated transition models `P(s, a) = N(mu(s, a), diag sigma^2(s, a))`.
//!
//! Three estimators are provided: a kernel density estimator with an
//! effective sample size, an MLP trained by Gaussian negative log-likelihood,
//! and a uniform-member ensemble of MLPs.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{squared_distance, state_action_key, DiscreteAction, ReplayBuffer, StateVec};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, MlpParams};
use crate::seed::Rng;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_VAR_CEILING: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBounds {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for VarianceBounds {
    fn default() -> Self {
        VarianceBounds {
            floor: DEFAULT_VAR_FLOOR,
            ceiling: DEFAULT_VAR_CEILING,
        }
    }
}

impl VarianceBounds {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.floor, self.ceiling)
    }
}

/// Diagonal Gaussian over the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianPrediction {
    pub fn sample(&self, rng: &mut Rng) -> StateVec {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
            .into()
    }

    pub fn total_variance(&self) -> f64 {
        self.var.iter().sum()
    }
}

pub trait TransitionModel {
    fn state_dim(&self) -> usize;

    /// Predictive distribution at `(s, a)`. `rng` is only consumed by models
    /// that randomize over members.
    fn predict(&self, s: &[f64], a: DiscreteAction, rng: &mut Rng) -> Result<GaussianPrediction>;
}

/// Predict and draw `s' ~ N(mean, var)`.
pub fn model_predict<M: TransitionModel + ?Sized>(
    model: &M,
    s: &[f64],
    a: DiscreteAction,
    rng: &mut Rng,
) -> Result<(GaussianPrediction, StateVec)> {
    let pred = model.predict(s, a, rng)?;
    let sample = pred.sample(rng);
    Ok((pred, sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `K(x) = 1` iff `x = 0` exactly.
    Indicator,
    /// `K(x) = exp(-|x|^2 / (2 h^2))`.
    Gaussian,
}

/// Kernel density estimator over `(s, a, s')` triples. The kernel acts on
/// the state-action key `(s, w * onehot(a))`; next-state moments are taken
/// per dimension with the shared kernel weight.
#[derive(Debug, Clone)]
pub struct KdeModel {
    keys: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
    pub kernel: Kernel,
    pub bandwidth: f64,
    pub n_actions: usize,
    pub action_weight: f64,
    pub bounds: VarianceBounds,
    /// Reset the bandwidth to the median pairwise key distance on each fit.
    pub auto_bandwidth: bool,
    state_dim: usize,
}

/// Unclamped KDE moments at one query.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n_eff: f64,
}

impl KdeModel {
    pub fn new(state_dim: usize, n_actions: usize, kernel: Kernel, bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive");
        KdeModel {
            keys: Vec::new(),
            next: Vec::new(),
            kernel,
            bandwidth,
            n_actions,
            action_weight: 1.0,
            bounds: VarianceBounds::default(),
            auto_bandwidth: false,
            state_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn key(&self, s: &[f64], a: DiscreteAction) -> Vec<f64> {
        state_action_key(s, a, self.n_actions, self.action_weight)
    }

    pub fn add(&mut self, s: &[f64], a: DiscreteAction, s_next: &[f64]) -> Result<()> {
        if s.len() != self.state_dim || s_next.len() != self.state_dim {
            return Err(Error::Dimension {
                expected: self.state_dim,
                got: if s.len() != self.state_dim { s.len() } else { s_next.len() },
            });
        }
        self.keys.push(self.key(s, a));
        self.next.push(s_next.to_vec());
        Ok(())
    }

    /// Replace the support with the contents of `data`.
    pub fn fit(&mut self, data: &ReplayBuffer) -> Result<()> {
        self.keys.clear();
        self.next.clear();
        for t in data.iter() {
            self.add(&t.s, t.a, &t.s_next)?;
        }
        if self.auto_bandwidth {
            if let Some(h) = self.median_bandwidth(512) {
                self.bandwidth = h;
            }
        }
        Ok(())
    }

    fn weight(&self, key: &[f64], support: &[f64]) -> f64 {
        match self.kernel {
            Kernel::Indicator => {
                if key == support {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::Gaussian => (-squared_distance(key, support) / (2.0 * self.bandwidth * self.bandwidth)).exp(),
        }
    }

    /// `n_eff(s, a) = sum_i K((s, a) - (s_i, a_i))`.
    pub fn effective_sample_size(&self, s: &[f64], a: DiscreteAction) -> f64 {
        let key = self.key(s, a);
        self.keys.iter().map(|k| self.weight(&key, k)).sum()
    }

    /// Kernel-weighted mean and population variance, before clamping.
    pub fn moments(&self, s: &[f64], a: DiscreteAction) -> Result<KdeMoments> {
        let key = self.key(s, a);
        let d = self.state_dim;
        let weights: Vec<f64> = self.keys.iter().map(|k| self.weight(&key, k)).collect();
        let n_eff: f64 = weights.iter().sum();
        if !(n_eff > 0.0) {
            return Err(Error::NoSupport);
        }
        let mut mean = vec![0.0; d];
        for (w, x) in weights.iter().zip(&self.next) {
            if *w != 0.0 {
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += w * v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_eff);
        let mut var = vec![0.0; d];
        for (w, x) in weights.iter().zip(&self.next) {
            if *w != 0.0 {
                for ((s2, v), m) in var.iter_mut().zip(x).zip(&mean) {
                    *s2 += w * (v - m) * (v - m);
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= n_eff);
        Ok(KdeMoments { mean, var, n_eff })
    }

    pub fn kde_estimate(&self, s: &[f64], a: DiscreteAction) -> Result<GaussianPrediction> {
        let m = self.moments(s, a)?;
        Ok(GaussianPrediction {
            var: m.var.iter().map(|v| self.bounds.clamp(*v)).collect(),
            mean: m.mean,
        })
    }

    /// Median pairwise key distance over a strided subsample of at most
    /// `max_points` support points.
    pub fn median_bandwidth(&self, max_points: usize) -> Option<f64> {
        median_pairwise_distance(&self.keys, max_points)
    }
}

pub fn median_pairwise_distance(points: &[Vec<f64>], max_points: usize) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let stride = points.len().div_ceil(max_points.max(2));
    let sub: Vec<&Vec<f64>> = points.iter().step_by(stride.max(1)).collect();
    let mut d = Vec::with_capacity(sub.len() * (sub.len() - 1) / 2);
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push(squared_distance(sub[i], sub[j]).sqrt());
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d[d.len() / 2];
    (m > 0.0).then_some(m)
}

impl TransitionModel for KdeModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict(&self, s: &[f64], a: DiscreteAction, _rng: &mut Rng) -> Result<GaussianPrediction> {
        self.kde_estimate(s, a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Lipschitz cap on the mean map; `None` disables spectral clipping.
    pub lipschitz_cap: Option<f64>,
    /// Predict `s' - s` and add `s` back.
    pub residual: bool,
    pub bounds: VarianceBounds,
}

impl Default for MlpModelConfig {
    fn default() -> Self {
        MlpModelConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 64,
            epochs: 20,
            lipschitz_cap: None,
            residual: true,
            bounds: VarianceBounds::default(),
        }
    }
}

/// MLP producing `(mean, log-variance)` heads. The log-variance is squashed
/// smoothly into `[ln floor, ln ceiling]` so predicted variances always
/// respect the bounds.
#[derive(Debug, Clone)]
pub struct MlpGaussianModel {
    pub net: MlpParams,
    pub cfg: MlpModelConfig,
    state_dim: usize,
    n_actions: usize,
    opt: Adam,
    fitted: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MlpGaussianModel {
    pub fn new(state_dim: usize, n_actions: usize, cfg: MlpModelConfig, rng: &mut Rng) -> Self {
        let mut sizes = vec![state_dim + n_actions];
        sizes.extend(&cfg.hidden);
        sizes.push(2 * state_dim);
        let mut net = MlpParams::new(&sizes, cfg.activation, Activation::Linear, rng);
        // start the log-variance head near the middle of its range
        let last = net.layers.last_mut().unwrap();
        for i in state_dim..2 * state_dim {
            for j in 0..last.in_dim {
                last.w[i * last.in_dim + j] *= 0.1;
            }
            last.b[i] = 0.0;
        }
        let opt = Adam::new(net.num_params(), cfg.lr);
        MlpGaussianModel {
            net,
            cfg,
            state_dim,
            n_actions,
            opt,
            fitted: false,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn input(&self, s: &[f64], a: DiscreteAction) -> Vec<f64> {
        state_action_key(s, a, self.n_actions, 1.0)
    }

    /// Squash a raw log-variance into `[ln floor, ln ceiling]`; returns the
    /// squashed value and its derivative with respect to the raw value.
    fn squash_logvar(&self, raw: f64) -> (f64, f64) {
        let hi = self.cfg.bounds.ceiling.ln();
        let lo = self.cfg.bounds.floor.ln();
        let u = hi - softplus(hi - raw);
        let du = sigmoid(hi - raw);
        let v = lo + softplus(u - lo);
        let dv = sigmoid(u - lo);
        (v, du * dv)
    }

    fn heads(&self, s: &[f64], out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.state_dim;
        let mean = (0..d)
            .map(|i| if self.cfg.residual { s[i] + out[i] } else { out[i] })
            .collect();
        let var = (0..d)
            .map(|i| self.cfg.bounds.clamp(self.squash_logvar(out[d + i]).0.exp()))
            .collect();
        (mean, var)
    }

    pub fn predict_gaussian(&self, s: &[f64], a: DiscreteAction) -> Result<GaussianPrediction> {
        if s.len() != self.state_dim {
            return Err(Error::Dimension {
                expected: self.state_dim,
                got: s.len(),
            });
        }
        let out = self.net.forward(&self.input(s, a))?;
        let (mean, var) = self.heads(s, &out);
        Ok(GaussianPrediction { mean, var })
    }

    /// Mean head as a function of the input `(s, onehot(a))`.
    pub fn mean_of_input(&self, x: &[f64]) -> Vec<f64> {
        let out = self.net.forward(x).expect("input dimension");
        let d = self.state_dim;
        (0..d)
            .map(|i| if self.cfg.residual { x[i] + out[i] } else { out[i] })
            .collect()
    }

    /// Gaussian negative log-likelihood of `s_next` (per transition, summed
    /// over dimensions, including the `ln 2 pi` constant).
    pub fn nll(&self, s: &[f64], a: DiscreteAction, s_next: &[f64]) -> Result<f64> {
        let p = self.predict_gaussian(s, a)?;
        Ok(gaussian_nll(&p, s_next))
    }

    pub fn mean_nll(&self, data: &ReplayBuffer, max_items: usize) -> Result<f64> {
        let n = data.len().min(max_items);
        if n == 0 {
            return Err(Error::EmptyBuffer);
        }
        let start = data.len() - n;
        let mut acc = 0.0;
        for i in start..data.len() {
            let t = data.get(i).unwrap();
            acc += self.nll(&t.s, t.a, &t.s_next)?;
        }
        Ok(acc / n as f64)
    }

    fn per_layer_cap(&self) -> Option<f64> {
        let cap = self.cfg.lipschitz_cap?;
        let n = self.net.layers.len() as f64;
        let net_cap = if self.cfg.residual { cap - 1.0 } else { cap };
        Some(net_cap.max(0.0).powf(1.0 / n))
    }

    /// Minibatch Adam on the mean Gaussian NLL of `s'` given `(s, a)`.
    /// Returns the mean training NLL of the final epoch.
    pub fn fit(&mut self, data: &ReplayBuffer, epochs: usize, rng: &mut Rng) -> Result<f64> {
        let bs = self.cfg.batch_size;
        if data.len() < bs {
            return Err(Error::InsufficientData {
                needed: bs,
                have: data.len(),
            });
        }
        if let Some(d) = data.state_dim() {
            if d != self.state_dim {
                return Err(Error::Dimension {
                    expected: self.state_dim,
                    got: d,
                });
            }
        }
        let clip = self.per_layer_cap();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last_epoch_nll = f64::NAN;
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut epoch_nll = 0.0;
            for chunk in order.chunks(bs) {
                let mut grad = vec![0.0; self.net.num_params()];
                for &i in chunk {
                    let t = data.get(i).unwrap();
                    let (g, l) = self.sample_grad(&t.s, t.a, &t.s_next)?;
                    epoch_nll += l;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                let scale = 1.0 / chunk.len() as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                self.opt.step(&mut self.net, &grad)?;
                if let Some(c) = clip {
                    self.net.spectral_clip(c);
                }
            }
            last_epoch_nll = epoch_nll / data.len() as f64;
            if !self.net.is_finite() {
                return Err(Error::Numerical("model parameters became non-finite".into()));
            }
        }
        if epochs > 0 {
            self.fitted = true;
        }
        Ok(last_epoch_nll)
    }

    fn sample_grad(&self, s: &[f64], a: DiscreteAction, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let d = self.state_dim;
        let tape = self.net.forward_tape(&self.input(s, a))?;
        let out = &tape.output;
        let mut upstream = vec![0.0; 2 * d];
        let mut loss = 0.0;
        for i in 0..d {
            let mean = if self.cfg.residual { s[i] + out[i] } else { out[i] };
            let (lv, dlv) = self.squash_logvar(out[d + i]);
            let inv_var = (-lv).exp();
            let err = y[i] - mean;
            loss += 0.5 * (lv + err * err * inv_var + (2.0 * std::f64::consts::PI).ln());
            upstream[i] = -err * inv_var;
            upstream[d + i] = 0.5 * (1.0 - err * err * inv_var) * dlv;
        }
        let (g, _) = self.net.backward(&tape, &upstream)?;
        Ok((g, loss))
    }
}

pub fn gaussian_nll(p: &GaussianPrediction, y: &[f64]) -> f64 {
    p.mean
        .iter()
        .zip(&p.var)
        .zip(y)
        .map(|((m, v), y)| 0.5 * (v.ln() + (y - m) * (y - m) / v + (2.0 * std::f64::consts::PI).ln()))
        .sum()
}

impl TransitionModel for MlpGaussianModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn predict(&self, s: &[f64], a: DiscreteAction, _rng: &mut Rng) -> Result<GaussianPrediction> {
        self.predict_gaussian(s, a)
    }
}

/// `B` MLP members; every prediction uses one member drawn uniformly.
#[derive(Debug, Clone)]
pub struct ModelEnsemble {
    pub members: Vec<MlpGaussianModel>,
}

impl ModelEnsemble {
    pub fn new(b: usize, state_dim: usize, n_actions: usize, cfg: &MlpModelConfig, rng: &mut Rng) -> Self {
        assert!(b >= 1, "ensemble needs at least one member");
        ModelEnsemble {
            members: (0..b)
                .map(|_| MlpGaussianModel::new(state_dim, n_actions, cfg.clone(), rng))
                .collect(),
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.members.iter().all(MlpGaussianModel::is_fitted)
    }

    /// Fit every member; returns the mean of the members' final-epoch NLL.
    pub fn fit(&mut self, data: &ReplayBuffer, epochs: usize, rng: &mut Rng) -> Result<f64> {
        let mut acc = 0.0;
        for m in &mut self.members {
            acc += m.fit(data, epochs, rng)?;
        }
        Ok(acc / self.members.len() as f64)
    }

    pub fn mean_nll(&self, data: &ReplayBuffer, max_items: usize) -> Result<f64> {
        let mut acc = 0.0;
        for m in &self.members {
            acc += m.mean_nll(data, max_items)?;
        }
        Ok(acc / self.members.len() as f64)
    }
}

impl TransitionModel for ModelEnsemble {
    fn state_dim(&self) -> usize {
        self.members[0].state_dim
    }

    fn predict(&self, s: &[f64], a: DiscreteAction, rng: &mut Rng) -> Result<GaussianPrediction> {
        // a single member consumes no randomness, so B = 1 reproduces the
        // bare member's trace exactly
        let m = if self.members.len() == 1 {
            &self.members[0]
        } else {
            &self.members[rng.random_range(0..self.members.len())]
        };
        m.predict_gaussian(s, a)
    }
}

/// Model selected by `model.kind`.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Kde(KdeModel),
    Mlp(ModelEnsemble),
}

impl AnyModel {
    pub fn is_fitted(&self) -> bool {
        match self {
            AnyModel::Kde(m) => !m.is_empty(),
            AnyModel::Mlp(m) => m.is_fitted(),
        }
    }

    /// Minimum data size for a fit.
    pub fn min_fit_size(&self) -> usize {
        match self {
            AnyModel::Kde(_) => 1,
            AnyModel::Mlp(m) => m.members[0].cfg.batch_size,
        }
    }

    /// Fit on `data`; returns the final training NLL (NaN for KDE, which has
    /// no training loss).
    pub fn fit(&mut self, data: &ReplayBuffer, epochs: usize, rng: &mut Rng) -> Result<f64> {
        match self {
            AnyModel::Kde(m) => m.fit(data).map(|_| f64::NAN),
            AnyModel::Mlp(m) => m.fit(data, epochs, rng),
        }
    }

    /// Mean NLL over the most recent `max_items` transitions of `data`.
    /// Queries without KDE support are skipped.
    pub fn eval_nll(&self, data: &ReplayBuffer, max_items: usize) -> Result<f64> {
        match self {
            AnyModel::Mlp(m) => m.mean_nll(data, max_items),
            AnyModel::Kde(m) => {
                let n = data.len().min(max_items);
                let mut acc = 0.0;
                let mut used = 0usize;
                for t in data.iter().skip(data.len() - n) {
                    if let Ok(p) = m.kde_estimate(&t.s, t.a) {
                        acc += gaussian_nll(&p, &t.s_next);
                        used += 1;
                    }
                }
                Ok(if used == 0 { f64::NAN } else { acc / used as f64 })
            }
        }
    }
}

impl TransitionModel for AnyModel {
    fn state_dim(&self) -> usize {
        match self {
            AnyModel::Kde(m) => m.state_dim(),
            AnyModel::Mlp(m) => m.state_dim(),
        }
    }

    fn predict(&self, s: &[f64], a: DiscreteAction, rng: &mut Rng) -> Result<GaussianPrediction> {
        match self {
            AnyModel::Kde(m) => m.predict(s, a, rng),
            AnyModel::Mlp(m) => m.predict(s, a, rng),
        }
    }
}
