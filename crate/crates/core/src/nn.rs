//! Small dense MLP with hand-written forward and reverse passes, shared by the
//! Q-network and the learned transition model. Also hosts the empirical
//! Lipschitz / sup-norm estimators used by the bound harness.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{l2_distance, l2_norm};
use crate::env::operator_norm;
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Dense layer `y = act(W x + b)`, `W` row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, act: Activation) -> Self {
        Layer {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            act,
        }
    }

    fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn preactivation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|i| {
                let row = &self.w[i * self.in_dim..(i + 1) * self.in_dim];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[i]
            })
            .collect()
    }

    pub fn operator_norm(&self) -> f64 {
        operator_norm(&self.w, self.out_dim, self.in_dim)
    }
}

/// Parameter set `theta`. The flat view lays layers out in order, each as
/// `W` (row-major) followed by `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

pub type GradVec = Vec<f64>;

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl MlpParams {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (i, o) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (i as f64).sqrt();
                let act = if l + 1 == n { output } else { hidden };
                Layer {
                    in_dim: i,
                    out_dim: o,
                    w: (0..i * o).map(|_| rng.random_range(-bound..bound)).collect(),
                    b: (0..o).map(|_| rng.random_range(-bound..bound)).collect(),
                    act,
                }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Dimension {
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        for l in &layers {
            if l.w.len() != l.in_dim * l.out_dim || l.b.len() != l.out_dim {
                return Err(Error::Dimension {
                    expected: l.in_dim * l.out_dim + l.out_dim,
                    got: l.w.len() + l.b.len(),
                });
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.preactivation(&h).into_iter().map(|z| l.act.apply(z)).collect();
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for l in &self.layers {
            let z = l.preactivation(&h);
            let y = z.iter().map(|&v| l.act.apply(v)).collect();
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Reverse pass for `upstream . output`. Returns the parameter gradient
    /// (flat layout) and the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(GradVec, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut grad = vec![0.0; self.num_params()];
        let mut offset = self.num_params();
        let mut g = upstream.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            offset -= l.num_params();
            let z = &tape.pre[li];
            let x = &tape.inputs[li];
            let y_out: &[f64] = if li + 1 == self.layers.len() {
                &tape.output
            } else {
                &tape.inputs[li + 1]
            };
            let dz: Vec<f64> = (0..l.out_dim).map(|i| g[i] * l.act.derivative(z[i], y_out[i])).collect();
            let (gw, gb) = grad[offset..offset + l.num_params()].split_at_mut(l.w.len());
            for i in 0..l.out_dim {
                if dz[i] != 0.0 {
                    for (gwij, xj) in gw[i * l.in_dim..(i + 1) * l.in_dim].iter_mut().zip(x) {
                        *gwij = dz[i] * xj;
                    }
                }
                gb[i] = dz[i];
            }
            let mut dx = vec![0.0; l.in_dim];
            for i in 0..l.out_dim {
                if dz[i] != 0.0 {
                    for (dxj, wij) in dx.iter_mut().zip(&l.w[i * l.in_dim..(i + 1) * l.in_dim]) {
                        *dxj += wij * dz[i];
                    }
                }
            }
            g = dx;
        }
        Ok((grad, g))
    }

    /// Gradient of `upstream . f(x)` with respect to the flat parameters.
    pub fn grad(&self, x: &[f64], upstream: &[f64]) -> Result<GradVec> {
        let tape = self.forward_tape(x)?;
        Ok(self.backward(&tape, upstream)?.0)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.w);
            v.extend_from_slice(&l.b);
        }
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&theta[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&theta[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// `theta += scale * delta`.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                got: delta.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w += scale * delta[off];
                off += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Rescale every weight matrix whose operator norm exceeds `cap`.
    /// With 1-Lipschitz activations the network is then `cap^layers`-Lipschitz.
    pub fn spectral_clip(&mut self, cap: f64) {
        for l in &mut self.layers {
            let n = l.operator_norm();
            if n > cap {
                let s = cap / n;
                l.w.iter_mut().for_each(|w| *w *= s);
            }
        }
    }

    /// Product of per-layer operator norms: a Lipschitz upper bound for
    /// tanh/relu/linear networks.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        self.layers.iter().map(Layer::operator_norm).product()
    }
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One descent step along `grad` (the gradient of the loss).
    pub fn step(&mut self, params: &mut MlpParams, grad: &[f64]) -> Result<()> {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let delta: Vec<f64> = grad
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / b1t;
                let vh = self.v[i] / b2t;
                -self.lr * mh / (vh.sqrt() + self.eps)
            })
            .collect();
        params.add_scaled(&delta, 1.0)
    }
}

/// Ratio `|f(x) - f(y)| / |x - y|` maximized over explicit pairs; pairs
/// closer than `1e-9` are skipped. Returns `None` if every pair was skipped.
pub fn max_ratio_over_pairs<F>(f: F, pairs: &[(Vec<f64>, Vec<f64>)]) -> Option<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut best: Option<f64> = None;
    for (x, y) in pairs {
        let dx = l2_distance(x, y);
        if dx < 1e-9 {
            continue;
        }
        let r = l2_distance(&f(x), &f(y)) / dx;
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    }
    best
}

/// Empirical Lipschitz constant of `f`: `safety` times the largest sampled
/// difference ratio over `n_pairs` pairs drawn from `sampler`. This is a lower
/// bound on the true constant inflated by `safety`. Extending the pair set
/// (larger `n_pairs`, same rng state) can only increase the result.
pub fn estimate_lipschitz<F, S>(f: F, mut sampler: S, n_pairs: usize, safety: f64, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
    S: FnMut(&mut Rng) -> Vec<f64>,
{
    assert!(n_pairs >= 2, "need at least two pairs");
    assert!(safety >= 1.0, "safety factor must be >= 1");
    let pairs: Vec<_> = (0..n_pairs).map(|_| (sampler(rng), sampler(rng))).collect();
    max_ratio_over_pairs(f, &pairs)
        .map(|r| r * safety)
        .ok_or(Error::DegenerateSample)
}

/// `max |f(x)|` over `n` sampled points.
pub fn estimate_sup_norm<F, S>(f: F, mut sampler: S, n: usize, rng: &mut Rng) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
    S: FnMut(&mut Rng) -> Vec<f64>,
{
    assert!(n >= 1);
    (0..n).map(|_| l2_norm(&f(&sampler(rng)))).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{RngSeed, Stream};

    fn rng() -> Rng {
        RngSeed(17).stream(Stream::AgentInit)
    }

    /// Straight-line re-evaluation oracle: explicit matrix products without
    /// going through `Layer::preactivation`.
    fn oracle_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &p.layers {
            let mut out = vec![0.0; l.out_dim];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = l.b[i];
                for j in 0..l.in_dim {
                    acc += l.w[i * l.in_dim + j] * h[j];
                }
                *o = match l.act {
                    Activation::Tanh => acc.tanh(),
                    Activation::Relu => {
                        if acc > 0.0 {
                            acc
                        } else {
                            0.0
                        }
                    }
                    Activation::Linear => acc,
                };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::from_layers(vec![
            Layer::zeros(3, 4, Activation::Tanh),
            Layer::zeros(4, 2, Activation::Linear),
        ])
        .unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let mut l = Layer::zeros(1, 1, Activation::Linear);
        l.w[0] = 2.0;
        l.b[0] = 1.0;
        let p = MlpParams::from_layers(vec![l]).unwrap();
        assert_eq!(p.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_matches_oracle() {
        let mut r = rng();
        for act in [Activation::Tanh, Activation::Relu] {
            let p = MlpParams::new(&[5, 16, 3], act, Activation::Linear, &mut r);
            for _ in 0..20 {
                let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
                let a = p.forward(&x).unwrap();
                let b = oracle_forward(&p, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = MlpParams::new(&[3, 2], Activation::Tanh, Activation::Linear, &mut rng());
        assert!(matches!(p.forward(&[1.0]), Err(Error::Dimension { expected: 3, got: 1 })));
        assert!(p.grad(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_layer_weight_grad_is_input() {
        let p = MlpParams::from_layers(vec![Layer::zeros(3, 1, Activation::Linear)]).unwrap();
        let x = [0.5, -1.5, 2.0];
        let g = p.grad(&x, &[1.0]).unwrap();
        assert_eq!(&g[..3], &x);
        assert_eq!(g[3], 1.0);
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let p = MlpParams::new(&[3, 8, 2], Activation::Tanh, Activation::Linear, &mut rng());
        let g = p.grad(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    fn fd_check(p: &MlpParams, x: &[f64], upstream: &[f64]) {
        let g = p.grad(x, upstream).unwrap();
        let theta = p.flat();
        let h = 1e-5;
        let f = |th: &[f64]| {
            let mut q = p.clone();
            q.set_flat(th).unwrap();
            q.forward(x).unwrap().iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (g[i] - fd).abs() / denom < 1e-5,
                "coord {i}: analytic {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng();
        // relu kinks make finite differences unreliable exactly at zero
        // pre-activations; random inputs avoid them almost surely
        let configs: [(&[usize], Activation, Activation); 4] = [
            (&[3, 5, 2], Activation::Tanh, Activation::Linear),
            (&[4, 6, 6, 3], Activation::Tanh, Activation::Linear),
            (&[2, 7, 1], Activation::Relu, Activation::Linear),
            (&[3, 4, 2], Activation::Tanh, Activation::Tanh),
        ];
        for (sizes, h, o) in configs {
            let p = MlpParams::new(sizes, h, o, &mut r);
            let x: Vec<f64> = (0..sizes[0]).map(|_| r.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| r.random_range(-1.0..1.0)).collect();
            fd_check(&p, &x, &up);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng();
        let p = MlpParams::new(&[3, 6, 2], Activation::Tanh, Activation::Linear, &mut r);
        let x = vec![0.3, -0.2, 0.7];
        let up = vec![0.5, -1.0];
        let tape = p.forward_tape(&x).unwrap();
        let (_, gx) = p.backward(&tape, &up).unwrap();
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let f = |x: &[f64]| p.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - gx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn spectral_clip_caps_layer_norms() {
        let mut p = MlpParams::new(&[4, 32, 4], Activation::Tanh, Activation::Linear, &mut rng());
        p.layers.iter_mut().for_each(|l| l.w.iter_mut().for_each(|w| *w *= 10.0));
        p.spectral_clip(1.5);
        for l in &p.layers {
            assert!(l.operator_norm() <= 1.5 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn lipschitz_of_scaling_map() {
        let mut r = rng();
        let sampler = |r: &mut Rng| (0..3).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let l = estimate_lipschitz(|x| x.iter().map(|v| 2.0 * v).collect(), sampler, 100, 1.2, &mut r).unwrap();
        assert!((l - 2.4).abs() < 1e-12);
        let c = estimate_lipschitz(|_| vec![3.0, 1.0], sampler, 100, 1.2, &mut r).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn lipschitz_degenerate_pairs() {
        let mut r = rng();
        let res = estimate_lipschitz(|x| x.to_vec(), |_| vec![1.0, 1.0], 5, 1.0, &mut r);
        assert!(matches!(res, Err(Error::DegenerateSample)));
    }

    #[test]
    fn lipschitz_monotone_in_pair_count() {
        let sampler = |r: &mut Rng| (0..2).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let f = |x: &[f64]| vec![(3.0 * x[0]).sin() + x[1] * x[1]];
        let mut prev = 0.0;
        for n in [2, 10, 50, 250, 1000] {
            let mut r = RngSeed(3).stream(Stream::Bounds);
            let l = estimate_lipschitz(f, sampler, n, 1.0, &mut r).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn sup_norm_cases() {
        let mut r = rng();
        let sampler = |r: &mut Rng| (0..4).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let c = estimate_sup_norm(|_| vec![3.0, 4.0], sampler, 10, &mut r);
        assert_eq!(c, 5.0);
        let mut prev = 0.0;
        for n in [10, 1000, 100_000] {
            let mut r = RngSeed(1).stream(Stream::Bounds);
            let s = estimate_sup_norm(|x| x.to_vec(), sampler, n, &mut r);
            assert!(s <= 2.0 && s >= prev);
            prev = s;
        }
        assert!(prev > 1.9);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut l = Layer::zeros(1, 1, Activation::Linear);
        l.w[0] = 3.0;
        let mut p = MlpParams::from_layers(vec![l]).unwrap();
        let mut opt = Adam::new(p.num_params(), 0.05);
        for _ in 0..500 {
            // loss = 0.5 (f(1) - 1)^2
            let y = p.forward(&[1.0]).unwrap()[0];
            let g = p.grad(&[1.0], &[y - 1.0]).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.forward(&[1.0]).unwrap()[0] - 1.0).abs() < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flat_roundtrip_is_identity(seed in 0u64..1000, hidden in 1usize..12) {
                let mut r = RngSeed(seed).stream(Stream::AgentInit);
                let p = MlpParams::new(&[3, hidden, 2], Activation::Tanh, Activation::Linear, &mut r);
                let mut q = MlpParams::new(&[3, hidden, 2], Activation::Tanh, Activation::Linear, &mut r);
                q.set_flat(&p.flat()).unwrap();
                prop_assert_eq!(&p, &q);
                prop_assert_eq!(p.flat().len(), p.num_params());
            }
        }
    }
}
