//! Empirical checks of the trajectory-shift and Q-update drift bounds.
//!
//! Probabilistic bounds pass when the violation rate stays within the
//! allowed probability plus three binomial standard errors. The Q-update
//! bound is deterministic given valid constants: every violation triggers a
//! recheck of the constants on the offending pair, so an underestimated
//! constant is reported as such rather than as a failure of the bound.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::QNetwork;
use crate::data::{l2_distance, l2_norm, state_action_key, DiscreteAction, Transition};
use crate::env::{Environment, LinearGaussianEnv};
use crate::error::{Error, Result};
use crate::model::KdeModel;
use crate::nn::{estimate_lipschitz, estimate_sup_norm, Activation, Layer, MlpParams};
use crate::seed::Rng;

pub const MIN_CHEBYSHEV_TRIALS: usize = 10_000;
/// Cap on stored per-trial LHS/RHS samples.
pub const MAX_STORED_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Every violation co-occurred with a violated Lipschitz or sup constant.
    ConstantsInsufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub n_trials: usize,
    pub n_skipped: usize,
    pub violation_count: usize,
    /// Violations on pairs where some constant was found violated.
    pub flagged_violations: usize,
    pub allowed_violation_prob: f64,
    pub mc_slack: f64,
    /// Largest observed `lhs / rhs` (0 when every rhs is 0 and lhs is 0).
    pub max_ratio: f64,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub verdict: Verdict,
}

impl BoundReport {
    fn new(name: &str, allowed: f64) -> Self {
        BoundReport {
            name: name.to_string(),
            n_trials: 0,
            n_skipped: 0,
            violation_count: 0,
            flagged_violations: 0,
            allowed_violation_prob: allowed,
            mc_slack: 0.0,
            max_ratio: 0.0,
            lhs: Vec::new(),
            rhs: Vec::new(),
            verdict: Verdict::Pass,
        }
    }

    /// Record one trial; returns true if it violated the bound.
    fn record(&mut self, lhs: f64, rhs: f64) -> bool {
        self.n_trials += 1;
        if self.lhs.len() < MAX_STORED_SAMPLES {
            self.lhs.push(lhs);
            self.rhs.push(rhs);
        }
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        self.max_ratio = self.max_ratio.max(ratio);
        let v = lhs > rhs;
        if v {
            self.violation_count += 1;
        }
        v
    }

    pub fn violation_rate(&self) -> f64 {
        if self.n_trials == 0 {
            0.0
        } else {
            self.violation_count as f64 / self.n_trials as f64
        }
    }

    fn finish_probabilistic(mut self) -> Self {
        self.mc_slack = mc_slack(self.allowed_violation_prob, self.n_trials);
        self.verdict = if self.violation_rate() <= self.allowed_violation_prob + self.mc_slack {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        self
    }

    fn finish_deterministic(mut self) -> Self {
        self.verdict = if self.violation_count == 0 {
            Verdict::Pass
        } else if self.flagged_violations == self.violation_count {
            Verdict::ConstantsInsufficient
        } else {
            Verdict::Fail
        };
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub const CSV_HEADER: &'static str =
        "name,n_trials,n_skipped,violation_count,flagged_violations,violation_rate,allowed_violation_prob,mc_slack,max_ratio,verdict";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.n_trials,
            self.n_skipped,
            self.violation_count,
            self.flagged_violations,
            self.violation_rate(),
            self.allowed_violation_prob,
            self.mc_slack,
            self.max_ratio,
            serde_json::to_value(self.verdict).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        )
    }
}

/// Three binomial standard errors at probability `p` over `n` trials.
pub fn mc_slack(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    3.0 * (p.clamp(0.0, 1.0) * (1.0 - p.clamp(0.0, 1.0)) / n as f64).sqrt()
}

/// `sqrt((sum sigma^2 + sum sigma_hat^2) / eps) + |mu - mu_hat|`.
pub fn chebyshev_radius(sigma2_sum: f64, sigma2_hat_sum: f64, eps: f64, mean_gap: f64) -> f64 {
    ((sigma2_sum + sigma2_hat_sum) / eps).sqrt() + mean_gap
}

fn sample_diag(mean: &[f64], var: &[f64], rng: &mut Rng) -> Vec<f64> {
    mean.iter()
        .zip(var)
        .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Independent `s ~ N(mu, diag sigma2)` and `s_hat ~ N(mu_hat, diag
/// sigma2_hat)`; a trial violates when `|s - s_hat|` exceeds the Chebyshev
/// radius.
pub fn verify_chebyshev(
    mu: &[f64],
    sigma2: &[f64],
    mu_hat: &[f64],
    sigma2_hat: &[f64],
    eps: f64,
    n_trials: usize,
    rng: &mut Rng,
) -> Result<BoundReport> {
    let d = mu.len();
    for v in [sigma2.len(), mu_hat.len(), sigma2_hat.len()] {
        if v != d {
            return Err(Error::Dimension { expected: d, got: v });
        }
    }
    if sigma2.iter().chain(sigma2_hat).any(|v| !(*v >= 0.0)) {
        return Err(Error::config("bounds.sigma2", "variances must be >= 0"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config("bounds.epsilon", "must lie in (0, 1)"));
    }
    if n_trials < MIN_CHEBYSHEV_TRIALS {
        return Err(Error::config(
            "bounds.trials",
            format!("at least {MIN_CHEBYSHEV_TRIALS} trials required, got {n_trials}"),
        ));
    }
    let k = chebyshev_radius(sigma2.iter().sum(), sigma2_hat.iter().sum(), eps, l2_distance(mu, mu_hat));
    let mut rep = BoundReport::new("chebyshev", eps);
    for _ in 0..n_trials {
        let s = sample_diag(mu, sigma2, rng);
        let sh = sample_diag(mu_hat, sigma2_hat, rng);
        rep.record(l2_distance(&s, &sh), k);
    }
    Ok(rep.finish_probabilistic())
}

/// A real state-action pair `(s, a)` and a candidate `(s_hat, a_hat)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePair {
    pub s: Vec<f64>,
    pub a: DiscreteAction,
    pub s_hat: Vec<f64>,
    pub a_hat: DiscreteAction,
}

/// One drawn trial: `s' ~ P*(s, a)`, `s_hat' ~ P_hat(s_hat, a_hat)` and
/// the variance terms entering the bound (summed over dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSample {
    pub pair: StatePair,
    pub s_next: Vec<f64>,
    pub s_hat_next: Vec<f64>,
    pub r: f64,
    pub r_hat: f64,
    pub n_eff: f64,
    /// `sigma^2(s, a)`
    pub sigma2_sa: f64,
    /// `sigma^2(s_hat, a_hat)`
    pub sigma2_pair: f64,
    /// `sigma_hat^2(s, a)`
    pub sigma2_hat_sa: f64,
    /// `|(s_hat, a_hat) - (s, a)|` under the key embedding.
    pub delta: f64,
}

/// The three right-hand terms of the next-state shift bound:
/// `L_sa delta`, `sqrt(sigma^2(s,a) / (n_eff eps_kde))` and
/// `sqrt((sigma^2(s_hat,a_hat) + sigma_hat^2(s,a)) / eps)`.
pub fn shift_bound_terms(
    l_sa: f64,
    delta: f64,
    sigma2_sa: f64,
    n_eff: f64,
    sigma2_pair: f64,
    sigma2_hat_sa: f64,
    eps: f64,
    eps_kde: f64,
) -> [f64; 3] {
    [
        l_sa * delta,
        (sigma2_sa / (n_eff * eps_kde)).sqrt(),
        ((sigma2_pair + sigma2_hat_sa) / eps).sqrt(),
    ]
}

/// Draw one trial per pair. Pairs with `n_eff(s, a) = 0` or without KDE
/// support at `(s_hat, a_hat)` are skipped and counted.
pub fn draw_shift_samples(
    env: &LinearGaussianEnv,
    kde: &KdeModel,
    pairs: &[StatePair],
    rng: &mut Rng,
) -> Result<(Vec<ShiftSample>, usize)> {
    let sigma2: f64 = env.variance().iter().sum();
    let n_actions = env.spec().n_actions;
    let w = kde.action_weight;
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        let n_eff = kde.effective_sample_size(&p.s, p.a);
        if n_eff <= 0.0 {
            skipped += 1;
            continue;
        }
        let hat_sa = kde.kde_estimate(&p.s, p.a)?;
        let pred = match kde.kde_estimate(&p.s_hat, p.a_hat) {
            Ok(x) => x,
            Err(Error::NoSupport) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let s_hat_next = pred.sample(rng).into_inner();
        let s_next = env.step(&p.s, p.a, rng)?.s_next.into_inner();
        let delta = l2_distance(
            &state_action_key(&p.s_hat, p.a_hat, n_actions, w),
            &state_action_key(&p.s, p.a, n_actions, w),
        );
        out.push(ShiftSample {
            r: env.reward(&p.s, p.a),
            r_hat: env.reward(&p.s_hat, p.a_hat),
            pair: p.clone(),
            s_next,
            s_hat_next,
            n_eff,
            sigma2_sa: sigma2,
            sigma2_pair: sigma2,
            sigma2_hat_sa: hat_sa.total_variance(),
            delta,
        });
    }
    Ok((out, skipped))
}

/// Next-state shift bound: `|s_hat' - s'|` against the three-term RHS.
/// Passes when the violation rate is within `1 - (1 - eps)(1 - eps_kde)`
/// plus the Monte-Carlo slack.
pub fn verify_theorem1(
    env: &LinearGaussianEnv,
    kde: &KdeModel,
    pairs: &[StatePair],
    l_sa: f64,
    eps: f64,
    eps_kde: f64,
    rng: &mut Rng,
) -> Result<BoundReport> {
    check_eps(eps, eps_kde)?;
    if env.variance().iter().any(|v| *v <= 0.0) {
        return Err(Error::config("env.sigma", "the shift bound needs nonzero real noise"));
    }
    let (samples, skipped) = draw_shift_samples(env, kde, pairs, rng)?;
    let mut rep = BoundReport::new("theorem1", 1.0 - (1.0 - eps) * (1.0 - eps_kde));
    rep.n_skipped = skipped;
    for x in &samples {
        let t = shift_bound_terms(l_sa, x.delta, x.sigma2_sa, x.n_eff, x.sigma2_pair, x.sigma2_hat_sa, eps, eps_kde);
        rep.record(l2_distance(&x.s_hat_next, &x.s_next), t.iter().sum());
    }
    Ok(rep.finish_probabilistic())
}

fn check_eps(eps: f64, eps_kde: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config("bounds.epsilon", "must lie in (0, 1)"));
    }
    if !(eps_kde > 0.0 && eps_kde < 1.0) {
        return Err(Error::config("bounds.epsilon_kde", "must lie in (0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Estimated { safety: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBundle {
    pub l_sa: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// `(constant name, provenance)` in the order l_sa, l1..l4, d1..d3.
    pub provenance: Vec<(String, Provenance)>,
}

const CONSTANT_NAMES: [&str; 8] = ["l_sa", "l1", "l2", "l3", "l4", "d1", "d2", "d3"];

impl LipschitzBundle {
    pub fn values(&self) -> [f64; 8] {
        [self.l_sa, self.l1, self.l2, self.l3, self.l4, self.d1, self.d2, self.d3]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in CONSTANT_NAMES.iter().zip(self.values()) {
            if !(v >= 0.0) {
                return Err(Error::config(format!("bounds.{name}"), "constants must be >= 0"));
            }
        }
        Ok(())
    }
}

/// `C1 = alpha (L1 L2 + L3 L2 + gamma L4 L2)`.
pub fn c1(lb: &LipschitzBundle, alpha: f64, gamma: f64) -> f64 {
    alpha * (lb.l1 * lb.l2 + lb.l3 * lb.l2 + gamma * lb.l4 * lb.l2)
}

/// `C2 = alpha L2 D2 + alpha (gamma L1 + L3 + gamma L4) D1 + alpha (1 + gamma) L2 D3`,
/// as stated with the drift bound.
pub fn c2(lb: &LipschitzBundle, alpha: f64, gamma: f64) -> f64 {
    alpha * lb.l2 * lb.d2 + alpha * (gamma * lb.l1 + lb.l3 + gamma * lb.l4) * lb.d1 + alpha * (1.0 + gamma) * lb.l2 * lb.d3
}

/// Linear coefficient obtained by redoing the triangle-inequality argument
/// term by term: `alpha (L2 D1 + (1 + gamma) L2 D3 + (L1 + L3 + gamma L4) D2)`.
pub fn c2_rederived(lb: &LipschitzBundle, alpha: f64, gamma: f64) -> f64 {
    alpha * (lb.l2 * lb.d1 + (1.0 + gamma) * lb.l2 * lb.d3 + (lb.l1 + lb.l3 + gamma * lb.l4) * lb.d2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C2Form {
    Stated,
    Rederived,
}

pub fn c2_of(form: C2Form, lb: &LipschitzBundle, alpha: f64, gamma: f64) -> f64 {
    match form {
        C2Form::Stated => c2(lb, alpha, gamma),
        C2Form::Rederived => c2_rederived(lb, alpha, gamma),
    }
}

/// `|d - d_hat|` over `(s, w onehot(a), s')`.
pub fn data_distance(d: &Transition, dh: &Transition, n_actions: usize, w: f64) -> f64 {
    let k = state_action_key(&d.s, d.a, n_actions, w);
    let kh = state_action_key(&dh.s, dh.a, n_actions, w);
    let sq = crate::data::squared_distance(&k, &kh) + crate::data::squared_distance(&d.s_next, &dh.s_next);
    sq.sqrt()
}

/// `|theta_hat_{t+1} - theta_{t+1}|` for one update from the same `theta_t`.
pub fn update_gap(q: &QNetwork, d: &Transition, dh: &Transition) -> Result<f64> {
    let (u, _) = q.update_step(d)?;
    let (uh, _) = q.update_step(dh)?;
    Ok(l2_distance(&u, &uh))
}

/// Names of the constants contradicted by this pair (relative tolerance
/// `1e-9` to absorb round-off).
pub fn constant_violations(
    q: &QNetwork,
    lb: &LipschitzBundle,
    d: &Transition,
    dh: &Transition,
    n_actions: usize,
    w: f64,
) -> Result<Vec<&'static str>> {
    let over = |lhs: f64, rhs: f64| lhs > rhs * (1.0 + 1e-9) + 1e-12;
    let dsa = l2_distance(
        &state_action_key(&d.s, d.a, n_actions, w),
        &state_action_key(&dh.s, dh.a, n_actions, w),
    );
    let dsn = l2_distance(&d.s_next, &dh.s_next);
    let (qv, g) = q.q_and_grad(&d.s, d.a)?;
    let (qh, gh) = q.q_and_grad(&dh.s, dh.a)?;
    let m = q.max_q_target(&d.s_next)?;
    let mh = q.max_q_target(&dh.s_next)?;
    let mut out = Vec::new();
    if over((d.r - dh.r).abs(), lb.l1 * dsa) {
        out.push("l1");
    }
    if over(l2_distance(&g, &gh), lb.l2 * dsa) {
        out.push("l2");
    }
    if over((qv - qh).abs(), lb.l3 * dsa) {
        out.push("l3");
    }
    if over((m - mh).abs(), lb.l4 * dsn) {
        out.push("l4");
    }
    if over(d.r.abs().max(dh.r.abs()), lb.d1) {
        out.push("d1");
    }
    if over(l2_norm(&g).max(l2_norm(&gh)), lb.d2) {
        out.push("d2");
    }
    if over(qv.abs().max(qh.abs()).max(m.abs()).max(mh.abs()), lb.d3) {
        out.push("d3");
    }
    Ok(out)
}

/// Scale applied to `C1` by the deliberate-corruption switch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem2Options {
    pub form: C2Form,
    pub c1_scale: f64,
}

impl Default for Theorem2Options {
    fn default() -> Self {
        Theorem2Options {
            form: C2Form::Stated,
            c1_scale: 1.0,
        }
    }
}

/// Drift bound `|theta_hat_{t+1} - theta_{t+1}| <= C1 |d - d_hat|^2 + C2 |d - d_hat|`
/// on explicit pairs. Transitions are used as given (set `done = false` to
/// match the bound's bootstrap form).
pub fn verify_theorem2(
    q: &QNetwork,
    lb: &LipschitzBundle,
    pairs: &[(Transition, Transition)],
    n_actions: usize,
    action_weight: f64,
    opts: Theorem2Options,
) -> Result<BoundReport> {
    lb.validate()?;
    let k1 = c1(lb, q.alpha, q.gamma) * opts.c1_scale;
    let k2 = c2_of(opts.form, lb, q.alpha, q.gamma);
    let mut rep = BoundReport::new("theorem2", 0.0);
    for (d, dh) in pairs {
        let dd = data_distance(d, dh, n_actions, action_weight);
        let lhs = update_gap(q, d, dh)?;
        if rep.record(lhs, k1 * dd * dd + k2 * dd) && !constant_violations(q, lb, d, dh, n_actions, action_weight)?.is_empty()
        {
            rep.flagged_violations += 1;
        }
    }
    Ok(rep.finish_deterministic())
}

/// Single-action linear Q-network `Q(s; theta) = theta . s + b` with a
/// separate target copy.
pub fn linear_q(theta: &[f64], b: f64, theta_minus: &[f64], b_minus: f64, alpha: f64, gamma: f64) -> Result<QNetwork> {
    let d = theta.len();
    let layer = |w: &[f64], b: f64| {
        let mut l = Layer::zeros(d, 1, Activation::Linear);
        l.w.copy_from_slice(w);
        l.b[0] = b;
        l
    };
    let mut q = QNetwork::from_params(MlpParams::from_layers(vec![layer(theta, b)])?, alpha, gamma, 0)?;
    q.theta_minus = MlpParams::from_layers(vec![layer(theta_minus, b_minus)])?;
    Ok(q)
}

/// Closed-form constants for a single-action linear Q on the ball
/// `|s| <= radius`: `grad Q = (s, 1)` so `L2 = 1` and `D2 = sqrt(R^2 + 1)`;
/// `L3 = |theta|`, `L4 = |theta_minus|`,
/// `D3 = max(|theta| R + |b|, |theta_minus| R + |b_minus|)`.
/// Reward constants are supplied by the caller.
pub fn linear_bundle(q: &QNetwork, l1: f64, d1: f64, radius: f64, l_sa: f64) -> LipschitzBundle {
    let l = &q.theta.layers[0];
    let lm = &q.theta_minus.layers[0];
    let nt = l2_norm(&l.w);
    let ntm = l2_norm(&lm.w);
    LipschitzBundle {
        l_sa,
        l1,
        l2: 1.0,
        l3: nt,
        l4: ntm,
        d1,
        d2: (radius * radius + 1.0).sqrt(),
        d3: (nt * radius + l.b[0].abs()).max(ntm * radius + lm.b[0].abs()),
        provenance: CONSTANT_NAMES.iter().map(|n| (n.to_string(), Provenance::Analytic)).collect(),
    }
}

/// Constants estimated by sampling `(s, a)` uniformly from the box
/// `[lo, hi]` times the action set, each inflated by `safety`. `d1` and
/// `l_sa` are supplied (analytic).
#[allow(clippy::too_many_arguments)]
pub fn estimate_bundle<R>(
    q: &QNetwork,
    reward: R,
    d1: f64,
    l_sa: f64,
    lo: &[f64],
    hi: &[f64],
    action_weight: f64,
    n_pairs: usize,
    safety: f64,
    rng: &mut Rng,
) -> Result<LipschitzBundle>
where
    R: Fn(&[f64], DiscreteAction) -> f64,
{
    let n_actions = q.n_actions();
    let dim = lo.len();
    let decode = |key: &[f64]| -> (Vec<f64>, DiscreteAction) {
        let a = crate::agent::argmax(&key[dim..]);
        (key[..dim].to_vec(), DiscreteAction(a))
    };
    let state = |r: &mut Rng| -> Vec<f64> { lo.iter().zip(hi).map(|(l, h)| r.random_range(*l..*h)).collect() };
    let key_sampler = |r: &mut Rng| {
        let s = state(r);
        let a = DiscreteAction(r.random_range(0..n_actions));
        state_action_key(&s, a, n_actions, action_weight)
    };
    let l1 = estimate_lipschitz(
        |k| {
            let (s, a) = decode(k);
            vec![reward(&s, a)]
        },
        key_sampler,
        n_pairs,
        safety,
        rng,
    )?;
    let l2 = estimate_lipschitz(
        |k| {
            let (s, a) = decode(k);
            q.q_and_grad(&s, a).expect("dimension").1
        },
        key_sampler,
        n_pairs,
        safety,
        rng,
    )?;
    let l3 = estimate_lipschitz(
        |k| {
            let (s, a) = decode(k);
            vec![q.q_and_grad(&s, a).expect("dimension").0]
        },
        key_sampler,
        n_pairs,
        safety,
        rng,
    )?;
    let l4 = estimate_lipschitz(|s| vec![q.max_q_target(s).expect("dimension")], state, n_pairs, safety, rng)?;
    let d2 = safety
        * estimate_sup_norm(
            |k| {
                let (s, a) = decode(k);
                q.q_and_grad(&s, a).expect("dimension").1
            },
            key_sampler,
            n_pairs,
            rng,
        );
    let d3 = safety
        * estimate_sup_norm(
            |s| {
                let mut v = q.q_values(s).expect("dimension");
                v.extend(q.q_values_target(s).expect("dimension"));
                vec![v.iter().fold(0.0f64, |m, x| m.max(x.abs()))]
            },
            state,
            n_pairs,
            rng,
        );
    let est = Provenance::Estimated { safety };
    let provenance = CONSTANT_NAMES
        .iter()
        .map(|n| {
            let p = if *n == "l_sa" || *n == "d1" { Provenance::Analytic } else { est };
            (n.to_string(), p)
        })
        .collect();
    Ok(LipschitzBundle {
        l_sa,
        l1,
        l2,
        l3,
        l4,
        d1,
        d2,
        d3,
        provenance,
    })
}

/// Largest of `sigma(s,a)`, `sigma(s_hat,a_hat)`, `sigma_hat(s,a)`,
/// `sqrt(sigma_hat(s,a) sigma(s,a))` and `sqrt(sigma(s,a) sigma(s_hat,a_hat))`.
pub fn sigma_max(sigma_sa: f64, sigma_pair: f64, sigma_hat_sa: f64) -> f64 {
    [
        sigma_sa,
        sigma_pair,
        sigma_hat_sa,
        (sigma_hat_sa * sigma_sa).sqrt(),
        (sigma_sa * sigma_pair).sqrt(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Composed drift bound with the remainder written out:
/// `C1 C3^2 D^2 + C3 (2 C1 (a + b1 + b2) + C2) D
///  + C1 (a^2 + b1^2 + b2^2 + 2 a (b1 + b2)) + C2 (a + b1 + b2)`
/// where `a = sqrt(sigma^2(s,a) / (n_eff eps_kde))`,
/// `b1 = sqrt(sigma^2(s_hat,a_hat) / eps)`, `b2 = sqrt(sigma_hat^2(s,a) / eps)`
/// and `D = |(s, a) - (s_hat, a_hat)|`.
pub fn composed_bound(k1: f64, k2: f64, c3: f64, delta: f64, a: f64, b1: f64, b2: f64) -> f64 {
    let lin = a + b1 + b2;
    k1 * c3 * c3 * delta * delta
        + c3 * (2.0 * k1 * lin + k2) * delta
        + k1 * (a * a + b1 * b1 + b2 * b2 + 2.0 * a * (b1 + b2))
        + k2 * lin
}

/// Composed bound on drawn shift samples. Each sample yields the real
/// transition `d = (s, a, s')` and the simulated one
/// `d_hat = (s_hat, a_hat, s_hat')`; the LHS is their update gap.
pub fn verify_prop1(
    samples: &[ShiftSample],
    q: &QNetwork,
    lb: &LipschitzBundle,
    eps: f64,
    eps_kde: f64,
    n_actions: usize,
    opts: Theorem2Options,
) -> Result<BoundReport> {
    check_eps(eps, eps_kde)?;
    lb.validate()?;
    let k1 = c1(lb, q.alpha, q.gamma) * opts.c1_scale;
    let k2 = c2_of(opts.form, lb, q.alpha, q.gamma);
    let c3 = 1.0 + lb.l_sa;
    let mut rep = BoundReport::new("prop1", 1.0 - (1.0 - eps) * (1.0 - eps_kde));
    for x in samples {
        let d = Transition::new(x.pair.s.clone().into(), x.pair.a, x.s_next.clone().into(), x.r, false)?;
        let dh = Transition::new(x.pair.s_hat.clone().into(), x.pair.a_hat, x.s_hat_next.clone().into(), x.r_hat, false)?;
        let a = (x.sigma2_sa / (x.n_eff * eps_kde)).sqrt();
        let b1 = (x.sigma2_pair / eps).sqrt();
        let b2 = (x.sigma2_hat_sa / eps).sqrt();
        let rhs = composed_bound(k1, k2, c3, x.delta, a, b1, b2);
        let lhs = update_gap(q, &d, &dh)?;
        let _ = n_actions;
        rep.record(lhs, rhs);
    }
    Ok(rep.finish_probabilistic())
}

/// Parameters of the linear-Q drift suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSuite {
    pub dim: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub n_thetas: usize,
    pub pairs_per_theta: usize,
    /// Fraction of pairs whose simulated point is a small perturbation of
    /// the real one.
    pub close_fraction: f64,
}

impl Default for LinearSuite {
    fn default() -> Self {
        LinearSuite {
            dim: 4,
            gamma: 0.9,
            alpha: 0.1,
            n_thetas: 10,
            pairs_per_theta: 1000,
            close_fraction: 0.5,
        }
    }
}

fn uniform_box(dim: usize, half: f64, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-half..half)).collect()
}

/// Drift bound with closed-form constants. The environment supplies the
/// quadratic reward; points are uniform on its box. For each of `n_thetas`
/// draws `theta, theta_minus ~ N(0, I / dim)`, `b, b_minus ~ N(0, 1)`, the
/// constants use the largest state norm among that draw's points.
pub fn linear_theorem2_suite(suite: &LinearSuite, opts: Theorem2Options, rng: &mut Rng) -> Result<BoundReport> {
    let env = LinearGaussianEnv::identity(suite.dim, 1, 0.0);
    let half = 1.0;
    let mut total = BoundReport::new("theorem2_linear", 0.0);
    let sd = 1.0 / (suite.dim as f64).sqrt();
    for _ in 0..suite.n_thetas {
        let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let th: Vec<f64> = (0..suite.dim).map(|_| normal(sd)).collect();
        let b = normal(1.0);
        let thm: Vec<f64> = (0..suite.dim).map(|_| normal(sd)).collect();
        let bm = normal(1.0);
        let q = linear_q(&th, b, &thm, bm, suite.alpha, suite.gamma)?;
        let mut pairs = Vec::with_capacity(suite.pairs_per_theta);
        let mut radius: f64 = 0.0;
        for _ in 0..suite.pairs_per_theta {
            let s = uniform_box(suite.dim, half, rng);
            let sn = uniform_box(suite.dim, half, rng);
            let (sh, shn) = if rng.random::<f64>() < suite.close_fraction {
                let mut jitter = |x: &[f64]| -> Vec<f64> {
                    x.iter()
                        .map(|v| (v + 0.05 * rng.sample::<f64, _>(StandardNormal)).clamp(-half, half))
                        .collect()
                };
                (jitter(&s), jitter(&sn))
            } else {
                (uniform_box(suite.dim, half, rng), uniform_box(suite.dim, half, rng))
            };
            for x in [&s, &sn, &sh, &shn] {
                radius = radius.max(l2_norm(x));
            }
            let a = DiscreteAction(0);
            let d = Transition::new(s.clone().into(), a, sn.into(), env.reward(&s, a), false)?;
            let dh = Transition::new(sh.clone().into(), a, shn.into(), env.reward(&sh, a), false)?;
            pairs.push((d, dh));
        }
        let (l1, d1) = env.reward_constants(radius);
        let lb = linear_bundle(&q, l1, d1, radius, 0.0);
        let rep = verify_theorem2(&q, &lb, &pairs, 1, 1.0, opts)?;
        merge(&mut total, &rep);
    }
    Ok(total.finish_deterministic())
}

/// A fixed one-dimensional case where the quadratic term is binding:
/// `theta = 0`, `gamma = 0`, reward `2 s` on `|s| <= 1`, and the pair
/// `s = 1`, `s_hat = 0` with equal next states. The bound holds with
/// margin at the stated `C1` and fails once `C1` is halved.
pub fn c1_fixture(opts: Theorem2Options) -> Result<BoundReport> {
    let c = 2.0;
    let q = linear_q(&[0.0], 0.0, &[0.0], 0.0, 0.1, 0.0)?;
    let lb = linear_bundle(&q, c, c, 1.0, 0.0);
    let mk = |s: f64| Transition::new(vec![s].into(), DiscreteAction(0), vec![0.0].into(), c * s, false);
    let mut rep = verify_theorem2(&q, &lb, &[(mk(1.0)?, mk(0.0)?)], 1, 1.0, opts)?;
    rep.name = "theorem2_c1_fixture".into();
    Ok(rep)
}

/// Parameters of the MLP drift suite.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSuite {
    pub dim: usize,
    pub n_actions: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub alpha: f64,
    pub n_nets: usize,
    pub pairs_per_net: usize,
    pub estimate_pairs: usize,
    pub safety: f64,
    pub close_fraction: f64,
}

impl Default for MlpSuite {
    fn default() -> Self {
        MlpSuite {
            dim: 4,
            n_actions: 2,
            hidden: vec![16, 16],
            gamma: 0.9,
            alpha: 0.1,
            n_nets: 10,
            pairs_per_net: 100,
            estimate_pairs: 5000,
            safety: 1.2,
            close_fraction: 0.5,
        }
    }
}

/// Drift bound on a tanh MLP with estimated constants (safety-inflated).
pub fn mlp_theorem2_suite(suite: &MlpSuite, opts: Theorem2Options, rng: &mut Rng) -> Result<BoundReport> {
    let env = LinearGaussianEnv::identity(suite.dim, suite.n_actions, 0.0);
    let half = 1.0;
    let lo = vec![-half; suite.dim];
    let hi = vec![half; suite.dim];
    let mut total = BoundReport::new("theorem2_mlp", 0.0);
    let cfg = crate::agent::AgentConfig {
        hidden: suite.hidden.clone(),
        activation: Activation::Tanh,
        alpha: suite.alpha,
        gamma: suite.gamma,
        sync_period: 0,
    };
    for _ in 0..suite.n_nets {
        let mut q = QNetwork::new(suite.dim, suite.n_actions, &cfg, rng)?;
        q.theta_minus = QNetwork::new(suite.dim, suite.n_actions, &cfg, rng)?.theta;
        let d1 = env.reward_bound();
        let lb = estimate_bundle(
            &q,
            |s, a| env.reward(s, a),
            d1,
            0.0,
            &lo,
            &hi,
            1.0,
            suite.estimate_pairs,
            suite.safety,
            rng,
        )?;
        let mut pairs = Vec::with_capacity(suite.pairs_per_net);
        for _ in 0..suite.pairs_per_net {
            let s = uniform_box(suite.dim, half, rng);
            let sn = uniform_box(suite.dim, half, rng);
            let a = DiscreteAction(rng.random_range(0..suite.n_actions));
            let (sh, shn, ah) = if rng.random::<f64>() < suite.close_fraction {
                let mut jitter = |x: &[f64]| -> Vec<f64> {
                    x.iter()
                        .map(|v| (v + 0.05 * rng.sample::<f64, _>(StandardNormal)).clamp(-half, half))
                        .collect()
                };
                (jitter(&s), jitter(&sn), a)
            } else {
                (
                    uniform_box(suite.dim, half, rng),
                    uniform_box(suite.dim, half, rng),
                    DiscreteAction(rng.random_range(0..suite.n_actions)),
                )
            };
            let d = Transition::new(s.clone().into(), a, sn.into(), env.reward(&s, a), false)?;
            let dh = Transition::new(sh.clone().into(), ah, shn.into(), env.reward(&sh, ah), false)?;
            pairs.push((d, dh));
        }
        let rep = verify_theorem2(&q, &lb, &pairs, suite.n_actions, 1.0, opts)?;
        merge(&mut total, &rep);
    }
    Ok(total.finish_deterministic())
}

fn merge(total: &mut BoundReport, rep: &BoundReport) {
    total.n_trials += rep.n_trials;
    total.n_skipped += rep.n_skipped;
    total.violation_count += rep.violation_count;
    total.flagged_violations += rep.flagged_violations;
    total.max_ratio = total.max_ratio.max(rep.max_ratio);
    for (l, r) in rep.lhs.iter().zip(&rep.rhs) {
        if total.lhs.len() < MAX_STORED_SAMPLES {
            total.lhs.push(*l);
            total.rhs.push(*r);
        }
    }
}

/// Parameters of the next-state shift suite on a linear-Gaussian system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSuite {
    pub dim: usize,
    pub n_actions: usize,
    pub sigma: f64,
    pub anchors: usize,
    pub visits: usize,
    pub n_pairs: usize,
    pub eps: f64,
    pub eps_kde: f64,
    pub action_weight: f64,
    pub matrix_seed: u64,
}

impl Default for ShiftSuite {
    fn default() -> Self {
        ShiftSuite {
            dim: 8,
            n_actions: 2,
            sigma: 0.1,
            anchors: 200,
            visits: 10,
            n_pairs: 1000,
            eps: 0.1,
            eps_kde: 0.1,
            action_weight: 1.0,
            matrix_seed: 7,
        }
    }
}

/// Environment, indicator-kernel KDE over logged visits of `anchors`
/// state-action pairs, and `n_pairs` pairs drawn from the anchors.
pub fn shift_setup(suite: &ShiftSuite, rng: &mut Rng) -> Result<(LinearGaussianEnv, KdeModel, Vec<StatePair>)> {
    let env = LinearGaussianEnv::from_params(&crate::env::LinGaussParams {
        dim: suite.dim,
        n_actions: suite.n_actions,
        sigma: suite.sigma,
        matrix_seed: suite.matrix_seed,
        ..Default::default()
    })?;
    let mut kde = KdeModel::new(suite.dim, suite.n_actions, crate::model::Kernel::Indicator, 1.0);
    kde.action_weight = suite.action_weight;
    let mut anchors = Vec::with_capacity(suite.anchors);
    for _ in 0..suite.anchors {
        let s = env.sample_state_uniform(rng).into_inner();
        let a = DiscreteAction(rng.random_range(0..suite.n_actions));
        for _ in 0..suite.visits {
            let sn = env.step(&s, a, rng)?.s_next;
            kde.add(&s, a, &sn)?;
        }
        anchors.push((s, a));
    }
    let pairs = (0..suite.n_pairs)
        .map(|_| {
            let (s, a) = anchors[rng.random_range(0..anchors.len())].clone();
            let (s_hat, a_hat) = anchors[rng.random_range(0..anchors.len())].clone();
            StatePair { s, a, s_hat, a_hat }
        })
        .collect();
    Ok((env, kde, pairs))
}

pub fn theorem1_suite(suite: &ShiftSuite, rng: &mut Rng) -> Result<BoundReport> {
    let (env, kde, pairs) = shift_setup(suite, rng)?;
    let l_sa = env.mean_lipschitz(suite.action_weight);
    verify_theorem1(&env, &kde, &pairs, l_sa, suite.eps, suite.eps_kde, rng)
}

/// Composed bound on the shift suite with a single-action linear Q and
/// closed-form constants over the drawn points.
pub fn prop1_suite(suite: &ShiftSuite, gamma: f64, alpha: f64, opts: Theorem2Options, rng: &mut Rng) -> Result<BoundReport> {
    let suite = ShiftSuite { n_actions: 1, ..*suite };
    let (env, kde, pairs) = shift_setup(&suite, rng)?;
    let (samples, skipped) = draw_shift_samples(&env, &kde, &pairs, rng)?;
    let sd = 1.0 / (suite.dim as f64).sqrt();
    let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let th: Vec<f64> = (0..suite.dim).map(|_| normal(sd)).collect();
    let b = normal(1.0);
    let thm: Vec<f64> = (0..suite.dim).map(|_| normal(sd)).collect();
    let bm = normal(1.0);
    let q = linear_q(&th, b, &thm, bm, alpha, gamma)?;
    let radius = samples
        .iter()
        .flat_map(|x| [&x.pair.s, &x.pair.s_hat, &x.s_next, &x.s_hat_next])
        .map(|v| l2_norm(v))
        .fold(0.0, f64::max);
    let (l1, d1) = env.reward_constants(radius);
    let lb = linear_bundle(&q, l1, d1, radius, env.mean_lipschitz(suite.action_weight));
    let mut rep = verify_prop1(&samples, &q, &lb, suite.eps, suite.eps_kde, 1, opts)?;
    rep.n_skipped = skipped;
    Ok(rep)
}
