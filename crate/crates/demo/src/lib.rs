//! wasm-bindgen entry points for `www/index.html`. Every function returns a
//! JSON string so the page needs no glue beyond `JSON.parse`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde_json::json;
use wasm_bindgen::prelude::*;

use dyna_ood::bounds;
use dyna_ood::filter::{dynamic_keep_mask, elimination_fraction};
use dyna_ood::index::{ExactIndex, HnswIndex, HnswParams, NnIndex};
use dyna_ood::seed::{RngSeed, Stream};

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Real points from a Gaussian blob at the origin, simulated points spread
/// wider. `eps < 0` switches to the dynamic rule with elimination fraction `-eps`.
#[wasm_bindgen]
pub fn filter_points(seed: u64, n_real: usize, n_sim: usize, spread: f64, eps: f64, exact: bool) -> Result<String, JsValue> {
    let mut rng = RngSeed(seed).stream(Stream::Rollout);
    let mut gauss = |s: f64| -> Vec<f64> { (0..2).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect() };
    let real: Vec<Vec<f64>> = (0..n_real).map(|_| gauss(0.5)).collect();
    let sim: Vec<Vec<f64>> = (0..n_sim).map(|_| gauss(spread)).collect();
    let index: Box<dyn NnIndex> = if exact {
        Box::new(ExactIndex::new(2))
    } else {
        Box::new(HnswIndex::new(2, HnswParams::default()))
    };
    let mut index = index;
    for p in &real {
        index.insert(p).map_err(err)?;
    }
    let dists = sim
        .iter()
        .map(|q| index.nn_distance(q).map(|(d, _)| d))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(err)?;
    let (kept, threshold) = if eps < 0.0 {
        dynamic_keep_mask(&dists, (-eps).min(1.0))
    } else {
        (dists.iter().map(|d| *d < eps).collect(), eps)
    };
    Ok(json!({
        "real": real,
        "sim": sim,
        "dist": dists,
        "kept": kept,
        "threshold": threshold,
        "kept_count": kept.iter().filter(|k| **k).count(),
    })
    .to_string())
}

/// Elimination fraction over episodes `1..=k_total` for rollout length `l`.
#[wasm_bindgen]
pub fn schedule_curve(k_total: usize, l: usize) -> Result<String, JsValue> {
    let f = (1..=k_total)
        .map(|k| elimination_fraction(k_total, l, k))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(err)?;
    Ok(json!({ "f": f }).to_string())
}

/// Draws from two isotropic Gaussians and compares the empirical rate of
/// `|X - Y| >= r(eps)` with `eps`.
#[wasm_bindgen]
pub fn chebyshev_check(seed: u64, dim: usize, gap: f64, sigma: f64, sigma_hat: f64, eps: f64, trials: usize) -> Result<String, JsValue> {
    let mut rng = RngSeed(seed).stream(Stream::Bounds);
    let mu = vec![0.0; dim];
    let mut mu_hat = vec![0.0; dim];
    if dim > 0 {
        mu_hat[0] = gap;
    }
    let s2 = vec![sigma * sigma; dim];
    let s2h = vec![sigma_hat * sigma_hat; dim];
    let trials = trials.max(bounds::MIN_CHEBYSHEV_TRIALS);
    let rep = bounds::verify_chebyshev(&mu, &s2, &mu_hat, &s2h, eps, trials, &mut rng).map_err(err)?;
    let radius = bounds::chebyshev_radius(s2.iter().sum(), s2h.iter().sum(), eps, gap);
    Ok(json!({
        "radius": radius,
        "rate": rep.violation_rate(),
        "eps": eps,
        "trials": rep.n_trials,
        "pass": rep.passed(),
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_points_threshold_is_respected() {
        let v: serde_json::Value = serde_json::from_str(&filter_points(1, 50, 80, 2.0, 0.3, true).unwrap()).unwrap();
        let d = v["dist"].as_array().unwrap();
        let k = v["kept"].as_array().unwrap();
        for (d, k) in d.iter().zip(k) {
            assert_eq!(d.as_f64().unwrap() < 0.3, k.as_bool().unwrap());
        }
    }

    #[test]
    fn schedule_curve_ends_at_zero() {
        let v: serde_json::Value = serde_json::from_str(&schedule_curve(5, 4).unwrap()).unwrap();
        let f: Vec<f64> = v["f"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(f.len(), 5);
        assert!((f[0] - 0.75).abs() < 1e-12);
        assert_eq!(f[4], 0.0);
    }

    #[test]
    fn chebyshev_check_reports_rate() {
        let v: serde_json::Value = serde_json::from_str(&chebyshev_check(3, 2, 0.5, 1.0, 0.7, 0.2, 10_000).unwrap()).unwrap();
        assert!(v["rate"].as_f64().unwrap() <= 0.2);
    }
}
