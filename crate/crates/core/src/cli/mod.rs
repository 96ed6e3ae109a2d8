//! Experiment subcommands and their file outputs.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::agent::QNetwork;
use crate::bounds::{self, BoundReport, LinearSuite, MlpSuite, ShiftSuite, Theorem2Options};
use crate::data::Transition;
use crate::dyna::{run_dyna, EvalPoint, RunTrace};
use crate::env::{DiscretePendulumEnv, EnvKind, LinearGaussianEnv};
use crate::error::{Error, Result};
use crate::filter::{filter_ood, Candidate, FilterReport, KeyMode};
use crate::index::{median_visited, recall_at_1, uniform_points, AnyIndex, ExactIndex, HnswIndex, HnswParams, NnIndex};
use crate::model::{AnyModel, KdeModel, ModelEnsemble};
use crate::seed::{RngSeed, Stream};

pub use config::{load_config, Bandwidth, EnvChoice, ExperimentConfig, FilterChoice, ModelChoice, SEED_ENV_VAR};

/// One evaluation point as written to `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub real_steps: usize,
    pub episode: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub kept_count: usize,
    pub rejected_count: usize,
    pub eps_k: Option<f64>,
    pub model_nll: Option<f64>,
    pub wallclock_ms: Option<u64>,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "real_steps,episode,eval_return_mean,eval_return_std,kept_count,rejected_count,eps_k,model_nll,wallclock_ms";

    pub fn from_eval(e: &EvalPoint, wallclock: bool) -> Self {
        MetricsRow {
            real_steps: e.real_steps,
            episode: e.episode,
            eval_return_mean: e.eval_return_mean,
            eval_return_std: e.eval_return_std,
            kept_count: e.kept_count,
            rejected_count: e.rejected_count,
            eps_k: e.eps_k,
            model_nll: e.model_nll.filter(|x| x.is_finite()),
            wallclock_ms: wallclock.then_some(e.wallclock_ms),
        }
    }

    /// Empty fields stand for absent values.
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.real_steps,
            self.episode,
            self.eval_return_mean,
            self.eval_return_std,
            self.kept_count,
            self.rejected_count,
            opt(self.eps_k),
            opt(self.model_nll),
            self.wallclock_ms.map(|v| v.to_string()).unwrap_or_default()
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse(format!("expected 9 fields, got {}", f.len())));
        }
        let p = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("bad number `{s}`"))) };
        let u = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Parse(format!("bad integer `{s}`"))) };
        let o = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { p(s).map(Some) } };
        Ok(MetricsRow {
            real_steps: u(f[0])?,
            episode: u(f[1])?,
            eval_return_mean: p(f[2])?,
            eval_return_std: p(f[3])?,
            kept_count: u(f[4])?,
            rejected_count: u(f[5])?,
            eps_k: o(f[6])?,
            model_nll: o(f[7])?,
            wallclock_ms: if f[8].is_empty() { None } else { Some(u(f[8])? as u64) },
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MetricsRow::HEADER => {}
        _ => return Err(Error::Parse(format!("{}: missing metrics header", path.display()))),
    }
    lines.map(MetricsRow::parse_csv).collect()
}

pub fn build_env(cfg: &ExperimentConfig) -> Result<EnvKind> {
    Ok(match &cfg.env {
        EnvChoice::Pendulum(p) => EnvKind::Pendulum(DiscretePendulumEnv::new(p.clone())?),
        EnvChoice::LinearGaussian(p) => EnvKind::LinGauss(LinearGaussianEnv::from_params(p)?),
    })
}

pub fn build_model(cfg: &ExperimentConfig, state_dim: usize, n_actions: usize, seed: RngSeed) -> AnyModel {
    match cfg.model {
        ModelChoice::Kde { kernel, bandwidth } => {
            let h = match bandwidth {
                Bandwidth::Fixed(h) => h,
                Bandwidth::Auto => 1.0,
            };
            let mut m = KdeModel::new(state_dim, n_actions, kernel, h);
            m.auto_bandwidth = bandwidth == Bandwidth::Auto;
            m.bounds = cfg.mlp.bounds;
            AnyModel::Kde(m)
        }
        ModelChoice::Mlp { ensemble } => {
            let mut rng = seed.stream(Stream::ModelInit);
            AnyModel::Mlp(ModelEnsemble::new(ensemble, state_dim, n_actions, &cfg.mlp, &mut rng))
        }
    }
}

/// Everything one training run produces.
pub struct TrainOutcome {
    pub seed: u64,
    pub trace: RunTrace,
    pub rows: Vec<MetricsRow>,
    pub dir: PathBuf,
}

/// One training run writing `metrics.csv`, `config_resolved.toml` and
/// `trace.jsonl` (plus buffer dumps on request) into `dir`.
pub fn train_once(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    let mut resolved = cfg.clone();
    resolved.seed = seed;
    resolved.seeds.clear();
    resolved.output_dir = dir.to_path_buf();
    fs::write(dir.join("config_resolved.toml"), resolved.to_dotted_toml())?;

    let env = build_env(cfg)?;
    let spec = env.as_env().spec();
    let rs = RngSeed(seed);
    let mut model = build_model(cfg, spec.state_dim, spec.n_actions, rs);
    let mut agent = QNetwork::new(spec.state_dim, spec.n_actions, &cfg.agent, &mut rs.stream(Stream::AgentInit))?;
    let mut trace = RunTrace::default();
    let result = run_dyna(env.as_env(), &mut model, &mut agent, &cfg.dyna, rs, &mut trace);

    let rows: Vec<MetricsRow> = trace.evals.iter().map(|e| MetricsRow::from_eval(e, cfg.wallclock)).collect();
    let mut csv = String::from(MetricsRow::HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    let mut jl = std::io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?);
    for s in &trace.steps {
        serde_json::to_writer(&mut jl, s).map_err(|e| Error::Parse(e.to_string()))?;
        jl.write_all(b"\n")?;
    }
    jl.flush()?;

    let state = result?;
    if cfg.dump_buffers {
        let real: Vec<&Transition> = state.d_real.iter().collect();
        let sim: Vec<&Transition> = state.pool.iter().collect();
        write_json(&dir.join("real_buffer.json"), &real)?;
        write_json(&dir.join("sim_buffer.json"), &sim)?;
    }
    Ok(TrainOutcome {
        seed,
        trace,
        rows,
        dir: dir.to_path_buf(),
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, s)?;
    Ok(())
}

/// Aggregate row across seeds at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub real_steps: usize,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// Half-width of the two-sided 95% Student-t interval for the mean.
    pub ci95: Option<f64>,
}

pub const AGGREGATE_HEADER: &str = "real_steps,n_seeds,eval_return_mean,eval_return_std,eval_return_ci95";

pub fn t_interval_half_width(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?.inverse_cdf(0.975);
    Some(t * (var / n as f64).sqrt())
}

/// Rows are matched by position; every run shares the evaluation schedule.
pub fn aggregate(runs: &[Vec<MetricsRow>]) -> Vec<AggregateRow> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let xs: Vec<f64> = runs.iter().map(|r| r[i].eval_return_mean).collect();
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                real_steps: runs[0][i].real_steps,
                n_seeds: n,
                mean,
                std,
                ci95: t_interval_half_width(&xs),
            }
        })
        .collect()
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainOutcome>> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    if cfg.seeds.is_empty() {
        return Ok(vec![train_once(cfg, cfg.seed, out)?]);
    }
    let mut outcomes = Vec::new();
    for &s in &cfg.seeds {
        outcomes.push(train_once(cfg, s, &out.join(format!("seed_{s}")))?);
    }
    let rows: Vec<Vec<MetricsRow>> = outcomes.iter().map(|o| o.rows.clone()).collect();
    let mut csv = format!("{AGGREGATE_HEADER}\n");
    for a in aggregate(&rows) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            a.real_steps,
            a.n_seeds,
            a.mean,
            a.std,
            a.ci95.map(|x| x.to_string()).unwrap_or_default()
        );
    }
    fs::write(out.join("aggregate.csv"), csv)?;
    Ok(outcomes)
}

/// Reports of every selected suite over every bounds seed.
pub fn run_bound_suites(cfg: &ExperimentConfig, corrupt_c1: bool) -> Result<Vec<BoundReport>> {
    let b = &cfg.bounds;
    let opts = Theorem2Options {
        form: b.c2_form,
        c1_scale: if corrupt_c1 { 0.5 } else { 1.0 },
    };
    let has = |s: &str| b.suites.iter().any(|x| x == s);
    let mut reports = Vec::new();
    for &seed in &b.seeds {
        let mut rng = RngSeed(seed).stream(Stream::Bounds);
        let tag = |mut r: BoundReport| {
            r.name = format!("{}[seed={seed}]", r.name);
            r
        };
        if has("chebyshev") {
            for i in 0..b.chebyshev_configs {
                let dim = rng.random_range(1..=4usize);
                let mut v = |lo: f64, hi: f64| -> Vec<f64> { (0..dim).map(|_| rng.random_range(lo..hi)).collect() };
                let (mu, s2, muh, s2h) = (v(-2.0, 2.0), v(0.01, 2.0), v(-2.0, 2.0), v(0.01, 2.0));
                let eps = rng.random_range(0.05..0.5);
                let mut r = bounds::verify_chebyshev(&mu, &s2, &muh, &s2h, eps, b.chebyshev_trials, &mut rng)?;
                r.name = format!("chebyshev#{i}");
                reports.push(tag(r));
            }
        }
        let shift = ShiftSuite {
            n_pairs: b.pairs,
            eps: b.epsilon,
            eps_kde: b.epsilon_kde,
            ..Default::default()
        };
        if has("theorem1") {
            reports.push(tag(bounds::theorem1_suite(&shift, &mut rng)?));
        }
        if has("theorem2") {
            let lin = LinearSuite {
                gamma: b.gamma,
                alpha: b.alpha,
                n_thetas: b.thetas,
                pairs_per_theta: b.pairs,
                ..Default::default()
            };
            reports.push(tag(bounds::linear_theorem2_suite(&lin, opts, &mut rng)?));
            let mlp = MlpSuite {
                gamma: b.gamma,
                alpha: b.alpha,
                safety: b.safety,
                n_nets: b.thetas,
                pairs_per_net: (b.pairs / b.thetas.max(1)).max(1),
                ..Default::default()
            };
            reports.push(tag(bounds::mlp_theorem2_suite(&mlp, opts, &mut rng)?));
            reports.push(tag(bounds::c1_fixture(opts)?));
        }
        if has("prop1") {
            reports.push(tag(bounds::prop1_suite(&shift, b.gamma, b.alpha, opts, &mut rng)?));
        }
    }
    Ok(reports)
}

/// Writes `bounds.csv`; exit code 0 iff every verdict passes.
pub fn cmd_verify_bounds(cfg: &ExperimentConfig, corrupt_c1: bool) -> Result<(i32, Vec<BoundReport>)> {
    let reports = run_bound_suites(cfg, corrupt_c1)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = format!("{}\n", BoundReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(cfg.output_dir.join("bounds.csv"), csv)?;
    let code = if reports.iter().all(BoundReport::passed) { 0 } else { 1 };
    Ok((code, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub dim: usize,
    pub recall_at_1: f64,
    pub median_visited: f64,
    pub build_ms: u128,
    pub query_us: f64,
}

pub const BENCH_HEADER: &str = "n,dim,recall_at_1,median_visited,build_ms,query_us";

/// One row per nonzero size; zero sizes are skipped with a warning on stderr.
pub fn bench_index(sizes: &[usize], dim: usize, n_queries: usize, params: HnswParams, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        if n == 0 {
            eprintln!("warning: skipping bench size n=0");
            continue;
        }
        let mut rng = RngSeed(seed).substream(1000 + n as u64);
        let pts = uniform_points(n, dim, &mut rng);
        let queries = uniform_points(n_queries, dim, &mut rng);
        let t0 = Instant::now();
        let mut h = HnswIndex::new(dim, HnswParams { seed, ..params });
        for p in &pts {
            h.insert(p)?;
        }
        let build_ms = t0.elapsed().as_millis();
        let mut e = ExactIndex::new(dim);
        for p in &pts {
            e.insert(p)?;
        }
        let t1 = Instant::now();
        for q in &queries {
            h.nn_distance(q)?;
        }
        let query_us = t1.elapsed().as_secs_f64() * 1e6 / n_queries as f64;
        rows.push(BenchRow {
            n,
            dim,
            recall_at_1: recall_at_1(&h, &e, &queries)?,
            median_visited: median_visited(&h, &queries)?,
            build_ms,
            query_us,
        });
    }
    Ok(rows)
}

pub fn cmd_bench_index(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let rows = bench_index(&cfg.bench.sizes, cfg.bench.dim, cfg.bench.queries, cfg.dyna.index, cfg.seed)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.n, r.dim, r.recall_at_1, r.median_visited, r.build_ms, r.query_us
        );
    }
    fs::write(cfg.output_dir.join("bench_index.csv"), csv)?;
    Ok(rows)
}

pub fn read_buffer(path: &Path) -> Result<Vec<Transition>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Index the real buffer, filter the simulated one at `eps`. Simulated
/// transitions count as first rollout steps in the per-step tally.
pub fn filter_demo(
    real: &[Transition],
    sim: Vec<Transition>,
    eps: f64,
    key_mode: KeyMode,
    action_weight: f64,
    exact: bool,
    n_actions: usize,
) -> Result<FilterReport> {
    let dim = match (key_mode, real.first()) {
        (_, None) => return Err(Error::EmptyBuffer),
        (KeyMode::StateOnly, Some(t)) => t.state_dim(),
        (KeyMode::StateAction, Some(t)) => t.state_dim() + n_actions,
    };
    let mut idx = AnyIndex::new(dim, exact, HnswParams::default());
    for t in real {
        idx.insert(&crate::filter::key_for(key_mode, t, n_actions, action_weight))?;
    }
    let batch = sim.into_iter().map(|t| Candidate { t, step: 1 }).collect();
    let (_, report) = filter_ood(&idx, batch, eps, key_mode, n_actions, action_weight, 1)?;
    Ok(report)
}

/// Action count implied by a pair of buffers (largest action id plus one).
pub fn infer_n_actions(bufs: &[&[Transition]]) -> usize {
    bufs.iter().flat_map(|b| b.iter()).map(|t| t.a.0 + 1).max().unwrap_or(1)
}
