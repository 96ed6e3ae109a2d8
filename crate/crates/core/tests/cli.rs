use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dyna-ood");

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("DYNA_OOD_SEED");
    if let Some(s) = seed_env {
        c.env("DYNA_OOD_SEED", s);
    }
    c.output().unwrap()
}

fn small_train(out: &Path, extra: &str) -> String {
    format!(
        "dyna.k = 2\ndyna.h = 40\ndyna.n = 4\ndyna.g = 2\neval.every = 20\neval.episodes = 1\nagent.hidden = [8]\nseed = 3\noutput.dir = \"{}\"\n{extra}",
        out.display()
    )
}

fn bounds_cfg(out: &Path) -> String {
    format!(
        "output.dir = \"{}\"\nbounds.seeds = [1]\nbounds.chebyshev_configs = 2\nbounds.trials = 10000\nbounds.pairs = 200\nbounds.thetas = 2\n",
        out.display()
    )
}

#[test]
fn train_writes_metrics_with_exact_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write(tmp.path(), "c.toml", &small_train(&out, ""));
    let o = run(&["train", "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "real_steps,episode,eval_return_mean,eval_return_std,kept_count,rejected_count,eps_k,model_nll,wallclock_ms"
    );
    assert!(csv.lines().count() > 1);
    assert!(out.join("config_resolved.toml").exists());
    assert!(out.join("trace.jsonl").exists());
}

#[test]
fn unknown_key_is_rejected_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "dyna.k = 2\ndyna.bogus = 1\n");
    let o = run(&["train", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dyna.bogus"));
}

#[test]
fn env_seed_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ca = write(tmp.path(), "a.toml", &small_train(&a, ""));
    let cb = write(tmp.path(), "b.toml", &small_train(&b, "").replace("seed = 3", "seed = 99"));
    assert!(run(&["train", "--config", ca.to_str().unwrap()], Some("11")).status.success());
    assert!(run(&["train", "--config", cb.to_str().unwrap()], Some("11")).status.success());
    let ra = std::fs::read_to_string(a.join("config_resolved.toml")).unwrap();
    assert!(ra.contains("seed = 11"), "{ra}");
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn multi_seed_writes_aggregate_with_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("multi");
    let cfg = write(tmp.path(), "c.toml", &small_train(&out, "seeds = [1, 2, 3]\n"));
    let o = run(&["train", "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for s in 1..=3 {
        assert!(out.join(format!("seed_{s}")).join("metrics.csv").exists());
    }
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let mut lines = agg.lines();
    assert_eq!(
        lines.next().unwrap(),
        "real_steps,n_seeds,eval_return_mean,eval_return_std,eval_return_ci95"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[1], "3");
    assert!(row[4].parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn verify_bounds_passes_then_fails_with_corrupted_c1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let cfg = write(tmp.path(), "c.toml", &bounds_cfg(&out));
    let ok = run(&["verify-bounds", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(out.join("bounds.csv").exists());
    let bad = run(&["verify-bounds", "--config", cfg.to_str().unwrap(), "--corrupt-c1"], None);
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("violation"), "{stderr}");
}

#[test]
fn too_few_chebyshev_trials_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let cfg = write(tmp.path(), "c.toml", &bounds_cfg(&out).replace("bounds.trials = 10000", "bounds.trials = 500"));
    let o = run(&["verify-bounds", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bounds.trials"));
}

#[test]
fn bench_index_skips_empty_size() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let cfg = write(
        tmp.path(),
        "c.toml",
        &format!("output.dir = \"{}\"\nbench.sizes = [0, 500]\nbench.dim = 3\nbench.queries = 50\n", out.display()),
    );
    let o = run(&["bench-index", "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("bench_index.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("500,3,"));
}

#[test]
fn filter_demo_on_dumped_buffers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write(tmp.path(), "c.toml", &small_train(&out, "output.dump_buffers = true\n"));
    assert!(run(&["train", "--config", cfg.to_str().unwrap()], None).status.success());
    let real = out.join("real_buffer.json");
    let sim = out.join("sim_buffer.json");
    let count = |eps: &str| -> (u64, u64) {
        let o = run(
            &["filter-demo", "--real", real.to_str().unwrap(), "--sim", sim.to_str().unwrap(), "--epsilon", eps, "--exact"],
            None,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        (v["kept"].as_u64().unwrap(), v["rejected"].as_u64().unwrap())
    };
    let (k_inf, r_inf) = count("inf");
    assert_eq!(r_inf, 0);
    let (k0, r0) = count("0");
    assert_eq!(k0, 0);
    assert_eq!(k0 + r0, k_inf);
}
