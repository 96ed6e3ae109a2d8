use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dyna_ood::cli::{self, load_config};
use dyna_ood::filter::KeyMode;

#[derive(Parser)]
#[command(name = "dyna-ood", version, about = "Dyna-style MBRL with an out-of-distribution rollout filter")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyArg {
    State,
    StateAction,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the Dyna loop and write metrics.csv, config_resolved.toml and trace.jsonl.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the bound-verification suites; exit 1 if any verdict fails.
    VerifyBounds {
        #[arg(short, long)]
        config: PathBuf,
        /// Halve C1 in the drift checks (should produce violations).
        #[arg(long)]
        corrupt_c1: bool,
    },
    /// HNSW recall and visited-node counts against exact search.
    BenchIndex {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Filter a saved simulated buffer against a saved real buffer.
    FilterDemo {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        sim: PathBuf,
        /// Reject level; `inf` keeps everything.
        #[arg(long)]
        epsilon: f64,
        #[arg(long, value_enum, default_value = "state-action")]
        key: KeyArg,
        #[arg(long, default_value_t = 1.0)]
        action_weight: f64,
        /// Exact nearest-neighbour search instead of HNSW.
        #[arg(long)]
        exact: bool,
    },
}

fn run(args: Args) -> dyna_ood::Result<i32> {
    match args.cmd {
        Cmd::Train { config } => {
            let cfg = load_config(&config)?;
            for o in cli::cmd_train(&cfg)? {
                let last = o.rows.last().map(|r| r.eval_return_mean);
                println!(
                    "seed {}: {} evals, last eval return {}, output {}",
                    o.seed,
                    o.rows.len(),
                    last.map_or("-".to_string(), |x| format!("{x:.3}")),
                    o.dir.display()
                );
            }
            Ok(0)
        }
        Cmd::VerifyBounds { config, corrupt_c1 } => {
            let cfg = load_config(&config)?;
            let (code, reports) = cli::cmd_verify_bounds(&cfg, corrupt_c1)?;
            for r in &reports {
                println!(
                    "{:<32} {:>8?} violations {}/{} (flagged {}) max lhs/rhs {:.4}",
                    r.name, r.verdict, r.violation_count, r.n_trials, r.flagged_violations, r.max_ratio
                );
            }
            for r in reports.iter().filter(|r| !r.passed()) {
                eprintln!("failed: {}", serde_json::to_string(r).unwrap_or_default());
            }
            Ok(code)
        }
        Cmd::BenchIndex { config } => {
            let cfg = load_config(&config)?;
            println!("{}", cli::BENCH_HEADER);
            for r in cli::cmd_bench_index(&cfg)? {
                println!("{},{},{},{},{},{:.2}", r.n, r.dim, r.recall_at_1, r.median_visited, r.build_ms, r.query_us);
            }
            Ok(0)
        }
        Cmd::FilterDemo {
            real,
            sim,
            epsilon,
            key,
            action_weight,
            exact,
        } => {
            let real = cli::read_buffer(&real)?;
            let sim = cli::read_buffer(&sim)?;
            let n_actions = cli::infer_n_actions(&[&real, &sim]);
            let key_mode = match key {
                KeyArg::State => KeyMode::StateOnly,
                KeyArg::StateAction => KeyMode::StateAction,
            };
            let report = cli::filter_demo(&real, sim, epsilon, key_mode, action_weight, exact, n_actions)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
