use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use log::error;

use oncex::eval::{load_records, run_eval, EvalOptions};
use oncex::run::{load_pipeline, run_cohort, RunOptions};
use oncex::server::{serve, ServeOptions};
use oncex::store::ReviewStore;
use oncex::HarnessError;
use oncex_core::evaluation::BlbConfig;
use oncex_core::schema::SchemaRegistry;

#[derive(Parser)]
#[command(name = "oncex", version, about = "Oncology entity extraction, evaluation and review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract structured records for every patient in a corpus.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Answer synthesis calls from a fixture file instead of a model.
        #[arg(long)]
        mock_fixtures: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Exit 0 even if some entity pipelines aborted.
        #[arg(long)]
        keep_going: bool,
        /// Reference date for collation rules (YYYY-MM-DD).
        #[arg(long)]
        today: Option<NaiveDate>,
    },
    /// Score predicted records against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pipeline config supplying the default date tolerance.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        date_tolerance: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the adjudication API.
    ReviewServe {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Print adjudication tallies and rates replayed from a store.
    ExportTallies {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cmd: Command) -> Result<i32, HarnessError> {
    match cmd {
        Command::Run {
            config,
            corpus,
            out,
            mock_fixtures,
            parallel,
            keep_going,
            today,
        } => {
            let summary = run_cohort(&RunOptions {
                config,
                corpus_root: corpus,
                output_dir: out,
                mock_fixtures,
                parallel,
                keep_going,
                today,
            })?;
            println!("{} patients, {} entity failures", summary.patients.len(), summary.failures.len());
            Ok(summary.exit_code(keep_going))
        }
        Command::Eval {
            pred,
            gt,
            config,
            report,
            date_tolerance,
            seed,
        } => {
            let configured = match &config {
                Some(path) => load_pipeline(path)?.config.evaluation.date_tolerance_days,
                None => oncex_core::pipeline::EvaluationConfig::default().date_tolerance_days,
            };
            let r = run_eval(&EvalOptions {
                pred_dir: pred,
                gt_dir: gt,
                report_path: report,
                date_tolerance_days: date_tolerance.unwrap_or(configured),
                blb: BlbConfig { seed, ..Default::default() },
            })?;
            print!("{}", r.summary());
            Ok(0)
        }
        Command::ReviewServe {
            outputs,
            corpus,
            store,
            ground_truth,
            bind,
        } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| HarnessError::Run(e.to_string()))?;
            rt.block_on(serve(&ServeOptions {
                output_dir: outputs,
                corpus_root: corpus,
                store_dir: store,
                ground_truth,
                bind,
            }))?;
            Ok(0)
        }
        Command::ExportTallies { outputs, store, out } => {
            let registry = SchemaRegistry::bundled();
            let records = load_records(&outputs, &registry)?;
            let store = ReviewStore::open(&store, registry, records).map_err(|e| HarnessError::Run(e.to_string()))?;
            let body = serde_json::json!({
                "patients": store.tallies(),
                "dashboard": store.dashboard(),
            });
            let text = serde_json::to_string_pretty(&body).expect("tallies serialize") + "\n";
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| HarnessError::Io {
                    path: p,
                    reason: e.to_string(),
                })?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
