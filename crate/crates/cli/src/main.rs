//! `vstreid` command-line driver.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;
use vstreid::experiment::artifacts::{
    BENCH_JSON, BIAS_JSON, CMC_CSV, GRAD_CHECK_JSON, JOINT_CKPT, LSTM_CKPT, POTENTIAL_CKPT, PROPOSALS_JSONL,
    REPORT_JSON, SCORES_JSONL,
};
use vstreid::experiment::{stages, Report, RunConfig, ScorerKind};
use vstreid::{Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "vstreid", version, about = "Path-proposal vehicle re-identification on synthetic camera networks")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// More log output on stderr (-v info, -vv debug). RUST_LOG wins when set.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the config file.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run config; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `paths.dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train the MRF potential and the Siamese network.
    TrainPotential,
    /// Pretrain the Path-LSTM on frozen MRF proposals.
    TrainLstm,
    /// Jointly finetune the Siamese network and the Path-LSTM.
    Finetune,
    /// Emit MRF proposals for every query/gallery pair.
    Propose,
    /// Emit final similarity scores for every query/gallery pair.
    Score,
    /// Rank test queries with every configured scorer.
    Eval {
        /// Overrides `eval.scorers`; repeatable.
        #[arg(long = "scorer", value_parser = parse_scorer)]
        scorers: Vec<ScorerKind>,
    },
    /// Count ψ evaluations of batch versus per-pair proposals.
    Bench {
        /// Overrides `bench.pairs`.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Run every finite-difference gradient suite.
    GradCheck,
    /// Everything above in one process.
    Pipeline,
}

fn parse_scorer(s: &str) -> Result<ScorerKind, String> {
    ScorerKind::parse(s).map_err(|e| e.to_string())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    let code = exit_code(kind);
    let body = json!({ "error": { "kind": kind, "exit_code": code, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Config file, then flags. Validation happens after both.
fn resolve(o: &Overrides, command: &Command) -> Result<RunConfig, Error> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(t) = o.threads {
        cfg.threads = t;
    }
    if let Some(d) = &o.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if let Some(out) = &o.out {
        cfg.paths.out_dir = out.clone();
    }
    match command {
        Command::Eval { scorers } if !scorers.is_empty() => cfg.eval.scorers = scorers.clone(),
        Command::Bench { pairs: Some(n) } => cfg.bench.pairs = *n,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_value(cfg: &RunConfig, name: &str) -> Value {
    json!(cfg.paths.artifact(name))
}

fn map_summary(report: &Report) -> Value {
    let maps: BTreeMap<&str, f64> = report.metrics.scorers.iter().map(|(k, m)| (k.as_str(), m.map)).collect();
    json!({ "mAP": maps, "ajs": report.metrics.ajs.as_ref().map(|a| a.ajs) })
}

fn run(cfg: &RunConfig, command: &Command) -> Result<Value, Error> {
    Ok(match command {
        Command::Synth => {
            let (dir, ds) = stages::synth(cfg)?;
            json!({ "dataset": dir, "cameras": ds.cameras().len(), "states": ds.states().len() })
        }
        Command::TrainPotential => {
            stages::train_potential(cfg)?;
            json!({ "checkpoint": path_value(cfg, POTENTIAL_CKPT) })
        }
        Command::TrainLstm => {
            stages::train_lstm(cfg)?;
            json!({ "checkpoint": path_value(cfg, LSTM_CKPT) })
        }
        Command::Finetune => {
            stages::finetune_stage(cfg)?;
            json!({ "checkpoint": path_value(cfg, JOINT_CKPT) })
        }
        Command::Propose => {
            let n = stages::propose(cfg)?;
            json!({ "proposals": path_value(cfg, PROPOSALS_JSONL), "pairs": n })
        }
        Command::Score => {
            let n = stages::score(cfg)?;
            json!({ "scores": path_value(cfg, SCORES_JSONL), "pairs": n })
        }
        Command::Eval { .. } => {
            let report = stages::eval(cfg)?;
            let mut v = map_summary(&report);
            v["report"] = path_value(cfg, REPORT_JSON);
            v["cmc"] = path_value(cfg, CMC_CSV);
            v
        }
        Command::Bench { .. } => {
            let b = stages::bench_stage(cfg)?;
            json!({
                "bench": path_value(cfg, BENCH_JSON),
                "shared_ratio": b.report.shared.counters.ratio,
                "query_ratio": b.report.queries.counters.ratio,
            })
        }
        Command::GradCheck => {
            let g = stages::grad_check(cfg)?;
            json!({ "grad_check": path_value(cfg, GRAD_CHECK_JSON), "max_rel_error": g.report.max_rel_error() })
        }
        Command::Pipeline => {
            let out = stages::pipeline(cfg)?;
            let mut v = map_summary(&out.run.report);
            v["report"] = path_value(cfg, REPORT_JSON);
            v["bench_shared_ratio"] = json!(out.bench.report.shared.counters.ratio);
            v["bias"] = path_value(cfg, BIAS_JSON);
            v["bias_rate"] = json!(out.bias.study.rate);
            v
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(ErrorKind::Config, e.render().to_string().trim()),
    };
    init_logging(cli.verbose);
    let cfg = match resolve(&cli.overrides, &cli.command) {
        Ok(cfg) => cfg,
        Err(e) => return fail(e.kind(), &e.to_string()),
    };
    match run(&cfg, &cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
