// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attnflow::config::ModelConfig;
use attnflow::error::{Error, Result};
use attnflow::harness::ablate::{cmd_ablate, AblationMode, DEFAULT_TOP_N};
use attnflow::harness::analyze::cmd_analyze;
use attnflow::harness::bench::{bench_csv, cmd_bench, DEFAULT_REPETITIONS};
use attnflow::harness::generate::cmd_generate;
use attnflow::harness::tools::{cmd_fixture, cmd_inspect, cmd_metrics, FixtureKind, FixtureRequest};
use attnflow::harness::{Overrides, RunSettings, DEFAULT_OUT_DIR};

/// Attention interventions and saliency analysis for small decoders.
#[derive(Parser)]
#[command(name = "attnflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Versioned JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weights file (overrides the config).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Prompt JSON file (overrides the config).
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Intervention preset, replacing the config's intervention.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, all or layers=a..b
    #[arg(long)]
    capture: Option<String>,
    #[arg(long)]
    no_tai: bool,
    #[arg(long)]
    no_hai: bool,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl RunArgs {
    fn settings(&self) -> Result<RunSettings> {
        RunSettings::resolve(&Overrides {
            config: self.config.clone(),
            weights: self.weights.clone(),
            prompt: self.prompt.clone(),
            preset: self.preset.clone(),
            out: self.out.clone(),
            seed: self.seed,
            capture: self.capture.clone(),
            no_tai: self.no_tai,
            no_hai: self.no_hai,
            max_new_tokens: self.max_new_tokens,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Greedy generation with the configured intervention.
    Generate(RunArgs),
    /// Dump attention and saliency, then write reception, head and flow tables.
    Analyze(RunArgs),
    /// Mask top heads of each type and compare against the baseline.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Repeatable; all modes when omitted.
        #[arg(long = "mode")]
        modes: Vec<AblationMode>,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
    },
    /// Decode throughput of baseline, TAI, HAI and both.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        repetitions: usize,
    },
    /// CHAIR and POPE scores from JSONL annotation files.
    Metrics {
        #[arg(long)]
        chair: Option<PathBuf>,
        #[arg(long)]
        pope: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the frozen token and head classifications.
    Inspect(RunArgs),
    /// Write a synthetic model and matching prompt.
    Fixture {
        /// random or pathology
        #[arg(long, default_value = "pathology")]
        kind: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        max_seq_len: Option<usize>,
        #[arg(long, default_value_t = 3)]
        sys: usize,
        #[arg(long, default_value_t = 20)]
        vis: usize,
        #[arg(long, default_value_t = 6)]
        instr: usize,
        /// Weights file name; `.json` writes JSON, anything else the binary container.
        #[arg(long, default_value = "model.atnf")]
        weights_name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let r = cmd_generate(&a.settings()?)?;
            print_json(&serde_json::json!({
                "generated": r.generated,
                "tokens_per_second": r.timing.tokens_per_second,
                "dumps": r.dumps,
            }))
        }
        Command::Analyze(a) => print_json(&cmd_analyze(&a.settings()?)?),
        Command::Ablate { run, modes, top_n } => {
            let modes = if modes.is_empty() { AblationMode::ALL.to_vec() } else { modes };
            print_json(&cmd_ablate(&run.settings()?, &modes, top_n)?)
        }
        Command::Bench { run, repetitions } => {
            let r = cmd_bench(&run.settings()?, repetitions)?;
            emit(&bench_csv(&r))
        }
        Command::Metrics { chair, pope, out } => {
            let r = cmd_metrics(chair.as_deref(), pope.as_deref(), &out_dir(out))?;
            emit(&r.table())
        }
        Command::Inspect(a) => print_json(&cmd_inspect(&a.settings()?)?),
        Command::Fixture {
            kind,
            seed,
            layers,
            heads,
            dim,
            vocab,
            max_seq_len,
            sys,
            vis,
            instr,
            weights_name,
            out,
        } => {
            let config = if [layers, heads, dim, vocab, max_seq_len].iter().any(Option::is_some) {
                let d = attnflow::fixtures::pathology_config();
                Some(ModelConfig::new(
                    layers.unwrap_or(d.num_layers),
                    heads.unwrap_or(d.num_heads),
                    dim.unwrap_or(d.model_dim),
                    vocab.unwrap_or(d.vocab_size),
                    max_seq_len.unwrap_or(d.max_seq_len),
                ))
            } else {
                None
            };
            let req = FixtureRequest {
                kind,
                seed,
                config,
                sys,
                vis,
                instr,
                weights_name,
            };
            print_json(&cmd_fixture(&req, &out_dir(out))?)
        }
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({"error": e.kind(), "message": e.to_string()});
    if let Error::Config(fields) = e {
        v["fields"] = serde_json::json!(fields
            .iter()
            .map(|f| serde_json::json!({"path": f.path, "message": f.message}))
            .collect::<Vec<_>>());
    }
    v
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATNF_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(if matches!(e, Error::Usage(_) | Error::Config(_)) { 2 } else { 1 })
        }
    }
}
