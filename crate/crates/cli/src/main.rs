use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pad_core::decoder::Strategy;
use pad_core::pipeline::{self, DecodeRequest, RunConfig, StageSelection};
use pad_core::PadError;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Personalized alignment at decoding time on a synthetic token MDP.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error,
/// 3 I/O or artifact error, 4 verification failure.
#[derive(Debug, Parser)]
#[command(name = "pad", version)]
struct Cli {
    /// TOML run configuration; built-in defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `paths.out_dir` [default: runs/default].
    #[arg(long, global = true, env = "PAD_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus, preference pairs and held-out prompts.
    GenData,
    /// Train the personalized reward model.
    Train {
        /// Stage to run: 1 (backbone), 2 (preference head) or all.
        #[arg(long, default_value = "all")]
        stage: StageSelection,
    },
    /// Decode prompts with preference guidance.
    Decode(DecodeArgs),
    /// Compare two generation files, or sweep β and k.
    Eval(EvalArgs),
    /// Run the property battery and the bound audit.
    Verify {
        /// Seed for every randomized check [default: verify.seed = 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Random tabular MDPs in the bound audit [default: verify.instances = 500].
        #[arg(long)]
        instances: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Preference as comma-separated dimension names or `name=weight` pairs.
    #[arg(long, short, default_value = "")]
    preference: String,
    /// Prompt file [default: the held-out prompts from gen-data].
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Generations file [default: reports/generations_<preference>.jsonl].
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write per-step traces next to the generations.
    #[arg(long)]
    trace: bool,
    /// Greedy decoding from the base model alone.
    #[arg(long)]
    base_only: bool,
    /// Guidance strength [default: decode.beta = 1.0].
    #[arg(long)]
    beta: Option<f64>,
    /// Candidate count [default: decode.k = 10].
    #[arg(long)]
    k: Option<usize>,
    /// greedy, stochastic or best_of_k [default: decode.strategy = greedy].
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Sampling temperature [default: decode.temperature = 0.7].
    #[arg(long)]
    temperature: Option<f64>,
    /// Sampling seed [default: decode.seed = 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum generated tokens [default: decode.max_new_tokens = 128].
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// First generation file.
    #[arg(required_unless_present = "sweep")]
    run_a: Option<PathBuf>,
    /// Second generation file, paired with the first by prompt.
    #[arg(required_unless_present = "sweep")]
    run_b: Option<PathBuf>,
    /// Preference whose dimensions decide wins.
    #[arg(long, short)]
    preference: String,
    /// Report path stem; `.csv` and `.json` are written [default: reports/eval_<preference>].
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Sweep β and k against base greedy on the held-out prompts.
    #[arg(long)]
    sweep: bool,
    /// β values for the sweep [default: eval.beta_sweep].
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// k values for the sweep [default: eval.k_sweep].
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PadError>() {
        Some(PadError::Config(_) | PadError::BadSpec(_) | PadError::UnknownDimension(_)) => EXIT_CONFIG,
        Some(PadError::Io { .. } | PadError::Json { .. } | PadError::Schema { .. }) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.pin_hash();
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg)?;
            println!("corpus: {} trajectories -> {}", s.corpus, cfg.paths.corpus().display());
            println!("pairs: {} -> {}", s.pairs, cfg.paths.pairs().display());
            for (pref, n) in &s.pairs_per_preference {
                println!("  {pref}: {n}");
            }
            println!("held-out prompts: {} -> {}", s.prompts, cfg.paths.prompts().display());
        }
        Command::Train { stage } => {
            let s = pipeline::train(&cfg, stage)?;
            for (name, log) in [("stage 1", &s.stage1), ("stage 2", &s.stage2)] {
                if let (Some(first), Some(last)) = (log.first(), log.last()) {
                    println!(
                        "{name}: loss {:.6} -> {:.6} over {} epochs",
                        first.loss,
                        last.loss,
                        log.len()
                    );
                }
            }
            println!("checkpoint -> {}", s.checkpoint.display());
        }
        Command::Decode(a) => {
            let d = &mut cfg.decode;
            if let Some(v) = a.beta {
                d.beta = v;
            }
            if let Some(v) = a.k {
                d.k = v;
            }
            if let Some(v) = a.strategy {
                d.strategy = v;
            }
            if let Some(v) = a.temperature {
                d.temperature = v;
            }
            if let Some(v) = a.seed {
                d.seed = v;
            }
            if let Some(v) = a.max_new_tokens {
                d.max_new_tokens = v;
            }
            let req = DecodeRequest {
                preference: a.preference,
                prompts: a.prompts,
                output: a.output,
                trace: a.trace,
                base_only: a.base_only,
            };
            let out = pipeline::decode(&cfg, &req)?;
            println!(
                "generations: {} -> {}",
                out.generations.len(),
                out.generations_path.display()
            );
            if let Some(p) = &out.trace_path {
                println!("trace -> {}", p.display());
            }
            println!(
                "timing: {:.3}s total, {:.1}us/token -> {}",
                out.timing.total_seconds,
                out.timing.mean_microseconds_per_token,
                out.timing_path.display()
            );
        }
        Command::Eval(a) => {
            if a.sweep {
                let betas = a.betas.unwrap_or_else(|| cfg.eval.beta_sweep.clone());
                let ks = a.ks.unwrap_or_else(|| cfg.eval.k_sweep.clone());
                let r = pipeline::sweep(&cfg, &a.preference, &betas, &ks)?;
                for row in &r.beta {
                    println!(
                        "beta {:<6} score {:.4} win {:.3}",
                        row.value, row.mean_active_score, row.win_rate_vs_base
                    );
                }
                for row in &r.k {
                    println!(
                        "k {:<9} score {:.4} win {:.3}",
                        row.value, row.mean_active_score, row.win_rate_vs_base
                    );
                }
                println!("sweep tables -> {}", cfg.paths.reports().display());
            } else {
                let (run_a, run_b) = (a.run_a.context("missing run_a")?, a.run_b.context("missing run_b")?);
                let output = a.output.unwrap_or_else(|| {
                    let label = a.preference.replace([',', '='], "_");
                    cfg.paths.reports().join(format!("eval_{label}"))
                });
                let r = pipeline::eval(&cfg, &run_a, &run_b, &a.preference, &output)?;
                for (dim, s) in &r.mean_scores_a {
                    println!("{dim}: a {:.4} b {:.4}", s, r.mean_scores_b[dim]);
                }
                println!("diversity: a {:.4} b {:.4}", r.diversity_a, r.diversity_b);
                println!(
                    "wins {} ties {} losses {} win rate {:.4}",
                    r.wins, r.ties, r.losses, r.win_rate
                );
                println!("report -> {}", output.with_extension("json").display());
            }
        }
        Command::Verify { seed, instances } => {
            if let Some(s) = seed {
                cfg.verify.seed = s;
            }
            if let Some(n) = instances {
                cfg.verify.instances = n;
            }
            let r = pipeline::verify(&cfg)?;
            print!("{}", r.summary());
            if !r.passed {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
