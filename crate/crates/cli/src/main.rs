//! `ctfgen`: data generation, training, counterfactual inference,
//! evaluation and self-tests from the command line.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing input
//! files, vectors of the wrong length), 2 on runtime failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ctfgen::checkpoint::load_checkpoint;
use ctfgen::eval::{counterfactual_sample, emit_report, evaluate, EvalConfig, TrainedModel};
use ctfgen::rng::{self, streams};
use ctfgen::scm::{dataset::sidecar_path, generate_dataset, Dataset, Domain, GroundTruthScm, ScmDims};
use ctfgen::train::{train, TrainConfig};
use ctfgen::{selftest, Tensor};

const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "ctfgen",
    version,
    about = "Shifted-counterfactual generation with neural causal models",
    after_help = "Log verbosity on standard error is set by CTFGEN_LOG (error, info or debug; default info)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a dataset from the ground-truth source or target SCM.
    GenData(GenDataArgs),
    /// Train the generative networks and the posterior network.
    Train(TrainArgs),
    /// Sample shifted counterfactuals for one factual observation.
    Infer(InferArgs),
    /// Score a trained model against the ground truth with the aggregated MMD test.
    Eval(EvalArgs),
    /// Run reduced-scale gradient, MMD, SCM and calibration checks.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Which SCM to sample.
    #[arg(long, value_enum)]
    domain: DomainArg,
    /// Number of rows.
    #[arg(long)]
    n: usize,
    /// Covariate dimension; effects have 2d columns.
    #[arg(long)]
    d: usize,
    /// Root seed of the sampling stream.
    #[arg(long)]
    seed: u64,
    /// Also write the context and noise columns.
    #[arg(long)]
    with_latents: bool,
    /// Output CSV; the metadata sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Source-domain dataset CSV; overrides `source_data` in the config.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target-domain dataset CSV; overrides `target_data` in the config.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Run directory for config echo, metrics, timings and checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint with a trained posterior network.
    #[arg(long)]
    ckpt: PathBuf,
    /// Factual covariates, comma-separated (d values).
    #[arg(long, allow_hyphen_values = true)]
    x_fact: String,
    /// Factual source effect, comma-separated (2d values).
    #[arg(long, allow_hyphen_values = true)]
    y_fact: String,
    /// Intervened covariates, comma-separated (d values).
    #[arg(long, allow_hyphen_values = true)]
    x_intv: String,
    /// Number of counterfactual samples.
    #[arg(long)]
    num_samples: usize,
    /// Seed of the sampling stream.
    #[arg(long)]
    seed: u64,
    /// Write CSV here (plus a metadata sidecar) instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint with a trained posterior network.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of (x_s, x_intv) pairs.
    #[arg(long)]
    pairs: usize,
    /// Samples per side for each pair.
    #[arg(long)]
    samples: usize,
    /// Level of each two-sample test.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Root seed of the per-pair streams.
    #[arg(long)]
    seed: u64,
    /// JSON report path; the per-pair CSV goes next to it.
    #[arg(long)]
    report: PathBuf,
    /// Worker threads; the report does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Seed of the check fixtures.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ctfgen::Error> for Failure {
    fn from(e: ctfgen::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn parse_vector(text: &str, name: &str, len: usize) -> Result<Vec<f64>, Failure> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(format!("--{name}: {e} in `{text}`")))?;
    if values.len() != len {
        return Err(Failure::Usage(format!(
            "--{name} has {} values, the checkpoint expects {len}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Failure::Usage(format!("--{name} contains the non-finite value {v}")));
    }
    Ok(values)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn gen_data(args: GenDataArgs) -> CliResult {
    let dims = ScmDims::new(args.d).map_err(|e| Failure::Usage(e.to_string()))?;
    if args.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let data = generate_dataset(args.domain.into(), args.n, dims, args.seed, args.with_latents)?;
    data.write(&args.out)?;
    log::info!("wrote {} rows to {}", data.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult {
    require_file(&args.config, "config")?;
    let cfg = TrainConfig::load(&args.config).map_err(|e| Failure::Usage(e.to_string()))?;
    let source = args
        .source
        .or_else(|| cfg.source_data.clone())
        .ok_or_else(|| Failure::Usage("no source dataset: pass --source or set source_data".into()))?;
    let target = args
        .target
        .or_else(|| cfg.target_data.clone())
        .ok_or_else(|| Failure::Usage("no target dataset: pass --target or set target_data".into()))?;
    require_file(&source, "source dataset")?;
    require_file(&target, "target dataset")?;
    let (s, t) = (Dataset::read(&source)?, Dataset::read(&target)?);
    let (trained, log) = train(&cfg, &s, &t, Some(&args.out))?;
    log::info!(
        "trained {} steps; bundle digest {}; checkpoint {}",
        log.records().len(),
        trained.bundle.digest(),
        log.checkpoint_path().expect("run directory set").display()
    );
    Ok(())
}

fn infer(args: InferArgs) -> CliResult {
    require_file(&args.ckpt, "checkpoint")?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let posterior = ckpt
        .posterior
        .as_ref()
        .ok_or_else(|| Failure::Runtime("checkpoint has no posterior network".into()))?;
    let d = ckpt.bundle.d();
    let x_fact = parse_vector(&args.x_fact, "x-fact", d)?;
    let y_fact = parse_vector(&args.y_fact, "y-fact", 2 * d)?;
    let x_intv = parse_vector(&args.x_intv, "x-intv", d)?;
    let mut rng = rng::stream(args.seed, streams::EVAL);
    let samples = counterfactual_sample(&ckpt.bundle, posterior, &x_fact, &y_fact, &x_intv, args.num_samples, &mut rng)?;
    let csv = render_csv(&samples);
    match &args.out {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
            write_json(
                &sidecar_path(path),
                &json!({
                    "schema_version": OUTPUT_SCHEMA_VERSION,
                    "kind": "counterfactual_samples",
                    "checkpoint": args.ckpt,
                    "x_fact": x_fact,
                    "y_fact": y_fact,
                    "x_intv": x_intv,
                    "num_samples": args.num_samples,
                    "seed": args.seed,
                }),
            )?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(csv.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::Runtime(format!("writing standard output: {e}")))?;
        }
    }
    Ok(())
}

fn render_csv(samples: &Tensor) -> String {
    let mut text = (0..samples.cols()).map(|j| format!("y_cf_{j}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for i in 0..samples.rows() {
        let row: Vec<String> = samples.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

fn run_eval(args: EvalArgs) -> CliResult {
    require_file(&args.ckpt, "checkpoint")?;
    if args.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let cfg = EvalConfig {
        num_pairs: args.pairs,
        k: args.samples,
        alpha: args.alpha,
        seed: args.seed,
        jobs: args.jobs,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let posterior = ckpt
        .posterior
        .as_ref()
        .ok_or_else(|| Failure::Runtime("checkpoint has no posterior network".into()))?;
    let model = TrainedModel::new(&ckpt.bundle, posterior)?;
    let scm = GroundTruthScm::new(ScmDims::new(ckpt.bundle.d())?);
    let report = evaluate(&model, &scm, &cfg)?;
    let csv = emit_report(&report, &args.report)?;
    println!(
        "score {:.4} (95% CI {:.4}..{:.4}) over {} pairs; report {} and {}",
        report.score,
        report.ci_95[0],
        report.ci_95[1],
        report.pairs.len(),
        args.report.display(),
        csv.display()
    );
    Ok(())
}

fn run_selftest(args: SelftestArgs) -> CliResult {
    let checks = selftest::run_all(args.seed)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Runtime("self-test failed".into()))
    }
}

fn init_logging() -> Result<(), Failure> {
    let level = std::env::var("CTFGEN_LOG").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        other => {
            return Err(Failure::Usage(format!(
                "CTFGEN_LOG must be one of error, info, debug; got `{other}`"
            )))
        }
    };
    env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp_secs()
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    init_logging()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
