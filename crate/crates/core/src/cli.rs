//! `sparse-rl` command line: train, sweep, diagnose and export.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure or divergence,
//! 3 schema validation failure (config, checkpoint or CSV).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::diagnostics::{measure, GradCovariance};
use crate::envs::ENV_IDS;
use crate::harness::{
    collect_probe, merge_logs, restore_agent, run_name, run_sweep, train, Algo, ExperimentConfig,
    HarnessError, Method, RunLog, SweepGrid,
};
use crate::rng::derive_seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SPARSE_RL_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "sparse-rl",
    version,
    about = "Static sparse training for actor-critic agents"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent; writes `<out>/<run>.csv` and `<out>/<run>.ckpt`.
    Train(TrainArgs),
    /// Train every point of a sparsity/width/depth/seed grid; writes one log
    /// per run and `summary.csv`.
    Sweep(SweepArgs),
    /// Recompute diagnostics for a checkpoint on a fresh probe batch.
    Diagnose(DiagnoseArgs),
    /// Validate run logs in a directory and merge them into one table.
    Export(ExportArgs),
}

/// Config fields shared by `train` and `sweep`. A flag given on the command
/// line wins over the config file; otherwise the file (or the built-in
/// default) applies.
#[derive(Debug, Args)]
pub struct BaseArgs {
    /// JSON experiment config [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value_t = Algo::Sac, value_parser = algo_parser())]
    pub algo: Algo,
    #[arg(long, default_value = "pendulum", value_parser = PossibleValuesParser::new(ENV_IDS))]
    pub env: String,
    #[arg(long, default_value_t = Method::Er, value_parser = method_parser())]
    pub sparsity_method: Method,
    /// Environment steps
    #[arg(long, visible_alias = "steps", default_value_t = ExperimentConfig::default().total_steps)]
    pub total_steps: u64,
    #[arg(long, default_value_t = ExperimentConfig::default().eval_every)]
    pub eval_every: u64,
    #[arg(long, default_value_t = ExperimentConfig::default().eval_episodes)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = ExperimentConfig::default().metrics_every)]
    pub metrics_every: u64,
    /// Steps between parameter resets; the bare flag means 200000 [default: never]
    #[arg(long, num_args = 0..=1, default_missing_value = "200000")]
    pub reset_interval: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[arg(long, default_value_t = 1)]
    pub width_scale: usize,
    #[arg(long, default_value_t = 1)]
    pub depth_scale: usize,
    /// Global sparsity in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    /// Sparsity grid: `lo:hi:step` or a comma list
    #[arg(long, default_value = "0", value_parser = parse_f64_grid)]
    pub sparsity: Grid<f64>,
    /// Width scale grid
    #[arg(long, visible_alias = "width", default_value = "1", value_parser = parse_usize_grid)]
    pub width_scale: Grid<usize>,
    /// Depth scale grid
    #[arg(long, visible_alias = "depth", default_value = "1", value_parser = parse_usize_grid)]
    pub depth_scale: Grid<usize>,
    /// Seeds: `a..b` (inclusive), `lo:hi:step` or a comma list
    #[arg(long, visible_alias = "seed", default_value = "0", value_parser = parse_seeds)]
    pub seeds: Grid<u64>,
    /// Concurrent runs
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub checkpoint: PathBuf,
    /// Probe transitions collected with the restored policy
    #[arg(long, default_value_t = crate::diagnostics::PROBE_BATCH)]
    pub probe: usize,
    /// Output directory
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run_dir: PathBuf,
    /// Merged table path [default: <RUN_DIR>/merged.csv]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// A parsed grid flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T>(pub Vec<T>);

fn algo_parser() -> impl TypedValueParser<Value = Algo> {
    PossibleValuesParser::new(Algo::ALL.map(Algo::as_str)).map(|s| s.parse().unwrap())
}

fn method_parser() -> impl TypedValueParser<Value = Method> {
    PossibleValuesParser::new(Method::ALL.map(Method::as_str)).map(|s| s.parse().unwrap())
}

fn parse_number(s: &str) -> Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{s}` is not a number"))
}

/// Values of a `lo:hi:step` range (inclusive of `hi` up to rounding) or a
/// comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let values = match parts.as_slice() {
        [lo, hi, step] => {
            let (lo, hi, step) = (parse_number(lo)?, parse_number(hi)?, parse_number(step)?);
            if step <= 0.0 || hi < lo {
                return Err(format!("range `{s}` needs lo <= hi and step > 0"));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            (0..=n)
                .map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12)
                .collect()
        }
        [_] => s
            .split(',')
            .map(parse_number)
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(format!("`{s}` is neither `lo:hi:step` nor a comma list")),
    };
    if values.is_empty() {
        return Err("empty grid".into());
    }
    Ok(values)
}

fn parse_f64_grid(s: &str) -> Result<Grid<f64>, String> {
    parse_grid(s).map(Grid)
}

fn to_u64(v: f64) -> Result<u64, String> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as u64)
    } else {
        Err(format!("`{v}` is not a non-negative integer"))
    }
}

fn parse_usize_grid(s: &str) -> Result<Grid<usize>, String> {
    parse_grid(s)?
        .into_iter()
        .map(|v| to_u64(v).map(|v| v as usize))
        .collect::<Result<_, _>>()
        .map(Grid)
}

/// Like [`parse_grid`] for integers, plus inclusive `a..b` ranges.
pub fn parse_seeds(s: &str) -> Result<Grid<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let parse = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|_| format!("`{x}` is not a seed"))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if b < a {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(Grid((a..=b).collect()));
    }
    parse_grid(s)?
        .into_iter()
        .map(to_u64)
        .collect::<Result<_, _>>()
        .map(Grid)
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Config(_) => EXIT_SCHEMA,
            _ => EXIT_RUNTIME,
        };
        Failure::new(code, e.to_string())
    }
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

/// Config file (or defaults) with explicitly given flags applied on top.
fn base_config(base: &BaseArgs, m: &ArgMatches) -> Result<ExperimentConfig, Failure> {
    let mut config = match &base.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::new(
                    EXIT_USAGE,
                    format!("cannot read config {}: {e}", path.display()),
                )
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::new(EXIT_SCHEMA, format!("config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if explicit(m, "algo") {
        config.algo = base.algo;
    }
    if explicit(m, "env") {
        config.env = base.env.clone();
    }
    if explicit(m, "sparsity_method") {
        config.sparsity_method = base.sparsity_method;
    }
    if explicit(m, "total_steps") {
        config.total_steps = base.total_steps;
    }
    if explicit(m, "eval_every") {
        config.eval_every = base.eval_every;
    }
    if explicit(m, "eval_episodes") {
        config.eval_episodes = base.eval_episodes;
    }
    if explicit(m, "metrics_every") {
        config.metrics_every = base.metrics_every;
    }
    if base.reset_interval.is_some() {
        config.reset_interval = base.reset_interval;
    }
    Ok(config)
}

fn cmd_train(args: &TrainArgs, m: &ArgMatches) -> Result<(), Failure> {
    let mut config = base_config(&args.base, m)?;
    if explicit(m, "width_scale") {
        config.width_scale = args.width_scale;
    }
    if explicit(m, "depth_scale") {
        config.depth_scale = args.depth_scale;
    }
    if explicit(m, "sparsity") {
        config.sparsity = args.sparsity;
    }
    if explicit(m, "seed") {
        config.seed = args.seed;
    }
    config.validate()?;
    let run = train(&config)?;
    let out = &args.base.out;
    std::fs::create_dir_all(out).map_err(io_failure)?;
    let name = run_name(&config);
    let log_path = out.join(format!("{name}.csv"));
    let ckpt_path = out.join(format!("{name}.ckpt"));
    run.log.write(&log_path).map_err(io_failure)?;
    run.checkpoint()
        .save(&ckpt_path)
        .map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))?;
    println!("log: {}", log_path.display());
    println!("checkpoint: {}", ckpt_path.display());
    if let Some(r) = run.log.last("eval_return") {
        println!("final eval_return: {r}");
    }
    if run.diverged {
        return Err(Failure::new(
            EXIT_RUNTIME,
            format!(
                "run diverged at step {}",
                run.log.meta("diverged_step").unwrap_or("?")
            ),
        ));
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, m: &ArgMatches) -> Result<(), Failure> {
    let base = base_config(&args.base, m)?;
    let pick = |id: &str| explicit(m, id);
    let grid = SweepGrid {
        sparsity: if pick("sparsity") {
            args.sparsity.0.clone()
        } else {
            vec![base.sparsity]
        },
        width: if pick("width_scale") {
            args.width_scale.0.clone()
        } else {
            vec![base.width_scale]
        },
        depth: if pick("depth_scale") {
            args.depth_scale.0.clone()
        } else {
            vec![base.depth_scale]
        },
        seeds: if pick("seeds") {
            args.seeds.0.clone()
        } else {
            vec![base.seed]
        },
    };
    for c in grid.configs(&base) {
        c.validate()?;
    }
    let result = run_sweep(&base, &grid, args.jobs, Some(&args.base.out))?;
    let failed: Vec<String> = result
        .configs
        .iter()
        .zip(&result.runs)
        .filter_map(|(c, r)| r.as_ref().err().map(|e| format!("{}: {e}", run_name(c))))
        .collect();
    println!(
        "{} runs over {} settings; summary: {}",
        result.configs.len(),
        grid.settings(),
        args.base.out.join("summary.csv").display()
    );
    if !failed.is_empty() {
        return Err(Failure::new(
            EXIT_RUNTIME,
            format!("failed runs:\n{}", failed.join("\n")),
        ));
    }
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<(), Failure> {
    if args.probe < 2 {
        return Err(Failure::new(EXIT_USAGE, "--probe must be at least 2"));
    }
    let bytes = std::fs::read(&args.checkpoint).map_err(|e| {
        Failure::new(
            EXIT_USAGE,
            format!("cannot read checkpoint {}: {e}", args.checkpoint.display()),
        )
    })?;
    let ckpt = Checkpoint::from_bytes(&bytes)
        .map_err(|e| Failure::new(EXIT_SCHEMA, format!("{}: {e}", args.checkpoint.display())))?;
    let (config, mut agent) = restore_agent(&ckpt)?;
    let probe = collect_probe(
        agent.as_agent_mut(),
        &config.env,
        args.probe,
        derive_seed(ckpt.header.seed, "diagnose"),
    )?;
    let agent = agent.as_agent();
    let diag = &config.overrides.diagnostics;
    let step = ckpt.header.env_steps;
    let record = measure(agent, &probe, None, step, diag)
        .map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))?;
    let k = diag.covariance_samples.min(probe.len());
    let cov = agent
        .critic_sample_grads(&probe[..k])
        .map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))
        .and_then(|g| {
            GradCovariance::from_grads(&g).map_err(|e| Failure::new(EXIT_RUNTIME, e.to_string()))
        })?;

    let mut log = RunLog::default();
    log.set_meta("algo", config.algo);
    log.set_meta("env", &config.env);
    log.set_meta("sparsity_method", config.sparsity_method);
    log.set_meta("sparsity", config.sparsity);
    log.set_meta("width_scale", config.width_scale);
    log.set_meta("depth_scale", config.depth_scale);
    log.set_meta("seed", config.seed);
    log.set_meta("checkpoint", args.checkpoint.display());
    log.set_meta("probe", args.probe);
    for (name, value) in record.metrics() {
        log.push(step, name, value);
        println!("{name}={value}");
    }
    let sparsity = agent.measured_sparsity();
    log.push(step, "measured_sparsity", sparsity);
    println!("measured_sparsity={sparsity}");

    let stem = args
        .checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    std::fs::create_dir_all(&args.out).map_err(io_failure)?;
    log.write(&args.out.join(format!("{stem}.diagnostics.csv")))
        .map_err(io_failure)?;
    let file = std::fs::File::create(args.out.join(format!("{stem}.covariance.csv")))
        .map_err(io_failure)?;
    cov.write_csv(std::io::BufWriter::new(file))
        .map_err(io_failure)?;
    Ok(())
}

fn is_run_log(path: &Path, output: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    path.extension().is_some_and(|e| e == "csv")
        && path != output
        && name != "summary.csv"
        && name != "merged.csv"
        && !name.ends_with(".covariance.csv")
}

fn cmd_export(args: &ExportArgs) -> Result<(), Failure> {
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| args.run_dir.join("merged.csv"));
    let entries = std::fs::read_dir(&args.run_dir).map_err(|e| {
        Failure::new(
            EXIT_USAGE,
            format!("cannot read {}: {e}", args.run_dir.display()),
        )
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_run_log(p, &output))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::new(
            EXIT_USAGE,
            format!("no run logs in {}", args.run_dir.display()),
        ));
    }
    let mut runs = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(io_failure)?;
        let log = RunLog::parse(&text)
            .map_err(|e| Failure::new(EXIT_SCHEMA, format!("{}: {e}", path.display())))?;
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        runs.push((name, log));
    }
    let rows: usize = runs.iter().map(|(_, l)| l.rows.len()).sum();
    std::fs::write(&output, merge_logs(&runs)).map_err(io_failure)?;
    println!(
        "merged {} logs, {rows} rows: {}",
        runs.len(),
        output.display()
    );
    Ok(())
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(EXIT_RUNTIME, format!("i/o error: {e}"))
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = Cli::command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m).map(|cli| (cli, m)));
    let (cli, matches) = match parsed {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let sub = matches.subcommand().expect("subcommand is required").1;
    let outcome = match &cli.command {
        Command::Train(a) => cmd_train(a, sub),
        Command::Sweep(a) => cmd_sweep(a, sub),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Export(a) => cmd_export(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
