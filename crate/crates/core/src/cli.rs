//! `attnwalk` command line: verification suite, simulations and training.
//!
//! Exit codes: 0 success, 1 check or domain failure, 2 usage or config error.
//! Every file written starts with the fully resolved config, so any artifact
//! can be reproduced from its own header: JSON files carry it under the
//! leading `config` key, CSV files on a leading `# config: {...}` line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, gaussian_kernel_rows};
use crate::brownian::{ito_check, ItoFunction, ItoReport};
use crate::error::Error;
use crate::geometry::random_sphere_tokens;
use crate::markov::{
    diffusion_limit_check, k_step, sample_walk_stream, validate_transition, DiffusionReport,
    DiffusionSpec,
};
use crate::trainer::{train, LossCurve, Optimizer, TrainConfig};
use crate::verify::{run_checks, Perturbation, VerifyConfig, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "attnwalk",
    version,
    about = "Attention as a random walk on the hypersphere, and the CG-FAC optimizer"
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Rendering of the report printed to stdout.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every property check and write verify.json.
    Verify {
        /// Inject a known fault; the suite must then fail.
        #[arg(long, value_enum)]
        perturb: Option<Perturbation>,
    },
    /// Compare softmax attention with the Gaussian-kernel transition matrix.
    KernelCheck {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
    },
    /// Lattice diffusion check, or walks on a user-supplied transition matrix.
    Walk {
        /// JSON file holding a square matrix as an array of rows.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        walkers: Option<usize>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Start state for matrix walks.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Monte Carlo check of Itō's lemma for one test function.
    Brownian {
        #[arg(long = "fn")]
        function: Option<String>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Train the toy attention classifier and write its loss curve.
    Train {
        #[arg(long, value_parser = parse_optimizer)]
        optimizer: Option<Optimizer>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        cg_max_iters: Option<usize>,
        #[arg(long)]
        cg_rel_tol: Option<f64>,
        #[arg(long)]
        no_warm_start: bool,
    },
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelCheckConfig {
    pub n: usize,
    pub d: usize,
}

impl Default for KernelCheckConfig {
    fn default() -> Self {
        Self { n: 16, d: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    pub h: f64,
    pub tau: f64,
    pub steps: usize,
    pub walkers: usize,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub start: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            h: 1.0,
            tau: 1.0,
            steps: 10_000,
            walkers: 100_000,
            matrix: None,
            start: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrownianConfig {
    pub function: String,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
}

impl Default for BrownianConfig {
    fn default() -> Self {
        Self {
            function: ItoFunction::Square.to_string(),
            horizon: 1.0,
            steps: 1000,
            paths: 10_000,
        }
    }
}

/// Schema of `--config` files. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub verify: Option<VerifyConfig>,
    pub kernel_check: Option<KernelCheckConfig>,
    pub walk: Option<WalkConfig>,
    pub brownian: Option<BrownianConfig>,
    pub train: Option<TrainConfig>,
}

/// Config echoed into every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Header<C: Serialize> {
    pub command: &'static str,
    pub seed: u64,
    pub format: Format,
    pub out: PathBuf,
    pub params: C,
}

#[derive(Debug, Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    config: &'a Header<C>,
    report: &'a R,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckReport {
    pub n: usize,
    pub d: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixWalkReport {
    pub start: usize,
    pub steps: usize,
    pub walkers: usize,
    pub exact_row: Vec<f64>,
    pub empirical_row: Vec<f64>,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub total_cg_iterations: usize,
}

/// Failure of a command, mapped onto an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::BadConfig(_) | Error::UnknownFunction(_) => Self::Usage(e.to_string()),
            other => Self::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Failure(format!("i/o error: {e}"))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Formats a double with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn load_run_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

struct Context {
    seed: u64,
    out: PathBuf,
    format: Format,
}

impl Context {
    fn header<C: Serialize + Clone>(&self, command: &'static str, params: &C) -> Header<C> {
        Header {
            command,
            seed: self.seed,
            format: self.format,
            out: self.out.clone(),
            params: params.clone(),
        }
    }

    fn write_json<C: Serialize, R: Serialize>(
        &self,
        name: &str,
        header: &Header<C>,
        report: &R,
    ) -> CliResult<()> {
        fs::create_dir_all(&self.out)?;
        let body = serde_json::to_string_pretty(&Envelope {
            config: header,
            report,
        })
        .expect("serializable report");
        fs::write(self.out.join(name), body + "\n")?;
        Ok(())
    }

    fn write_csv<C: Serialize>(
        &self,
        name: &str,
        header: &Header<C>,
        columns: &[&str],
        rows: &[Vec<String>],
    ) -> CliResult<()> {
        fs::create_dir_all(&self.out)?;
        let mut text = format!(
            "# config: {}\n",
            serde_json::to_string(header).expect("serializable header")
        );
        text.push_str(&columns.join(","));
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    /// Prints a report to stdout in the requested format. CSV renders the
    /// report's scalar fields as a header row and a value row.
    fn print<R: Serialize>(&self, report: &R) {
        let value = serde_json::to_value(report).expect("serializable report");
        match self.format {
            Format::Json => println!("{}", serde_json::to_string_pretty(&value).expect("json")),
            Format::Csv => {
                let mut keys = Vec::new();
                let mut vals = Vec::new();
                if let serde_json::Value::Object(map) = value {
                    for (k, v) in map {
                        let cell = match v {
                            serde_json::Value::Number(n) if n.is_f64() => {
                                fmt_f64(n.as_f64().expect("f64"))
                            }
                            serde_json::Value::Number(n) => n.to_string(),
                            serde_json::Value::Bool(b) => b.to_string(),
                            serde_json::Value::String(s) => s,
                            serde_json::Value::Null => String::new(),
                            _ => continue,
                        };
                        keys.push(k);
                        vals.push(cell);
                    }
                }
                println!("{}\n{}", keys.join(","), vals.join(","));
            }
        }
    }
}

fn positive(name: &str, v: usize) -> CliResult<usize> {
    if v == 0 {
        return Err(CliError::Usage(format!("{name} must be positive")));
    }
    Ok(v)
}

fn cmd_verify(
    ctx: &Context,
    mut cfg: VerifyConfig,
    perturb: Option<Perturbation>,
) -> CliResult<bool> {
    cfg.seed = ctx.seed;
    if perturb.is_some() {
        cfg.perturb = perturb;
    }
    for (name, v) in [
        ("markov_walks", cfg.markov_walks),
        ("diffusion_steps", cfg.diffusion_steps),
        ("diffusion_walkers", cfg.diffusion_walkers),
        ("brownian_paths", cfg.brownian_paths),
        ("brownian_steps", cfg.brownian_steps),
    ] {
        positive(name, v)?;
    }
    let report: VerifyReport = run_checks(&cfg)?;
    let header = ctx.header("verify", &cfg);
    ctx.write_json("verify.json", &header, &report)?;
    match ctx.format {
        Format::Json => ctx.print(&report),
        Format::Csv => {
            let mut text = String::from("name,passed,measured,tolerance\n");
            for c in &report.checks {
                let _ = writeln!(
                    text,
                    "{},{},{},{}",
                    c.name,
                    c.passed,
                    fmt_f64(c.measured),
                    fmt_f64(c.tolerance)
                );
            }
            print!("{text}");
        }
    }
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "FAILED {}: measured {} > tolerance {}",
            c.name, c.measured, c.tolerance
        );
    }
    Ok(report.passed)
}

fn cmd_kernel_check(ctx: &Context, cfg: KernelCheckConfig) -> CliResult<bool> {
    if cfg.d < 2 {
        return Err(CliError::Usage(format!("d must be >= 2, got {}", cfg.d)));
    }
    positive("n", cfg.n)?;
    let x = random_sphere_tokens(cfg.n, cfg.d, ctx.seed)?;
    let attn = attention_forward(&x);
    let kernel = gaussian_kernel_rows(&x)?;
    let max_abs_diff = (attn.p.as_array() - kernel.as_array())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let tolerance = 1e-12;
    let report = KernelCheckReport {
        n: cfg.n,
        d: cfg.d,
        max_abs_diff,
        tolerance,
        passed: max_abs_diff <= tolerance,
    };
    ctx.write_json(
        "kernel_check.json",
        &ctx.header("kernel-check", &cfg),
        &report,
    )?;
    ctx.print(&report);
    Ok(report.passed)
}

fn cmd_walk(ctx: &Context, cfg: WalkConfig) -> CliResult<bool> {
    positive("steps", cfg.steps)?;
    positive("walkers", cfg.walkers)?;
    let header = ctx.header("walk", &cfg);
    match &cfg.matrix {
        Some(rows) => {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(CliError::Failure(format!(
                    "transition matrix must be square, got {n} ragged rows"
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let raw = ndarray::Array2::from_shape_vec((n, n), flat)
                .map_err(|e| CliError::Failure(e.to_string()))?;
            let m = validate_transition(raw)?;
            if cfg.start >= n {
                return Err(CliError::Usage(format!(
                    "start state {} out of range for {n} states",
                    cfg.start
                )));
            }
            let exact = k_step(
                &m,
                u32::try_from(cfg.steps).map_err(|_| CliError::Usage("too many steps".into()))?,
            )?;
            let mut counts = vec![0usize; n];
            let mut rows_out = Vec::with_capacity(cfg.walkers);
            for w in 0..cfg.walkers {
                let path = sample_walk_stream(&m, cfg.start, cfg.steps, ctx.seed, w as u64)?;
                let end = *path.last().expect("non-empty");
                counts[end] += 1;
                rows_out.push(vec![w.to_string(), end.to_string()]);
            }
            let empirical_row: Vec<f64> = counts
                .iter()
                .map(|c| *c as f64 / cfg.walkers as f64)
                .collect();
            let exact_row = exact.row(cfg.start).to_vec();
            let max_abs_diff = exact_row
                .iter()
                .zip(&empirical_row)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            let report = MatrixWalkReport {
                start: cfg.start,
                steps: cfg.steps,
                walkers: cfg.walkers,
                exact_row,
                empirical_row,
                max_abs_diff,
            };
            ctx.write_json("walk.json", &header, &report)?;
            ctx.write_csv(
                "walk_terminal.csv",
                &header,
                &["walker", "state"],
                &rows_out,
            )?;
            ctx.print(&report);
        }
        None => {
            let spec = DiffusionSpec::new(cfg.h, cfg.tau)?;
            let outcome = diffusion_limit_check(spec, cfg.steps, cfg.walkers, ctx.seed)?;
            let report: &DiffusionReport = &outcome.report;
            let rows: Vec<Vec<String>> = outcome
                .terminal_positions
                .iter()
                .enumerate()
                .map(|(w, x)| vec![w.to_string(), fmt_f64(*x)])
                .collect();
            ctx.write_json("walk.json", &header, report)?;
            ctx.write_csv("walk_terminal.csv", &header, &["walker", "position"], &rows)?;
            ctx.print(report);
        }
    }
    Ok(true)
}

fn cmd_brownian(ctx: &Context, cfg: BrownianConfig) -> CliResult<bool> {
    let function: ItoFunction = cfg.function.parse()?;
    positive("paths", cfg.paths)?;
    let report: ItoReport = ito_check(function, cfg.horizon, cfg.steps, cfg.paths, ctx.seed)?;
    ctx.write_json("brownian.json", &ctx.header("brownian", &cfg), &report)?;
    ctx.print(&report);
    Ok(true)
}

fn curve_rows(curve: &LossCurve) -> Vec<Vec<String>> {
    curve
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.grad_norm),
                r.cg_iterations.to_string(),
                fmt_f64(r.wall_time),
            ]
        })
        .collect()
}

fn cmd_train(ctx: &Context, mut cfg: TrainConfig) -> CliResult<bool> {
    cfg.seed = ctx.seed;
    cfg.validate()?;
    let curve = train(&cfg)?;
    let header = ctx.header("train", &cfg);
    ctx.write_csv(
        "train_curve.csv",
        &header,
        &["step", "loss", "grad_norm", "cg_iterations", "wall_time"],
        &curve_rows(&curve),
    )?;
    let summary = TrainSummary {
        steps: curve.len(),
        initial_loss: curve.initial_loss(),
        final_loss: curve.final_loss(),
        total_cg_iterations: curve.total_cg_iterations(),
    };
    ctx.write_json("train_summary.json", &header, &summary)?;
    ctx.print(&summary);
    Ok(true)
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    let file = match &cli.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli
            .out
            .clone()
            .or(file.out.clone())
            .unwrap_or_else(|| PathBuf::from("attnwalk-out")),
        format: cli.format.or(file.format).unwrap_or_default(),
    };
    match cli.command {
        Command::Verify { perturb } => cmd_verify(&ctx, file.verify.unwrap_or_default(), perturb),
        Command::KernelCheck { n, d } => {
            let mut cfg = file.kernel_check.unwrap_or_default();
            cfg.n = n.unwrap_or(cfg.n);
            cfg.d = d.unwrap_or(cfg.d);
            cmd_kernel_check(&ctx, cfg)
        }
        Command::Walk {
            matrix,
            steps,
            walkers,
            h,
            tau,
            start,
        } => {
            let mut cfg = file.walk.unwrap_or_default();
            if let Some(path) = matrix {
                let text = fs::read_to_string(&path).map_err(|e| {
                    CliError::Usage(format!("cannot read matrix {}: {e}", path.display()))
                })?;
                cfg.matrix = Some(serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("invalid matrix file {}: {e}", path.display()))
                })?);
            }
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.walkers = walkers.unwrap_or(cfg.walkers);
            cfg.h = h.unwrap_or(cfg.h);
            cfg.tau = tau.unwrap_or(cfg.tau);
            cfg.start = start.unwrap_or(cfg.start);
            cmd_walk(&ctx, cfg)
        }
        Command::Brownian {
            function,
            horizon,
            steps,
            paths,
        } => {
            let mut cfg = file.brownian.unwrap_or_default();
            cfg.function = function.unwrap_or(cfg.function);
            cfg.horizon = horizon.unwrap_or(cfg.horizon);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.paths = paths.unwrap_or(cfg.paths);
            cmd_brownian(&ctx, cfg)
        }
        Command::Train {
            optimizer,
            steps,
            eta,
            gamma,
            batch_size,
            cg_max_iters,
            cg_rel_tol,
            no_warm_start,
        } => {
            let mut cfg = file.train.unwrap_or_default();
            cfg.optimizer = optimizer.unwrap_or(cfg.optimizer);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.eta = eta.unwrap_or(cfg.eta);
            cfg.gamma = gamma.unwrap_or(cfg.gamma);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.cg_max_iters = cg_max_iters.or(cfg.cg_max_iters);
            cfg.cg_rel_tol = cg_rel_tol.unwrap_or(cfg.cg_rel_tol);
            cfg.warm_start &= !no_warm_start;
            cmd_train(&ctx, cfg)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILURE
        }
    }
}
