//! The `capsroute` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed (gradient check over tolerance),
//! 2 usage or input error, 3 numeric abort (NaN).

pub mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use capsroute_bench::{compare_report, run_bench, BenchCase, BenchError};
use capsroute_core::autograd::{GradCheckConfig, Stencil};
use capsroute_core::config::DatasetKind;
use capsroute_core::io::Archive;
use capsroute_core::routing::{
    route, state_archive, text_report, ActivationParams, Normalization, RoutingConfig, RoutingMethod, VoteTensor,
};
use capsroute_core::training::{evaluate, train};
use capsroute_core::{config, Config, Error, KernelSpec, Metric, Parameters, Profile};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::gradcheck::{check_network, check_op, mini_network, CheckOp, NETWORK_EPSILON, OP_EPSILON};

#[derive(Debug, Parser)]
#[command(name = "capsroute", version, about = "Weighted-KDE dynamic routing for capsule networks")]
pub struct Cli {
    /// Root seed of every random stream; overrides the config file [default: 0]
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Training worker threads; overrides the config file [default: 1]
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Route one window of votes and dump the routing state
    Route(RouteArgs),
    /// Train a network from a config file
    Train(TrainArgs),
    /// Report the test error of saved parameters
    Eval(EvalArgs),
    /// Time routing methods at one shape
    Bench(BenchArgs),
    /// Compare reverse-mode gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Configuration utilities
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Frms,
    Frem,
    Em,
    Rba,
}

impl From<MethodArg> for RoutingMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Frms => RoutingMethod::Frms,
            MethodArg::Frem => RoutingMethod::Frem,
            MethodArg::Em => RoutingMethod::EmBaseline,
            MethodArg::Rba => RoutingMethod::Rba,
        }
    }
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    /// Archive holding `votes` [n_in, n_out, dim], `activations` [n_in] and optionally
    /// `beta` [n_out, dim + 1]
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,

    #[arg(long, value_enum, default_value = "frem")]
    pub method: MethodArg,

    /// Kernel profile: epanechnikov or gaussian
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,

    /// Distance metric: l1, l2sq or cosine [default: l1, cosine for rba]
    #[arg(long)]
    pub metric: Option<String>,

    #[arg(long, default_value_t = 2)]
    pub iters: usize,

    /// Normalization of routing weights: softmax or plain
    #[arg(long, default_value = "softmax")]
    pub normalization: String,

    /// Step size of the routing-weight update
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,

    /// Where to write the routing state archive
    #[arg(long, value_name = "FILE")]
    pub dump: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Config file; built-in defaults when omitted
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Dataset, overriding the config: mnist or synth
    #[arg(long, value_name = "KIND")]
    pub dataset: Option<String>,

    /// Directory with MNIST IDX files, overriding the config
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Where to write the trained parameters
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,

    /// Where to write the per-step CSV report
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,

    /// Epochs, overriding the config
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Learning rate, overriding the config
    #[arg(long)]
    pub lr: Option<f64>,

    /// Train the matched baseline CNN instead of the capsule network
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Parameter archive written by `train`
    #[arg(long, value_name = "FILE")]
    pub params: PathBuf,

    /// Evaluate the matched baseline CNN
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Shape as n_l=..,n_out=..,iters=..[,batch=..]
    #[arg(long, default_value = "n_l=72,n_out=16,iters=2,batch=64")]
    pub case: String,

    /// Comma-separated routing methods
    #[arg(long, default_value = "frms,frem,em", value_delimiter = ',')]
    pub methods: Vec<MethodArg>,

    /// Timed repetitions per method (at least 30)
    #[arg(long, default_value_t = 100)]
    pub reps: usize,

    /// Untimed warmup repetitions (at least 3)
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,

    /// Also write the report as CSV
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StencilArg {
    Three,
    Five,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check one op: softmax, matmul, conv2d, spread-loss, margin-loss, frms, frem, em
    #[arg(long, conflicts_with = "network", required_unless_present = "network")]
    pub op: Option<CheckOp>,

    /// Check a whole 32×32 network (the config's, or a minimal one)
    #[arg(long)]
    pub network: bool,

    /// Config whose network is checked with --network
    #[arg(long, value_name = "FILE", requires = "network")]
    pub config: Option<PathBuf>,

    /// Coordinates sampled per parameter tensor
    #[arg(long, default_value_t = 256)]
    pub samples: usize,

    /// Finite-difference step [default: 1e-6 with --network, 1e-5 otherwise]
    #[arg(long)]
    pub epsilon: Option<f64>,

    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,

    /// Difference stencil [default: five for em, three otherwise]
    #[arg(long, value_enum)]
    pub stencil: Option<StencilArg>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Print the default configuration with non-paper defaults labelled
    #[arg(long)]
    pub print_defaults: bool,
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and failed.
    Check(String),
    Usage(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        })
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Check(m) => f.write_str(m),
            Failure::Usage(e) | Failure::Numeric(e) => write!(f, "{e:#}"),
        }
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NanLoss { .. } | Error::NonFinite(_) | Error::NanGradient { .. })
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_numeric(&e) {
            Failure::Numeric(e.into())
        } else {
            Failure::Usage(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(core) if is_numeric(core) => Failure::Numeric(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Core(core) => core.into(),
            other => Failure::Usage(other.into()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs a parsed command line.
pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Route(a) => cmd_route(&a),
        Command::Train(a) => cmd_train(&a, cli.seed, cli.threads),
        Command::Eval(a) => cmd_eval(&a, cli.seed),
        Command::Bench(a) => cmd_bench(&a, cli.seed),
        Command::Gradcheck(a) => cmd_gradcheck(&a, cli.seed),
        Command::Config(a) => cmd_config(&a),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, Failure> {
    s.parse().map_err(Failure::from)
}

pub fn cmd_route(a: &RouteArgs) -> CmdResult {
    let method = RoutingMethod::from(a.method);
    let profile: Profile = parse(&a.kernel)?;
    let metric: Metric = match &a.metric {
        Some(m) => parse(m)?,
        None if method == RoutingMethod::Rba => Metric::CosineVariant,
        None => Metric::L1,
    };
    let cfg = RoutingConfig {
        iterations: a.iters,
        alpha: a.alpha,
        normalization: parse::<Normalization>(&a.normalization)?,
        kernel: KernelSpec::new(profile, metric),
        ..RoutingConfig::default()
    };
    cfg.validate(method)?;
    if method == RoutingMethod::Rba {
        eprintln!("warning: rba is a diagnostic-only method and is excluded from training");
    }
    let input = Archive::<f64>::read(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let votes = VoteTensor::new(input.require("votes")?.clone(), input.require("activations")?.clone())?;
    let params = match input.get("beta") {
        Some(beta) => ActivationParams::new(beta.clone())?,
        None => ActivationParams::identity(votes.n_out(), votes.dim()),
    };
    let (state, acts) = route(method, &votes, &cfg, &params)?;
    state_archive(&state, &acts)
        .write(&a.dump)
        .with_context(|| format!("writing {}", a.dump.display()))?;
    print!("method: {method}\n{}", text_report(&state, &acts));
    Ok(())
}

/// The config file (or defaults) with command-line overrides applied.
fn load_config(data: &DataArgs, seed: Option<u64>, threads: Option<usize>) -> std::result::Result<Config, Failure> {
    let mut cfg = match &data.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    if let Some(d) = &data.dataset {
        cfg.data.dataset = parse::<DatasetKind>(d)?;
    }
    if let Some(dir) = &data.data_dir {
        cfg.data.dir = dir.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn network_of(cfg: &Config, baseline: bool) -> std::result::Result<capsroute_core::NetworkSpec, Failure> {
    if baseline {
        Ok(capsroute_core::network::build_baseline_cnn(&cfg.network)?)
    } else {
        Ok(cfg.network.clone())
    }
}

fn load_data(cfg: &Config) -> std::result::Result<(capsroute_core::Dataset, capsroute_core::Dataset), Failure> {
    cfg.data
        .load(cfg.seed, cfg.network.input_size)
        .with_context(|| match cfg.data.dataset {
            DatasetKind::Mnist => format!("loading MNIST from {}", cfg.data.dir),
            DatasetKind::Synth => "generating synthetic glyphs".into(),
        })
        .map_err(Failure::from)
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>, threads: Option<usize>) -> CmdResult {
    let mut cfg = load_config(&a.data, seed, threads)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
        cfg.validate()?;
    }
    let spec = network_of(&cfg, a.baseline)?;
    let (train_set, test_set) = load_data(&cfg)?;
    log::info!(
        "training {} parameters on {} images for {} epochs",
        spec.parameter_count()?,
        train_set.len(),
        cfg.train.epochs
    );
    let (params, report) = train::<f32>(&spec, &train_set, Some(&test_set), &cfg.train_config())?;
    params
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.report {
        report
            .write_csv(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.5}  test_error {}",
            e.epoch,
            e.mean_loss,
            e.test_error.map(|t| format!("{t:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    if report.degenerate > 0 {
        println!("degenerate routing events: {}", report.degenerate);
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(&a.data, seed, None)?;
    let spec = network_of(&cfg, a.baseline)?;
    let params = Parameters::<f32>::load(&spec, &a.params)
        .with_context(|| format!("loading {}", a.params.display()))?;
    let (_, test_set) = load_data(&cfg)?;
    let err = evaluate(&spec, &params, &test_set)?;
    println!("test_error: {err:.4} ({} images)", test_set.len());
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, seed: Option<u64>) -> CmdResult {
    let base = BenchCase {
        reps: a.reps,
        warmup: a.warmup,
        seed: seed.unwrap_or(0),
        ..a.case.parse::<BenchCase>()?
    };
    let mut stats = Vec::with_capacity(a.methods.len());
    for &m in &a.methods {
        stats.push(run_bench(&base.with_method(m.into()))?);
    }
    let report = compare_report(&stats)?;
    print!("{report}");
    if let Some(path) = &a.csv {
        write_file(path, &report.to_csv())?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::from)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, seed: Option<u64>) -> CmdResult {
    let stencil = match (a.stencil, a.op) {
        (Some(StencilArg::Three), _) => Stencil::ThreePoint,
        (Some(StencilArg::Five), _) => Stencil::FivePoint,
        (None, Some(op)) => op.default_stencil(),
        (None, None) => Stencil::ThreePoint,
    };
    let cfg = GradCheckConfig {
        epsilon: a.epsilon.unwrap_or(if a.network { NETWORK_EPSILON } else { OP_EPSILON }),
        samples: a.samples,
        seed: seed.unwrap_or(0),
        stencil,
        ..GradCheckConfig::default()
    };
    let (title, report) = match a.op {
        Some(op) => (format!("op {op}"), check_op(op, &cfg)?),
        None => {
            let spec = match &a.config {
                Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?.network,
                None => mini_network(),
            };
            ("network".to_string(), check_network(&spec, &cfg)?)
        }
    };
    println!("gradient check: {title}");
    print!("{}", report.table(a.tolerance));
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance);
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: {worst:.3e} >= {:.1e}",
            a.tolerance
        )))
    }
}

pub fn cmd_config(a: &ConfigArgs) -> CmdResult {
    if !a.print_defaults {
        return Err(Failure::Usage(anyhow::anyhow!("nothing to do; pass --print-defaults")));
    }
    print!("{}", config::print_defaults());
    Ok(())
}
