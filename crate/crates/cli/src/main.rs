use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rkstack_core::schemes::{HGranularity, Scheme, VernerCoefficients};
use rkstack_core::subnet::Activation;

mod commands;
mod config;

use commands::SweepCmd;
use config::{parse_grid, parse_task_kind, RunConfig, TaskConfig, OUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "rkstack", version, about = "Runge-Kutta residual network experiments")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = OUT_ENV, default_value = "runs", global = true)]
    out: PathBuf,

    /// JSON run config (or a previous report.json). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Subdirectory of the output root for this run.
    #[arg(long, global = true)]
    run_name: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure convergence orders of scheme tables on the ODE test suite.
    OdeVerify {
        #[arg(long, value_delimiter = ',', default_value = "euler,midpoint,rk4")]
        schemes: Vec<Scheme>,
        #[arg(long, value_parser = parse_verner)]
        verner: Option<VernerCoefficients>,
        /// Coarsest step is 2^-h_from.
        #[arg(long, default_value_t = 2)]
        h_from: i32,
        /// Finest step is 2^-h_to.
        #[arg(long, default_value_t = 7)]
        h_to: i32,
    },
    /// Print a scheme's table as JSON.
    DumpTableau {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long, value_parser = parse_verner)]
        verner: Option<VernerCoefficients>,
    },
    /// Train one network.
    Train {
        #[command(flatten)]
        net: NetArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the checkpoint every N epochs (it is always written at the end).
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Run a measurement sweep.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Check a finished run's report and summarize it.
    Report {
        /// Run directory holding report.json.
        dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum SweepKind {
    /// Loss spread of untrained networks over seeds.
    InitProbe(NetArgs),
    /// Max stable learning rate per scheme.
    Lr(NetArgs),
    /// Final accuracy against depth.
    Degradation(NetArgs),
    /// Epochs until a train-accuracy threshold.
    TimeToThreshold(NetArgs),
}

/// Network, task, optimizer and sweep settings. Every flag overrides the
/// config file.
#[derive(Args, Debug, Default, Clone)]
pub struct NetArgs {
    /// Comma-separated scheme names.
    #[arg(long, alias = "scheme", value_delimiter = ',')]
    schemes: Option<Vec<Scheme>>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// spirals, rings, blobs or cifar10.
    #[arg(long)]
    task: Option<String>,
    /// Directory with CIFAR-10 binary batches (for --task cifar10).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long, value_parser = parse_verner)]
    verner: Option<VernerCoefficients>,
    /// shared or per-stage.
    #[arg(long, value_parser = parse_granularity)]
    h_granularity: Option<HGranularity>,
    #[arg(long)]
    h_clamp: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated epochs at which the learning rate drops.
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    /// Constant learning rate (no milestones).
    #[arg(long)]
    constant_lr: bool,
    /// Learning-rate grid as start:end:step.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(f64, f64, f64)>,
    /// Epochs per learning-rate cell.
    #[arg(long)]
    lr_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// Seeds per scheme (init probe, degradation, time to threshold).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn parse_verner(s: &str) -> Result<VernerCoefficients, String> {
    match s {
        "paper" => Ok(VernerCoefficients::Paper),
        "canonical" => Ok(VernerCoefficients::Canonical),
        _ => Err(format!("expected paper or canonical, got `{s}`")),
    }
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    match s {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        _ => Err(format!("expected relu or tanh, got `{s}`")),
    }
}

fn parse_granularity(s: &str) -> Result<HGranularity, String> {
    match s {
        "shared" => Ok(HGranularity::Shared),
        "per-stage" => Ok(HGranularity::PerStage),
        _ => Err(format!("expected shared or per-stage, got `{s}`")),
    }
}

/// A problem with the invocation rather than the run; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl NetArgs {
    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(v) = &self.schemes {
            cfg.schemes = v.clone();
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            depth => cfg.depth,
            width => cfg.width,
            activation => cfg.activation,
            verner => cfg.verner,
            h_granularity => cfg.h_granularity,
            seed => cfg.seed,
            epochs => cfg.train.epochs,
            lr => cfg.train.lr0,
            momentum => cfg.train.momentum,
            weight_decay => cfg.train.weight_decay,
            batch_size => cfg.train.batch_size,
            milestones => cfg.train.milestones,
            grid => cfg.sweep.lr_grid,
            lr_epochs => cfg.sweep.lr_epochs,
            depths => cfg.sweep.depths,
            probe_size => cfg.sweep.probe_size,
            threshold => cfg.sweep.threshold,
        );
        if let (Some(epochs), None) = (self.epochs, &self.milestones) {
            // Unreachable milestones from the config or defaults are dropped
            // rather than rejected; explicit --milestones are validated as given.
            let before = cfg.train.milestones.len();
            cfg.train.milestones.retain(|&m| m < epochs);
            if cfg.train.milestones.len() != before {
                eprintln!("note: milestones at or beyond epoch {epochs} dropped");
            }
        }
        if self.seeds.is_some() {
            cfg.sweep.seeds = self.seeds;
        }
        if self.h_clamp {
            cfg.h_clamp = true;
        }
        if self.constant_lr {
            cfg.train.milestones.clear();
        }
        if let Some(task) = &self.task {
            cfg.task = match (task.as_str(), parse_task_kind(task)) {
                (_, Some(kind)) => match &cfg.task {
                    TaskConfig::Synthetic(spec) => TaskConfig::Synthetic(rkstack_core::data::TaskSpec {
                        kind,
                        ..spec.clone()
                    }),
                    TaskConfig::Cifar10 { .. } => TaskConfig::Synthetic(rkstack_core::data::TaskSpec {
                        kind,
                        ..rkstack_core::data::TaskSpec::spirals()
                    }),
                },
                ("cifar10", None) => TaskConfig::Cifar10 {
                    dir: self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin")),
                    train_samples: self.train_samples.unwrap_or(5000),
                    test_samples: self.test_samples.unwrap_or(1000),
                },
                (other, None) => {
                    return Err(UsageError(format!(
                        "unknown task `{other}`; valid: spirals, rings, blobs, cifar10"
                    ))
                    .into())
                }
            };
        }
        if let TaskConfig::Cifar10 {
            dir,
            train_samples,
            test_samples,
        } = &mut cfg.task
        {
            if let Some(d) = &self.data_dir {
                *dir = d.clone();
            }
            if let Some(n) = self.train_samples {
                *train_samples = n;
            }
            if let Some(n) = self.test_samples {
                *test_samples = n;
            }
        }
        Ok(())
    }
}

fn base_config(cli: &Cli, command: &str, sweep: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if sweep && cli.config.is_none() {
        cfg.schemes = vec![Scheme::Euler, Scheme::Midpoint, Scheme::Rk4, Scheme::VernerFixed];
    }
    cfg.command = command.to_string();
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let run_dir = |default: String| cli.out.join(cli.run_name.clone().unwrap_or(default));
    match &cli.command {
        Command::OdeVerify {
            schemes,
            verner,
            h_from,
            h_to,
        } => {
            let verner = verner.unwrap_or_default();
            commands::ode_verify(&run_dir("ode-verify".into()), schemes, verner, *h_from, *h_to)
        }
        Command::DumpTableau { scheme, verner } => {
            println!("{}", commands::dump_tableau(*scheme, verner.unwrap_or_default())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            net,
            resume,
            checkpoint_every,
        } => {
            let mut cfg = base_config(&cli, "train", false)?;
            net.apply(&mut cfg)?;
            let scheme = cfg.scheme().map_err(|e| UsageError(e.to_string()))?;
            cfg.output = run_dir(format!("train-{scheme}-d{}", cfg.depth));
            commands::train(cfg, resume.as_deref(), *checkpoint_every)
        }
        Command::Sweep { kind } => {
            let (cmd, net, name) = match kind {
                SweepKind::InitProbe(n) => (SweepCmd::InitProbe, n, "init-probe"),
                SweepKind::Lr(n) => (SweepCmd::Lr, n, "lr"),
                SweepKind::Degradation(n) => (SweepCmd::Degradation, n, "degradation"),
                SweepKind::TimeToThreshold(n) => (SweepCmd::TimeToThreshold, n, "time-to-threshold"),
            };
            let mut cfg = base_config(&cli, &format!("sweep {name}"), true)?;
            net.apply(&mut cfg)?;
            cfg.output = run_dir(format!("sweep-{name}"));
            commands::sweep(cmd, cfg)
        }
        Command::Report { dir } => commands::report(dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                c.is::<UsageError>()
                    || matches!(
                        c.downcast_ref::<rkstack_core::Error>(),
                        Some(rkstack_core::Error::Config(_))
                    )
            });
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
