//! `uqcat`: phantom generation, training, uncertainty sampling and analysis
//! from the command line.
//!
//! Exit codes: 0 on success, 1 when a stage fails at runtime (the stage is
//! named on stderr), 2 for usage and configuration errors.

pub mod commands;
pub mod config;
pub mod files;
pub mod manifest;

use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use uqcat_core::phantom::PhantomSpec;

use crate::config::{load_config, PipelineConfig, TrainSection};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{stage} failed: {message}")]
    Runtime { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime { .. } => 1,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            stage,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "uqcat",
    version,
    about = "Uncertainty-category experiments on synthetic phantoms"
)]
pub struct Cli {
    /// Worker threads; defaults to all cores. Outputs do not depend on it.
    #[arg(long, global = true, env = "UQCAT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom cohort.
    Phantom(PhantomArgs),
    /// Train the slice network on a phantom cohort.
    Train(TrainArgs),
    /// Sample uncertainty cases and write mean/variance/entropy maps.
    Run(RunArgs),
    /// Cross-case statistics over a directory of entropy maps.
    Analyze(AnalyzeArgs),
    /// Print the case registry.
    Cases(CasesArgs),
    /// phantom, train, run and analyze in one reproducible run.
    Pipeline(PipelineArgs),
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad dimension {p:?}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected X,Y,Z".to_string())
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub satellite: bool,
    /// Config file; its `phantom` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `sub-<i>_img.vvol` / `sub-<i>_lab.vvol`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config file; its `train` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of `sub-<i>_img.vvol`.
    #[arg(long)]
    pub subjects: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Case ids, e.g. `1-14` or `1,6,13`.
    #[arg(long)]
    pub cases: Option<String>,
    /// Threshold each sample at 0.5 before computing the maps.
    #[arg(long)]
    pub binarize: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Average correlation matrices in Fisher-z space.
    #[arg(long)]
    pub fisher_z: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CasesArgs {
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON config with `phantom`, `train`, `run` and `analyze` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Use this checkpoint instead of training.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of test subjects.
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub cases: Option<String>,
    #[arg(long)]
    pub binarize: bool,
}

fn file_config(path: &Option<PathBuf>) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Applies pipeline flags over the file configuration.
pub fn resolve_pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = file_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        match &mut cfg.train {
            Some(t) => t.fit.epochs = epochs,
            None if args.model.is_none() => {
                cfg.train = Some(TrainSection::default());
                cfg.train.as_mut().expect("just set").fit.epochs = epochs;
            }
            None => {}
        }
    }
    if args.model.is_some() {
        cfg.train = None;
    }
    if let Some(n) = args.subjects {
        cfg.phantom.test_subjects = n;
    }
    if let Some(n) = args.samples {
        cfg.run.samples = n;
    }
    if let Some(c) = &args.cases {
        cfg.run.cases = c.clone();
    }
    if args.binarize {
        cfg.run.binarize = true;
    }
    Ok(cfg)
}

fn phantom_cmd(args: &PhantomArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let mut spec: PhantomSpec = cfg.phantom.spec;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(dims) = args.dims {
        spec.dims = dims;
    }
    if args.satellite {
        spec.satellite = true;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let n = args.subjects.unwrap_or(cfg.phantom.test_subjects);
    if n == 0 {
        return Err(CliError::Usage("--subjects must be at least 1".into()));
    }
    commands::write_cohort(&spec, n, &args.out).map(|_| ())
}

fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let mut section = cfg.train.unwrap_or_default();
    if let Some(epochs) = args.epochs {
        section.fit.epochs = epochs;
    }
    let seed = args.seed.unwrap_or(section.fit.seed);
    section.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    section.fit.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cohort = commands::load_cohort(&args.data, "train")?;
    let (net, _) = commands::train_model(&cohort, &section, seed, seed)?;
    commands::save_model(&net, &args.out)
}

fn run_cmd(args: &RunArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    let mut run = cfg.run;
    if let Some(n) = args.samples {
        run.samples = n;
    }
    if let Some(c) = &args.cases {
        run.cases = c.clone();
    }
    if args.binarize {
        run.binarize = true;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    commands::resolve_cases(&run.cases)?;
    let net = commands::load_model(&args.model)?;
    let digest = files::sha256_file(&args.model).stage("load model")?;
    commands::run_subjects(&net, digest, &args.subjects, &args.out, &run, seed).map(|_| ())
}

fn analyze_cmd(args: &AnalyzeArgs) -> Result<(), CliError> {
    let cfg = file_config(&args.config)?;
    commands::analyze_maps(&args.maps, &args.out, args.fisher_z || cfg.analyze.fisher_z)
}

fn pipeline_cmd(args: &PipelineArgs) -> Result<(), CliError> {
    let cfg = resolve_pipeline_config(args)?;
    commands::pipeline(&cfg, args.model.as_deref(), &args.out).map(|_| ())
}

/// Runs a parsed command line inside a pool of the requested size.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().stage("thread pool")?;
    pool.install(|| match &cli.command {
        Command::Phantom(a) => phantom_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Cases(_) => {
            print!("{}", commands::cases_table());
            Ok(())
        }
        Command::Pipeline(a) => pipeline_cmd(a),
    })
}
