//! Command-line flags, config files and the validated [`RunSpec`] they
//! resolve to.

use std::path::{Path, PathBuf};

use actq::layers::{CompressionPolicy, Granularity, ModuleFlags, OpFlags};
use actq::model::ModelConfig;
use actq::quant::{QuantConfig, Rounding, Scheme, StatsMode};
use actq::task::TaskKind;
use actq::train::{TrainConfig, DEFAULT_LOG_STRIDE};
use actq::Precision;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "MESA_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "actq",
    version,
    about = "Train small transformers with 8-bit compressed activations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed.
    Train(RunArgs),
    /// Train one model per row of an ablation axis.
    Sweep(SweepArgs),
    /// Time the quantizer kernels and histogram their round-trip error.
    Microbench(MicrobenchArgs),
    /// Print the summary stored in an output directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// none, each op alone, all ops
    CompressOp,
    /// none, MSA, FFN, MSA+FFN
    CompressModule,
    Rounding,
    Stats,
    Scheme,
    Granularity,
    Lambda,
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ops whose stored activations are compressed: all, none, or a list of
    /// matmul, softmax, layernorm, gelu.
    #[arg(long, value_name = "OPS")]
    pub compress: Option<String>,
    /// Modules whose ops are compressed: all, none, or a list of msa, ffn.
    #[arg(long)]
    pub modules: Option<String>,
    /// head, layer or channel:<G>
    #[arg(long)]
    pub granularity: Option<String>,
    /// stochastic or nearest
    #[arg(long)]
    pub rounding: Option<String>,
    /// running or per-sample
    #[arg(long)]
    pub stats: Option<String>,
    /// asymmetric or symmetric
    #[arg(long)]
    pub scheme: Option<String>,
    /// Running-estimate decay, in [0, 1).
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seed list; one run per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// marker-detection or majority-token
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub max_markers: Option<usize>,
    /// Log metrics and quantizer trajectories every this many steps.
    #[arg(long)]
    pub log_stride: Option<u64>,
    /// standard (f32) or oracle (f64, never compressed)
    #[arg(long)]
    pub precision: Option<String>,
    /// Run backward from exact copies kept next to the compressed tensors.
    #[arg(long)]
    pub shadow_exact: bool,
    /// Runs executed in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Debug, Args)]
pub struct MicrobenchArgs {
    /// Elements per quantized tensor.
    #[arg(long, default_value_t = 1 << 16)]
    pub elements: usize,
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a train or sweep command.
    pub dir: PathBuf,
}

/// Config-file keys; identical to the long flag names.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub compress: Option<String>,
    pub modules: Option<String>,
    pub granularity: Option<String>,
    pub rounding: Option<String>,
    pub stats: Option<String>,
    pub scheme: Option<String>,
    pub lambda: Option<f32>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub depth: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub seq_len: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub vocab_size: Option<usize>,
    pub task: Option<String>,
    pub max_markers: Option<usize>,
    pub log_stride: Option<u64>,
    pub precision: Option<String>,
    pub shadow_exact: Option<bool>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Train,
    Sweep,
}

/// Everything one invocation of `train` or `sweep` will do. Written into
/// every summary it produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub command: CommandKind,
    pub model: ModelConfig,
    pub task: TaskKind,
    pub max_markers: usize,
    /// `seed` inside is the first entry of `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepAxis>,
    pub jobs: usize,
    pub out: PathBuf,
}

pub fn parse_rounding(s: &str) -> Result<Rounding, String> {
    match s {
        "stochastic" => Ok(Rounding::Stochastic),
        "nearest" => Ok(Rounding::Nearest),
        _ => Err(format!("rounding must be stochastic or nearest, got `{s}`")),
    }
}

pub fn parse_stats(s: &str) -> Result<StatsMode, String> {
    match s {
        "running" | "running-estimate" => Ok(StatsMode::RunningEstimate),
        "per-sample" => Ok(StatsMode::PerSample),
        _ => Err(format!("stats must be running or per-sample, got `{s}`")),
    }
}

pub fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "asymmetric" => Ok(Scheme::Asymmetric),
        "symmetric" => Ok(Scheme::Symmetric),
        _ => Err(format!("scheme must be asymmetric or symmetric, got `{s}`")),
    }
}

pub fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "standard" | "f32" => Ok(Precision::Standard),
        "oracle" | "f64" => Ok(Precision::Oracle),
        _ => Err(format!("precision must be standard or oracle, got `{s}`")),
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

impl RunSpec {
    /// Merges flags over the config file over the environment over
    /// defaults, then validates. Sweeps compress every op by default.
    pub fn resolve(
        command: CommandKind,
        args: &RunArgs,
        sweep: Option<SweepAxis>,
        env_seed: Option<&str>,
    ) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        macro_rules! pick {
            ($field:ident) => {
                args.$field.clone().or(file.$field.clone())
            };
        }

        let default_model = ModelConfig::default();
        let model = ModelConfig {
            depth: pick!(depth).unwrap_or(default_model.depth),
            dim: pick!(dim).unwrap_or(default_model.dim),
            heads: pick!(heads).unwrap_or(default_model.heads),
            seq_len: pick!(seq_len).unwrap_or(default_model.seq_len),
            mlp_ratio: pick!(mlp_ratio).unwrap_or(default_model.mlp_ratio),
            num_classes: 2,
            vocab_size: pick!(vocab_size).unwrap_or(default_model.vocab_size),
        };
        model.validate().map_err(usage)?;

        let ops = match pick!(compress) {
            Some(s) => OpFlags::parse_list(&s).map_err(usage)?,
            None if command == CommandKind::Sweep => OpFlags::ALL,
            None => OpFlags::NONE,
        };
        let modules = match pick!(modules) {
            Some(s) => ModuleFlags::parse_list(&s).map_err(usage)?,
            None => ModuleFlags::ALL,
        };
        let granularity: Granularity = match pick!(granularity) {
            Some(s) => s.parse().map_err(usage)?,
            None => Granularity::Head,
        };
        let defaults = QuantConfig::default();
        let quant = QuantConfig {
            scheme: pick!(scheme)
                .map(|s| parse_scheme(&s))
                .transpose()
                .map_err(usage)?
                .unwrap_or(defaults.scheme),
            rounding: pick!(rounding)
                .map(|s| parse_rounding(&s))
                .transpose()
                .map_err(usage)?
                .unwrap_or(defaults.rounding),
            stats: pick!(stats)
                .map(|s| parse_stats(&s))
                .transpose()
                .map_err(usage)?
                .unwrap_or(defaults.stats),
            lambda: pick!(lambda).unwrap_or(defaults.lambda),
        };
        if quant.scheme == Scheme::Symmetric && quant.stats == StatsMode::PerSample {
            return Err(CliError::Usage(
                "symmetric quantization has no offset to estimate per sample; \
                 use --stats running with --scheme symmetric"
                    .into(),
            ));
        }
        let policy = CompressionPolicy {
            ops,
            modules,
            granularity,
            quant,
        };
        policy.validate().map_err(usage)?;
        if let Granularity::Channel(g) = granularity {
            if g > model.dim {
                return Err(CliError::Usage(format!(
                    "channel:{g} has more groups than the {} channels",
                    model.dim
                )));
            }
        }

        let seeds = if args.seed.is_some() || args.seeds.is_some() {
            args.seed.map(|s| vec![s]).or(args.seeds.clone())
        } else {
            file.seed.map(|s| vec![s]).or(file.seeds.clone())
        };
        let seeds = match seeds {
            Some(s) => s,
            None => match env_seed {
                Some(v) => vec![v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not a seed")))?],
                None => vec![0],
            },
        };
        if seeds.is_empty() {
            return Err(CliError::Usage("empty seed list".into()));
        }
        let mut dedup = seeds.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != seeds.len() {
            return Err(CliError::Usage("seed list has duplicates".into()));
        }

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            steps: pick!(steps).unwrap_or(defaults.steps),
            batch_size: pick!(batch_size).unwrap_or(defaults.batch_size),
            lr: pick!(lr).unwrap_or(defaults.lr),
            weight_decay: pick!(weight_decay).unwrap_or(defaults.weight_decay),
            seed: seeds[0],
            policy,
            precision: pick!(precision)
                .map(|s| parse_precision(&s))
                .transpose()
                .map_err(usage)?
                .unwrap_or(Precision::Standard),
            log_stride: pick!(log_stride).unwrap_or(DEFAULT_LOG_STRIDE),
            shadow_exact: args.shadow_exact || file.shadow_exact.unwrap_or(false),
        };
        train.validate().map_err(usage)?;

        let task: TaskKind = match pick!(task) {
            Some(s) => s.parse().map_err(usage)?,
            None => TaskKind::MarkerDetection,
        };
        let max_markers = pick!(max_markers).unwrap_or(3);
        if max_markers == 0 || max_markers > model.seq_len {
            return Err(CliError::Usage(format!(
                "max-markers must lie in 1..={}",
                model.seq_len
            )));
        }
        let jobs = pick!(jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::Usage("jobs must be positive".into()));
        }
        if let Some(axis) = sweep {
            check_axis(axis, &policy)?;
        }
        Ok(RunSpec {
            command,
            model,
            task,
            max_markers,
            train,
            seeds,
            sweep,
            jobs,
            out: pick!(out).unwrap_or_else(|| PathBuf::from("runs")),
        })
    }
}

fn check_axis(axis: SweepAxis, policy: &CompressionPolicy) -> Result<(), CliError> {
    let q = policy.quant;
    match axis {
        SweepAxis::Stats if q.scheme == Scheme::Symmetric => Err(CliError::Usage(
            "the stats sweep includes per-sample statistics, which symmetric quantization lacks"
                .into(),
        )),
        SweepAxis::Scheme if q.stats == StatsMode::PerSample => Err(CliError::Usage(
            "the scheme sweep includes symmetric quantization, which needs --stats running".into(),
        )),
        SweepAxis::CompressModule if !policy.ops.any() => Err(CliError::Usage(
            "the module sweep needs at least one op in --compress".into(),
        )),
        _ => Ok(()),
    }
}
