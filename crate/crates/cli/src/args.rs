// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rotatelab::{AblationMode, Depletion, MomentMode, Role, RotateConfig};

use crate::error::UsageError;

/// Decompose MLP neuron weights into sparse vocabulary channels.
///
/// Set ROTATELAB_LOG (error, warn, info, debug, trace) to control logging.
/// Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
#[derive(Debug, Parser)]
#[command(name = "rotatelab", version)]
pub struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose neurons of one layer into channels and write an archive
    Decompose(DecomposeArgs),
    /// Per-layer vocabulary kurtosis of every neuron
    Survey(SurveyArgs),
    /// Reconstruction curves (explained norm, channel cosine) from an archive
    Reconstruct(ReconstructArgs),
    /// Project one archived channel out of its neuron's weight vector
    Ablate(AblateArgs),
    /// Cross-seed consistency of one neuron's channels
    Match(MatchArgs),
    /// Planted-direction recovery benchmark
    Bench(BenchArgs),
    /// Hyperparameter grid search ranked by harmonic mean
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Gate,
    In,
    Out,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Gate => Role::Gate,
            RoleArg::In => Role::In,
            RoleArg::Out => Role::Out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MomentModeArg {
    ZeroFill,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepletionArg {
    Masking,
    Subtraction,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationModeArg {
    /// w - (w.v_hat) v_hat
    Unit,
    /// w - (w.v) v, without normalizing v
    PaperRaw,
}

impl From<AblationModeArg> for AblationMode {
    fn from(m: AblationModeArg) -> Self {
        match m {
            AblationModeArg::Unit => AblationMode::Unit,
            AblationModeArg::PaperRaw => AblationMode::PaperRaw,
        }
    }
}

/// Decomposition settings. Flags override the config file, which
/// overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Config file with flat keys (TOML, or JSON for a .json extension)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Kurtosis weight in the loss [default: 0.3]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Learning rate [default: 0.002]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Masking threshold in standard deviations [default: 4]
    #[arg(long)]
    pub k_sigma: Option<f64>,
    /// Channels per neuron [default: 50]
    #[arg(long)]
    pub n_iter: Option<usize>,
    /// Optimizer steps per channel [default: 3000]
    #[arg(long)]
    pub n_step: Option<usize>,
    /// Stop once a channel's masked kurtosis falls below this
    #[arg(long)]
    pub tau: Option<f64>,
    /// Convergence threshold on the windowed loss change [default: 1e-6]
    #[arg(long)]
    pub eps_conv: Option<f64>,
    /// Base random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Treatment of masked tokens in the kurtosis [default: zero-fill]
    #[arg(long, value_enum)]
    pub moment_mode: Option<MomentModeArg>,
    /// How each iteration removes what the last channel explained [default: masking]
    #[arg(long, value_enum)]
    pub depletion: Option<DepletionArg>,
    /// Householder reflections per channel, 1 or 2 [default: 1]
    #[arg(long)]
    pub reflections: Option<usize>,
    /// Length of stored top/bottom token lists [default: 50]
    #[arg(long)]
    pub top_k: Option<usize>,
}

impl ConfigArgs {
    /// Layer defaults (`base`), the config file, then flags.
    pub fn resolve(&self, base: RotateConfig) -> anyhow::Result<RotateConfig> {
        let mut c = match &self.config {
            Some(path) => rotatelab::modelio::load_config_over(path, base)?,
            None => base,
        };
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { c.$field = v; } )* };
        }
        set!(lambda, eta, k_sigma, n_iter, n_step, eps_conv, seed, reflections, top_k);
        if self.tau.is_some() {
            c.tau = self.tau;
        }
        if let Some(m) = self.moment_mode {
            c.moment_mode = match m {
                MomentModeArg::ZeroFill => MomentMode::ZeroFill,
                MomentModeArg::Exclude => MomentMode::Exclude,
            };
        }
        if let Some(d) = self.depletion {
            c.depletion = match d {
                DepletionArg::Masking => Depletion::Masking,
                DepletionArg::Subtraction => Depletion::Subtraction,
                DepletionArg::None => Depletion::None,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

/// Which neurons of a weight matrix to process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NeuronSelector {
    All,
    /// Uniform sample without replacement, seeded by the config seed.
    Random(usize),
    /// Explicit indices and inclusive ranges, e.g. `3,10-12`.
    Indices(Vec<u32>),
}

impl FromStr for NeuronSelector {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UsageError(format!("invalid neuron selector {s:?} (use all, random:N or a list like 3,10-12)"));
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(n) = s.strip_prefix("random:") {
            return n.parse().map(Self::Random).map_err(|_| bad());
        }
        let mut out = Vec::new();
        for part in s.split(',') {
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b): (u32, u32) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                    if a > b {
                        return Err(bad());
                    }
                    out.extend(a..=b);
                }
                None => out.push(part.parse().map_err(|_| bad())?),
            }
        }
        Ok(Self::Indices(out))
    }
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Bundle directory (safetensors + vocab.json + meta.json)
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    /// Layer index
    #[arg(long)]
    pub layer: u32,
    /// Weight matrix to read neurons from
    #[arg(long, value_enum, default_value = "gate")]
    pub role: RoleArg,
    /// Neurons: all, random:N, or indices like 3,10-12
    #[arg(long, default_value = "random:100")]
    pub neurons: NeuronSelector,
    /// Extra glitch-token list, added to the bundle's glitch.txt
    #[arg(long, value_name = "FILE")]
    pub glitch: Option<PathBuf>,
    /// Archive to write (JSON Lines)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write a per-neuron summary CSV
    #[arg(long, value_name = "FILE")]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SurveyArgs {
    /// Bundle directory
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    /// Layers to survey, comma separated [default: all]
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<u32>,
    /// Weight matrix to survey
    #[arg(long, value_enum, default_value = "gate")]
    pub role: RoleArg,
    /// Extra glitch-token list, added to the bundle's glitch.txt
    #[arg(long, value_name = "FILE")]
    pub glitch: Option<PathBuf>,
    /// Per-neuron kurtosis CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Per-layer quantile summary CSV
    #[arg(long, value_name = "FILE")]
    pub summary: Option<PathBuf>,
    /// Neurons of interest, one `layer:index` per line; their percentiles are reported
    #[arg(long, value_name = "FILE")]
    pub focus: Option<PathBuf>,
    /// Render per-layer quartiles as SVG
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Archive written by `decompose`
    #[arg(long, value_name = "FILE")]
    pub archive: PathBuf,
    /// Bundle the archive was produced from
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    /// Per-iteration CSV (quartiles across neurons)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Render the median curves as SVG
    #[arg(long, value_name = "FILE")]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Archive written by `decompose`
    #[arg(long, value_name = "FILE")]
    pub archive: PathBuf,
    /// Bundle the archive was produced from
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    /// Neuron index within the archived layer and role
    #[arg(long)]
    pub neuron: u32,
    /// Zero-based channel position within the neuron's decomposition
    #[arg(long)]
    pub channel: usize,
    /// Normalization of the removed direction
    #[arg(long, value_enum, default_value = "unit")]
    pub mode: AblationModeArg,
    /// Write the ablated vector as a JSON array
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Bundle directory; without it a planted instance is used
    #[arg(long, value_name = "DIR", requires = "layer")]
    pub bundle: Option<PathBuf>,
    /// Layer index (with --bundle)
    #[arg(long)]
    pub layer: Option<u32>,
    /// Weight matrix (with --bundle)
    #[arg(long, value_enum, default_value = "gate")]
    pub role: RoleArg,
    /// Neuron index (with --bundle)
    #[arg(long, default_value_t = 0)]
    pub neuron: u32,
    /// Seed of the planted instance (without --bundle)
    #[arg(long, default_value_t = 0)]
    pub plant_seed: u64,
    /// Run seeds to compare
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub seeds: Vec<u64>,
    /// Top tokens compared by Jaccard
    #[arg(long, default_value_t = 20)]
    pub topk: usize,
    /// Matched-pair CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Planted directions
    #[arg(long = "K", visible_alias = "k", default_value_t = 3)]
    pub k: usize,
    /// Model width
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Vocabulary size
    #[arg(long = "vocab-size", default_value_t = 512)]
    pub vocab_size: usize,
    /// Support tokens per direction
    #[arg(long, default_value_t = 8)]
    pub sparsity: usize,
    /// Noise norm relative to the planted signal
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Planted instances to generate
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub plant_seeds: Vec<u64>,
    /// Per-direction recovery CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the decompositions as an archive
    #[arg(long, value_name = "FILE")]
    pub archive: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Bundle directory; without it planted instances are used
    #[arg(long, value_name = "DIR", requires = "layer")]
    pub bundle: Option<PathBuf>,
    /// Layer index (with --bundle)
    #[arg(long)]
    pub layer: Option<u32>,
    /// Weight matrix (with --bundle)
    #[arg(long, value_enum, default_value = "gate")]
    pub role: RoleArg,
    /// Neurons (with --bundle): all, random:N, or indices
    #[arg(long, default_value = "random:10")]
    pub neurons: NeuronSelector,
    /// Planted instances (without --bundle)
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub plant_seeds: Vec<u64>,
    /// Grid values for lambda
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    pub lambdas: Vec<f64>,
    /// Grid values for eta
    #[arg(long, value_delimiter = ',', default_value = "0.0008,0.002")]
    pub etas: Vec<f64>,
    /// Grid values for k_sigma
    #[arg(long, value_delimiter = ',', default_value = "4,6,8")]
    pub k_sigmas: Vec<f64>,
    /// Ranked grid CSV
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Base settings; n_step defaults to 500 here
    #[command(flatten)]
    pub config: ConfigArgs,
}
