use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixprec::BitWidth;

use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "mixprec",
    version,
    about = "Mixed-precision post-training weight quantization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a model at searched (--qem) or uniform (--uniform) widths and write the container
    Quantize(CommonArgs),
    /// Run the bit-width search for each QEM
    Search(CommonArgs),
    /// Search over a QEM list (deduplicated, ascending), optionally with agreement metrics
    Sweep(CommonArgs),
    /// Layer-type sweep and per-position relative error tables
    Ablate(CommonArgs),
    /// Model QMSE vs. agreement at uniform widths, with rank correlation
    Correlate(CommonArgs),
    /// Error table JSON and search runtime for 1 and 10 QEMs
    Report(CommonArgs),
    /// Write a seeded synthetic conv net (manifest, blobs, network.json)
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model manifest (JSON)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use a seeded synthetic conv net with this many weight layers instead of --model
    #[arg(long, conflicts_with = "model")]
    pub synthetic: Option<usize>,
    /// Network topology (JSON) for agreement metrics
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Raw little-endian f32 input batch; random inputs are drawn when absent
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value = "8,7,6,5,4,3,2")]
    pub bits: String,
    /// Comma separated quantization error multipliers
    #[arg(long)]
    pub qem: Option<String>,
    /// Uniform width for `quantize` when no --qem is given
    #[arg(long)]
    pub uniform: Option<u8>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Attach top-1/top-k/avg-loss agreement metrics (needs a network)
    #[arg(long)]
    pub eval: bool,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub spatial: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Quantize,
    Search,
    Sweep,
    Ablate,
    Correlate,
    Report,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Quantize => "quantize",
            CommandKind::Search => "search",
            CommandKind::Sweep => "sweep",
            CommandKind::Ablate => "ablate",
            CommandKind::Correlate => "correlate",
            CommandKind::Report => "report",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ModelSource {
    Manifest(PathBuf),
    Synthetic(usize),
}

/// Validated command configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandKind,
    pub model: ModelSource,
    pub network: Option<PathBuf>,
    pub batch: Option<PathBuf>,
    pub batch_size: usize,
    pub bits: Vec<BitWidth>,
    pub qems: Vec<f32>,
    pub uniform: Option<BitWidth>,
    pub out: PathBuf,
    pub seed: u64,
    pub format: Format,
    pub eval: bool,
    pub topk: usize,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn parse_bits(s: &str) -> CliResult<Vec<BitWidth>> {
    let bits = BitWidth::parse_list(s)
        .map_err(|_| usage(format!("--bits {s:?}: widths must be in 2..=8")))?;
    if bits.is_empty() {
        return Err(usage("--bits is empty"));
    }
    for (i, b) in bits.iter().enumerate() {
        if bits[..i].contains(b) {
            return Err(usage(format!("--bits lists {b} twice")));
        }
    }
    if !bits.contains(&BitWidth::INT8) {
        return Err(usage("--bits must include 8 (the baseline width)"));
    }
    Ok(bits)
}

pub fn parse_qems(s: &str) -> CliResult<Vec<f32>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| match p.parse::<f32>() {
            Ok(q) if q.is_finite() && q > 0.0 => Ok(q),
            _ => Err(usage(format!("--qem {p:?}: must be a positive number"))),
        })
        .collect()
}

impl RunConfig {
    pub fn from_args(command: CommandKind, a: CommonArgs) -> CliResult<Self> {
        let model = match (a.model, a.synthetic) {
            (Some(p), None) => ModelSource::Manifest(p),
            (None, Some(n)) if n >= 2 => ModelSource::Synthetic(n),
            (None, Some(n)) => return Err(usage(format!("--synthetic {n}: at least 2 layers"))),
            (None, None) => return Err(usage("either --model or --synthetic is required")),
            (Some(_), Some(_)) => return Err(usage("--model and --synthetic are exclusive")),
        };
        let bits = parse_bits(&a.bits)?;
        let qems = match &a.qem {
            Some(s) => parse_qems(s)?,
            None => Vec::new(),
        };
        if matches!(command, CommandKind::Search | CommandKind::Sweep) && qems.is_empty() {
            return Err(usage(format!(
                "{} needs a non-empty --qem list",
                command.name()
            )));
        }
        let uniform = a
            .uniform
            .map(|b| {
                BitWidth::new(b).map_err(|_| usage(format!("--uniform {b}: must be in 2..=8")))
            })
            .transpose()?;
        if command == CommandKind::Quantize && qems.is_empty() && uniform.is_none() {
            return Err(usage("quantize needs --qem or --uniform"));
        }
        if command == CommandKind::Correlate && bits.len() < 3 {
            return Err(usage("correlate needs at least 3 bit-widths"));
        }
        if a.topk == 0 {
            return Err(usage("--topk must be at least 1"));
        }
        if a.batch_size == 0 {
            return Err(usage("--batch-size must be at least 1"));
        }
        Ok(RunConfig {
            command,
            model,
            network: a.network,
            batch: a.batch,
            batch_size: a.batch_size,
            bits,
            qems,
            uniform,
            out: a.out,
            seed: a.seed,
            format: a.format,
            eval: a.eval,
            topk: a.topk,
        })
    }
}
