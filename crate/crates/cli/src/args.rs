use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dcag_core::harness::{Metric, StackShape};

#[derive(Debug, Parser)]
#[command(name = "dcag", version, about = "Dual-channel attention guidance: profiling, sweeps and inspection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Delta-to-bias ratio profile of K and V across layers and steps.
    Profile(ProfileArgs),
    /// Fidelity sweep over a (delta_k, delta_v) grid.
    Sweep(SweepArgs),
    /// One guided forward pass with full intermediate dumps.
    Attend(AttendArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DimArgs {
    /// Number of attention layers in the toy stack.
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    /// Denoising steps.
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Hidden dimension D.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long = "txt-tokens", default_value_t = 8)]
    pub txt_tokens: usize,
    #[arg(long = "img-tokens", default_value_t = 64)]
    pub img_tokens: usize,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

impl DimArgs {
    pub fn shape(&self) -> StackShape {
        StackShape {
            layers: self.layers,
            steps: self.steps,
            txt_tokens: self.txt_tokens,
            img_tokens: self.img_tokens,
            dim: self.dim,
            heads: self.heads,
        }
    }

    /// Usage-level validation; `Err` carries the message for the user.
    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("--layers must be at least 1".into());
        }
        self.shape().validate().map_err(|e| e.to_string())
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub dims: DimArgs,
    /// Also write PGM heatmaps (layers on x, steps on y).
    #[arg(long)]
    pub heatmap: bool,
    /// Average per-head ratios instead of using head-flattened token vectors.
    #[arg(long = "per-head")]
    pub per_head: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub dims: DimArgs,
    /// Key-channel delta scales as start:stop:count.
    #[arg(long, default_value = "1.0:1.2:5")]
    pub dk: LinRange,
    /// Value-channel delta scales as start:stop:count.
    #[arg(long, default_value = "1.0:1.2:5")]
    pub dv: LinRange,
    /// Iso-fidelity contour to extract, as metric=level (mse, psnr or ssim).
    #[arg(long)]
    pub contour: Vec<ContourSpec>,
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    #[command(flatten)]
    pub dims: DimArgs,
    /// Guidance configuration document.
    #[arg(long)]
    pub config: PathBuf,
    /// Run the invariant checks and fail if any does not hold.
    #[arg(long)]
    pub check: bool,
}

/// Evenly spaced values `start:stop:count`, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRange {
    pub text: String,
    pub values: Vec<f64>,
}

impl FromStr for LinRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, count] = parts[..] else {
            return Err(format!("expected start:stop:count, got '{s}'"));
        };
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("'{p}' is not a finite number"))
        };
        let (start, stop) = (num(start)?, num(stop)?);
        let count: usize = count
            .trim()
            .parse()
            .map_err(|_| format!("'{count}' is not a count"))?;
        if count == 0 {
            return Err("count must be at least 1".into());
        }
        if count > 1 && stop <= start {
            return Err(format!("stop {stop} must exceed start {start}"));
        }
        // Rounded to 12 decimals so decimal grids like 1.15 land on their nearest double.
        let values = (0..count)
            .map(|i| {
                let v = if count == 1 {
                    start
                } else {
                    start + (stop - start) * i as f64 / (count - 1) as f64
                };
                (v * 1e12).round() / 1e12
            })
            .collect();
        Ok(LinRange {
            text: s.to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourSpec {
    pub metric: Metric,
    pub level: f64,
    pub text: String,
}

impl FromStr for ContourSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (metric, level) = s
            .split_once('=')
            .ok_or_else(|| format!("expected metric=level, got '{s}'"))?;
        let metric = metric.trim().parse::<Metric>().map_err(|e| e.to_string())?;
        let level = level
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("'{level}' is not a finite level"))?;
        Ok(ContourSpec {
            metric,
            level,
            text: s.to_string(),
        })
    }
}
