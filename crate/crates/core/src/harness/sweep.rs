use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::contour::{marching_squares, Grid, Polyline};
use super::metrics::{mse, psnr_from_mse, ssim, Image, SSIM_WINDOW};
use super::stack::{run_stack, ToyStack};
use crate::attention::StreamBatch;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::tensor::Tensor;

/// Renders an `S_i×D` image-token block as a square grayscale image.
///
/// Each pixel is a token's channel mean, mapped through `(v − lo)/(hi − lo)`
/// and clamped to `[0, 1]`. Images narrower than the SSIM window are enlarged
/// by the smallest integer nearest-neighbour factor that fits it.
pub fn render_tokens(tokens: &Tensor, range: (f64, f64)) -> Result<Image> {
    let side = square_side(tokens.rows())?;
    let means = channel_means(tokens);
    let (lo, hi) = range;
    let span = hi - lo;
    let pixels = means
        .iter()
        .map(|&m| if span > 0.0 { ((m - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    let img = Image::new(side, side, pixels)?;
    Ok(img.upscale(SSIM_WINDOW.div_ceil(side)))
}

/// Min and max token channel mean, the normalization range for [`render_tokens`].
pub fn render_range(tokens: &Tensor) -> (f64, f64) {
    channel_means(tokens)
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)))
}

fn channel_means(tokens: &Tensor) -> Vec<f64> {
    let w = tokens.row_len() as f64;
    (0..tokens.rows()).map(|t| tokens.row(t).iter().sum::<f64>() / w).collect()
}

/// Side length of a square image with `n` pixels.
pub fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side == 0 || side * side != n {
        return Err(Error::Config(format!("image token count {n} is not a perfect square")));
    }
    Ok(side)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub delta_k: f64,
    pub delta_v: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Fidelity over the `(δ_k, δ_v)` grid, relative to the unguided output.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub dk_values: Vec<f64>,
    pub dv_values: Vec<f64>,
    /// `δ_k` outer, `δ_v` inner.
    pub records: Vec<SweepRecord>,
    pub reference: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Psnr,
    Ssim,
}

impl Metric {
    pub fn of(self, r: &SweepRecord) -> f64 {
        match self {
            Metric::Mse => r.mse,
            Metric::Psnr => r.psnr,
            Metric::Ssim => r.ssim,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Metric::Mse),
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Mse => "mse",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        })
    }
}

/// Runs the stack at every grid point and scores it against the `(1, 1)` output.
pub fn sweep(stack: &ToyStack, input: &StreamBatch, dk_values: &[f64], dv_values: &[f64]) -> Result<SweepResult> {
    if dk_values.is_empty() || dv_values.is_empty() {
        return Err(Error::Config("sweep needs at least one value per axis".into()));
    }
    square_side(input.img_len())?;
    let range = input.image_range();
    let reference_tokens = run_stack(stack, input, &GuidanceConfig::identity(range.clone()))?;
    let norm = render_range(&reference_tokens);
    let reference = render_tokens(&reference_tokens, norm)?;

    let points: Vec<(f64, f64)> = dk_values
        .iter()
        .flat_map(|&dk| dv_values.iter().map(move |&dv| (dk, dv)))
        .collect();
    let records = points
        .par_iter()
        .map(|&(delta_k, delta_v)| {
            let cfg = GuidanceConfig::new(delta_k, delta_v, range.clone())?;
            let out = run_stack(stack, input, &cfg)?;
            let img = render_tokens(&out, norm)?;
            let m = mse(&img, &reference)?;
            Ok(SweepRecord {
                delta_k,
                delta_v,
                mse: m,
                psnr: psnr_from_mse(m),
                ssim: ssim(&img, &reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SweepResult {
        dk_values: dk_values.to_vec(),
        dv_values: dv_values.to_vec(),
        records,
        reference,
    })
}

/// Iso-fidelity lines of `metric` at `level`, with `x = δ_k` and `y = δ_v`.
///
/// Levels outside the observed range give an empty list.
pub fn iso_contour(result: &SweepResult, metric: Metric, level: f64) -> Result<Vec<Polyline>> {
    let values: Vec<f64> = result.records.iter().map(|r| metric.of(r)).collect();
    if values.len() != result.dk_values.len() * result.dv_values.len() {
        return Err(Error::Shape {
            op: "iso_contour",
            left: vec![result.dk_values.len(), result.dv_values.len()],
            right: vec![values.len()],
        });
    }
    let grid = Grid {
        xs: &result.dk_values,
        ys: &result.dv_values,
        values: &values,
    };
    marching_squares(&grid, level)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_squares() {
        assert_eq!(square_side(64).unwrap(), 8);
        assert_eq!(square_side(1).unwrap(), 1);
        assert!(square_side(60).is_err());
        assert!(square_side(0).is_err());
    }

    #[test]
    fn render_normalizes_and_enlarges() {
        let t = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 5.0, 3.0]).unwrap();
        let range = render_range(&t);
        assert_eq!(range, (0.0, 4.0));
        let img = render_tokens(&t, range).unwrap();
        assert_eq!(img.width(), 12);
        assert_eq!(img.at(0, 0), 0.0);
        assert_eq!(img.at(6, 0), 0.25);
        assert_eq!(img.at(0, 6), 0.5);
        assert_eq!(img.at(11, 11), 1.0);
        let clamped = render_tokens(&t, (1.0, 2.0)).unwrap();
        assert_eq!(clamped.at(0, 0), 0.0);
        assert_eq!(clamped.at(11, 11), 1.0);
    }

    #[test]
    fn metric_names() {
        for m in [Metric::Mse, Metric::Psnr, Metric::Ssim] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("lpips".parse::<Metric>().is_err());
    }
}
