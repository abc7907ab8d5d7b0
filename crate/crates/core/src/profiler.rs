//! Delta-to-bias ratio profiling of the image-token K and V blocks.
//!
//! For a block `X` of image tokens the ratio is `mean_i ‖X^i − X̄‖₂ / ‖X̄‖₂`.
//! Large ratios mean tokens spread far from their shared bias.

use std::fmt;

use crate::attention::{head_matrix, StreamBatch};
use crate::error::{Error, Result};
use crate::guidance::{decompose, GuidanceConfig};
use crate::harness::stack::{run_stack_observed, ToyStack};
use crate::tensor::{l2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Key,
    Value,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Key => "K",
            Space::Value => "V",
        })
    }
}

/// How token norms are taken for blocks with several heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RatioMode {
    /// One vector per token, all heads flattened together.
    #[default]
    TokenFlattened,
    /// Ratio per head, then averaged over heads.
    PerHead,
}

/// Delta-to-bias ratio with head-flattened token vectors.
pub fn ratio(block: &Tensor) -> Result<f64> {
    ratio_with(block, RatioMode::TokenFlattened)
}

pub fn ratio_with(block: &Tensor, mode: RatioMode) -> Result<f64> {
    match mode {
        RatioMode::TokenFlattened => flattened_ratio(block),
        RatioMode::PerHead => {
            let heads = match block.shape() {
                [_, h, _] => *h,
                _ => return flattened_ratio(block),
            };
            let mut sum = 0.0;
            for h in 0..heads {
                sum += flattened_ratio(&head_matrix(block, h)?)?;
            }
            Ok(sum / heads as f64)
        }
    }
}

fn flattened_ratio(block: &Tensor) -> Result<f64> {
    let bd = decompose(block)?;
    let bias_norm = bd.bias().l2_norm();
    if bias_norm == 0.0 {
        return Err(Error::Degenerate("bias has zero norm; ratio undefined".into()));
    }
    let delta = bd.delta();
    let mean_delta = (0..delta.rows()).map(|t| l2(delta.row(t))).sum::<f64>() / delta.rows() as f64;
    Ok(mean_delta / bias_norm)
}

/// Layer × step ratios for one projection space.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioProfile {
    space: Space,
    ratios: Tensor,
}

impl RatioProfile {
    pub fn new(space: Space, ratios: Tensor) -> Result<Self> {
        if ratios.rank() != 2 {
            return Err(Error::Shape {
                op: "RatioProfile::new",
                left: ratios.shape().to_vec(),
                right: vec![],
            });
        }
        if ratios.data().iter().any(|&r| r < 0.0) {
            return Err(Error::Domain("ratios must be non-negative".into()));
        }
        Ok(RatioProfile { space, ratios })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    /// `[L, T]`, layer-major.
    pub fn ratios(&self) -> &Tensor {
        &self.ratios
    }

    pub fn layer_count(&self) -> usize {
        self.ratios.shape()[0]
    }

    pub fn step_count(&self) -> usize {
        self.ratios.shape()[1]
    }

    pub fn at(&self, layer: usize, step: usize) -> f64 {
        self.ratios.data()[layer * self.step_count() + step]
    }

    pub fn mean(&self) -> f64 {
        self.ratios.data().iter().sum::<f64>() / self.ratios.len() as f64
    }
}

/// Runs the unguided stack and records the K and V ratios of the image block at
/// every (layer, step). K is measured after RoPE.
pub fn profile_stack(stack: &ToyStack, input: &StreamBatch) -> Result<(RatioProfile, RatioProfile)> {
    profile_stack_with(stack, input, RatioMode::default())
}

pub fn profile_stack_with(stack: &ToyStack, input: &StreamBatch, mode: RatioMode) -> Result<(RatioProfile, RatioProfile)> {
    let (layers, steps) = (stack.layers().len(), stack.shape().steps);
    let mut k = vec![0.0; layers * steps];
    let mut v = vec![0.0; layers * steps];
    let mut failure = None;
    let cfg = GuidanceConfig::identity(input.image_range());
    run_stack_observed(stack, input, &cfg, |l, t, qkv| {
        if failure.is_some() {
            return;
        }
        let r = qkv.image_range();
        let cell = qkv
            .k()
            .slice_rows(r.clone())
            .and_then(|b| ratio_with(&b, mode))
            .and_then(|rk| Ok((rk, ratio_with(&qkv.v().slice_rows(r)?, mode)?)));
        match cell {
            Ok((rk, rv)) => {
                k[l * steps + t] = rk;
                v[l * steps + t] = rv;
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((
        RatioProfile::new(Space::Key, Tensor::new(vec![layers, steps], k)?)?,
        RatioProfile::new(Space::Value, Tensor::new(vec![layers, steps], v)?)?,
    ))
}

/// Pearson correlation of two equally shaped tensors, flattened.
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "pearson",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 || a.is_empty() {
        return Err(Error::Degenerate("pearson correlation of a zero-variance series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stack::StackShape;
    use crate::rng::SeedStream;

    #[test]
    fn identical_tokens_give_zero() {
        let x = Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(ratio(&x).unwrap(), 0.0);
    }

    #[test]
    fn two_token_ratio_is_one() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ratio(&x).unwrap(), 1.0);
    }

    #[test]
    fn zero_bias_is_degenerate() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        assert!(matches!(ratio(&x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scale_invariance() {
        let x = SeedStream::new(2, 0).normal(&[12, 2, 4]).add_row(&Tensor::full(&[1, 2, 4], 0.5)).unwrap();
        let r = ratio(&x).unwrap();
        for c in [-3.0, 1e-3, 250.0] {
            assert!((ratio(&x.scale(c).unwrap()).unwrap() - r).abs() < 1e-10 * r);
        }
    }

    #[test]
    fn per_head_mode_averages_heads() {
        // Head 0 is the two-token case (ratio 1), head 1 has identical tokens (ratio 0).
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 3.0, 3.0, 0.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(ratio_with(&x, RatioMode::PerHead).unwrap(), 0.5);
        let flat = ratio(&x).unwrap();
        assert!((flat - 0.5f64.sqrt() / (0.5f64 + 18.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pearson_examples() {
        let a = SeedStream::new(4, 0).normal(&[3, 5]);
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &a.scale(-1.0).unwrap()).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&a, &Tensor::full(&[3, 5], 2.0)), Err(Error::Degenerate(_))));
        assert!(pearson(&a, &Tensor::zeros(&[5, 3])).is_err());
    }

    #[test]
    fn single_identical_token_profile_is_zero() {
        let shape = StackShape {
            layers: 1,
            steps: 1,
            txt_tokens: 1,
            img_tokens: 1,
            dim: 4,
            heads: 1,
        };
        let stack = ToyStack::new(shape, 0).unwrap();
        let x = StreamBatch::new(Tensor::full(&[1, 4], 1.0), Tensor::full(&[1, 4], 1.0)).unwrap();
        let (k, v) = profile_stack(&stack, &x).unwrap();
        assert_eq!(k.at(0, 0), 0.0);
        assert_eq!(v.at(0, 0), 0.0);
    }

    #[test]
    fn profile_shape() {
        let shape = StackShape {
            layers: 3,
            steps: 2,
            txt_tokens: 2,
            img_tokens: 5,
            dim: 8,
            heads: 2,
        };
        let stack = ToyStack::new(shape, 1).unwrap();
        let (k, v) = profile_stack(&stack, &stack.random_input()).unwrap();
        for p in [&k, &v] {
            assert_eq!(p.ratios().shape(), &[3, 2]);
            assert!(p.mean() > 0.0);
        }
        assert_eq!((k.space(), v.space()), (Space::Key, Space::Value));
    }
}
