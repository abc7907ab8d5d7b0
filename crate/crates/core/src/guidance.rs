//! Dual-channel bias-delta guidance.
//!
//! The image-token block of K (after RoPE) and of V is split into its
//! token-wise mean (the bias) and per-token deviations (the deltas). Each
//! channel is then rebuilt as `λ·bias + δ·delta` before joint attention. The
//! key channel reshapes the attention distribution; the value channel scales
//! the aggregated features linearly.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{joint_attention, project_qkv, JointQKV, LayerWeights, StreamBatch};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recommended key-channel delta scale.
pub const DEFAULT_DELTA_K: f64 = 1.10;
/// Recommended value-channel delta scale.
pub const DEFAULT_DELTA_V: f64 = 1.15;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub delta_k: f64,
    pub delta_v: f64,
    pub lambda_k: f64,
    pub lambda_v: f64,
    /// Image tokens in the concatenated sequence, half-open.
    pub token_range: Range<usize>,
    /// Layers to guide; empty means every layer.
    pub guided_layers: BTreeSet<usize>,
}

impl GuidanceConfig {
    /// Bias scales fixed at 1.
    pub fn new(delta_k: f64, delta_v: f64, token_range: Range<usize>) -> Result<Self> {
        let cfg = GuidanceConfig {
            delta_k,
            delta_v,
            lambda_k: 1.0,
            lambda_v: 1.0,
            token_range,
            guided_layers: BTreeSet::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// All four scales at 1: guidance is a no-op.
    pub fn identity(token_range: Range<usize>) -> Self {
        GuidanceConfig {
            delta_k: 1.0,
            delta_v: 1.0,
            lambda_k: 1.0,
            lambda_v: 1.0,
            token_range,
            guided_layers: BTreeSet::new(),
        }
    }

    /// `(δ_k, δ_v) = (1.10, 1.15)`.
    pub fn recommended(token_range: Range<usize>) -> Self {
        GuidanceConfig {
            delta_k: DEFAULT_DELTA_K,
            delta_v: DEFAULT_DELTA_V,
            ..Self::identity(token_range)
        }
    }

    pub fn with_lambdas(mut self, lambda_k: f64, lambda_v: f64) -> Self {
        self.lambda_k = lambda_k;
        self.lambda_v = lambda_v;
        self
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.guided_layers = layers.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_k", self.delta_k),
            ("delta_v", self.delta_v),
            ("lambda_k", self.lambda_k),
            ("lambda_v", self.lambda_v),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if self.token_range.start >= self.token_range.end {
            return Err(Error::Config(format!("empty token range {:?}", self.token_range)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        [self.delta_k, self.delta_v, self.lambda_k, self.lambda_v]
            .iter()
            .all(|&s| s == 1.0)
    }

    pub fn guides_layer(&self, layer: usize) -> bool {
        self.guided_layers.is_empty() || self.guided_layers.contains(&layer)
    }

    /// Plain-text `key = value` form.
    pub fn to_document(&self) -> String {
        let doc = ConfigDocument {
            delta_k: self.delta_k,
            delta_v: self.delta_v,
            lambda_k: self.lambda_k,
            lambda_v: self.lambda_v,
            token_range: Some([self.token_range.start, self.token_range.end]),
            guided_layers: self.guided_layers.iter().copied().collect(),
        };
        toml::to_string(&doc).expect("config document serializes")
    }

    /// Parses a document written by [`to_document`](Self::to_document).
    ///
    /// `lambda_*` default to 1, `guided_layers` to all layers. When
    /// `token_range` is absent, `fallback_range` is used.
    pub fn from_document(text: &str, fallback_range: Option<Range<usize>>) -> Result<Self> {
        let doc: ConfigDocument = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let token_range = match (doc.token_range, fallback_range) {
            (Some([s, e]), _) => s..e,
            (None, Some(r)) => r,
            (None, None) => return Err(Error::Config("missing token_range".into())),
        };
        let cfg = GuidanceConfig {
            delta_k: doc.delta_k,
            delta_v: doc.delta_v,
            lambda_k: doc.lambda_k,
            lambda_v: doc.lambda_v,
            token_range,
            guided_layers: doc.guided_layers.into_iter().collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    delta_k: f64,
    delta_v: f64,
    #[serde(default = "one")]
    lambda_k: f64,
    #[serde(default = "one")]
    lambda_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_range: Option<[usize; 2]>,
    #[serde(default)]
    guided_layers: Vec<usize>,
}

/// A token block split into its token-wise mean and the per-token deviations.
///
/// The source block is kept so rescaling can be applied as a correction to it,
/// which makes unit scales reproduce the block bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDelta {
    bias: Tensor,
    delta: Tensor,
    block: Tensor,
}

impl BiasDelta {
    /// Token-wise mean, shape `[1, H, d_h]`.
    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Per-token deviations from the bias, shape `[S_i, H, d_h]`.
    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn reconstruct(&self) -> Tensor {
        self.block.clone()
    }
}

/// Splits `block` (`[S_i, H, d_h]`) into bias and deltas, independently per head.
pub fn decompose(block: &Tensor) -> Result<BiasDelta> {
    if block.rank() < 2 || block.rows() == 0 {
        return Err(Error::Domain(format!(
            "cannot decompose a block of shape {:?}",
            block.shape()
        )));
    }
    let bias = block.mean_over_tokens()?;
    let delta = block.add_row(&bias.scale(-1.0)?)?;
    Ok(BiasDelta {
        bias,
        delta,
        block: block.clone(),
    })
}

/// `lambda·bias + delta_scale·delta` for every token.
///
/// Evaluated as `x + (lambda − 1)·bias + (delta_scale − 1)·delta`, skipping
/// terms whose coefficient is zero.
pub fn rescale(bd: &BiasDelta, lambda: f64, delta_scale: f64) -> Result<Tensor> {
    for (name, v) in [("lambda", lambda), ("delta_scale", delta_scale)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Domain(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    let (bias_coef, delta_coef) = (lambda - 1.0, delta_scale - 1.0);
    let w = bd.block.row_len();
    let mut out = bd.block.data().to_vec();
    if bias_coef != 0.0 {
        for (i, x) in out.iter_mut().enumerate() {
            *x += bias_coef * bd.bias.data()[i % w];
        }
    }
    if delta_coef != 0.0 {
        for (x, d) in out.iter_mut().zip(bd.delta.data()) {
            *x += delta_coef * d;
        }
    }
    Tensor::new(bd.block.shape().to_vec(), out)
}

fn rescale_rows(x: &Tensor, range: Range<usize>, lambda: f64, delta_scale: f64) -> Result<Tensor> {
    let block = x.slice_rows(range.clone())?;
    let guided = rescale(&decompose(&block)?, lambda, delta_scale)?;
    x.with_rows_replaced(range, &guided)
}

/// Rescales the image-token block of K and V. Q and text rows are untouched.
pub fn apply_dcag(qkv: JointQKV, cfg: &GuidanceConfig) -> Result<JointQKV> {
    cfg.validate()?;
    let range = qkv.image_range();
    if cfg.token_range != range {
        return Err(Error::Config(format!(
            "guidance token range {:?} does not match image range {range:?}",
            cfg.token_range
        )));
    }
    let qkv = if cfg.lambda_k != 1.0 || cfg.delta_k != 1.0 {
        let k = rescale_rows(qkv.k(), range.clone(), cfg.lambda_k, cfg.delta_k)?;
        qkv.with_k(k)?
    } else {
        qkv
    };
    if cfg.lambda_v != 1.0 || cfg.delta_v != 1.0 {
        let v = rescale_rows(qkv.v(), range, cfg.lambda_v, cfg.delta_v)?;
        qkv.with_v(v)
    } else {
        Ok(qkv)
    }
}

/// Projection, guidance and joint attention for one layer.
pub fn guided_attention(x: &StreamBatch, w: &LayerWeights, cfg: &GuidanceConfig) -> Result<StreamBatch> {
    let qkv = apply_dcag(project_qkv(x, w)?, cfg)?;
    joint_attention(&qkv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn two_token_block() -> Tensor {
        Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn identical_tokens_have_zero_delta() {
        let x = Tensor::new(vec![3, 1, 2], vec![0.3, -1.7, 0.3, -1.7, 0.3, -1.7]).unwrap();
        let bd = decompose(&x).unwrap();
        assert_eq!(bd.bias().data(), &[0.3, -1.7]);
        assert!(bd.delta().max_abs() < 1e-15);
    }

    #[test]
    fn two_token_decomposition() {
        let bd = decompose(&two_token_block()).unwrap();
        assert_eq!(bd.bias().shape(), &[1, 1, 2]);
        assert_eq!(bd.bias().data(), &[0.5, 0.5]);
        assert_eq!(bd.delta().data(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn rescale_examples() {
        let x = two_token_block();
        let bd = decompose(&x).unwrap();
        assert_eq!(rescale(&bd, 1.0, 1.0).unwrap(), x);
        let collapsed = rescale(&bd, 1.0, 0.0).unwrap();
        assert_eq!(collapsed.data(), &[0.5, 0.5, 0.5, 0.5]);
        let doubled = rescale(&bd, 1.0, 2.0).unwrap();
        assert_eq!(doubled.data(), &[1.5, -0.5, -0.5, 1.5]);
        assert!(rescale(&bd, -1.0, 1.0).is_err());
        assert!(rescale(&bd, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn empty_block_is_rejected() {
        assert!(matches!(decompose(&Tensor::zeros(&[0, 2, 2])), Err(Error::Domain(_))));
    }

    #[test]
    fn single_token_block_makes_delta_scales_no_ops() {
        let mut rng = SeedStream::new(1, 0);
        let x = rng.normal(&[1, 2, 4]);
        let bd = decompose(&x).unwrap();
        assert_eq!(bd.delta(), &Tensor::zeros(&[1, 2, 4]));
        assert_eq!(rescale(&bd, 1.0, 3.0).unwrap(), x);
    }

    fn random_qkv(seed: u64) -> JointQKV {
        let mut rng = SeedStream::new(seed, 0);
        JointQKV::new(
            rng.normal(&[10, 2, 4]),
            rng.normal(&[10, 2, 4]),
            rng.normal(&[10, 2, 4]),
            3..10,
        )
        .unwrap()
    }

    #[test]
    fn identity_config_is_bitwise_identity() {
        let qkv = random_qkv(11);
        let out = apply_dcag(qkv.clone(), &GuidanceConfig::identity(3..10)).unwrap();
        assert_eq!(out, qkv);
    }

    #[test]
    fn key_only_leaves_values_and_text_alone() {
        let qkv = random_qkv(12);
        let cfg = GuidanceConfig::new(1.1, 1.0, 3..10).unwrap();
        let out = apply_dcag(qkv.clone(), &cfg).unwrap();
        assert_eq!(out.v(), qkv.v());
        assert_eq!(out.q(), qkv.q());
        assert_eq!(out.k().slice_rows(0..3).unwrap(), qkv.k().slice_rows(0..3).unwrap());
        assert_ne!(out.k(), qkv.k());
    }

    #[test]
    fn range_mismatch_is_configuration_error() {
        let cfg = GuidanceConfig::new(1.1, 1.2, 2..10).unwrap();
        assert!(matches!(apply_dcag(random_qkv(1), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::new(0.0, 1.0, 0..2).is_err());
        assert!(GuidanceConfig::new(1.0, f64::INFINITY, 0..2).is_err());
        assert!(GuidanceConfig::new(1.0, 1.0, 2..2).is_err());
        assert!(GuidanceConfig::identity(0..4).is_identity());
        let r = GuidanceConfig::recommended(0..4);
        assert_eq!((r.delta_k, r.delta_v), (1.10, 1.15));
        assert!(!r.is_identity());
    }

    #[test]
    fn layer_selection() {
        let all = GuidanceConfig::identity(0..1);
        assert!(all.guides_layer(0) && all.guides_layer(59));
        let some = all.with_layers([2, 5]);
        assert!(some.guides_layer(5) && !some.guides_layer(3));
    }

    #[test]
    fn document_round_trip() {
        let cfg = GuidanceConfig::recommended(8..72).with_lambdas(1.0, 0.9).with_layers([0, 3]);
        let text = cfg.to_document();
        assert!(text.contains("delta_k = 1.1"), "{text}");
        assert_eq!(GuidanceConfig::from_document(&text, None).unwrap(), cfg);
    }

    #[test]
    fn document_defaults_and_errors() {
        let cfg = GuidanceConfig::from_document("delta_k = 1.1\ndelta_v = 1.15\n", Some(4..20)).unwrap();
        assert_eq!(cfg, GuidanceConfig::recommended(4..20));
        assert!(GuidanceConfig::from_document("delta_k = 1.1\ndelta_v = 1.15\n", None).is_err());
        assert!(GuidanceConfig::from_document("delta_k = 1.1\n", Some(0..1)).is_err());
        assert!(GuidanceConfig::from_document("delta_k = 1.1\ndelta_v = 1\nbogus = 2\n", Some(0..1)).is_err());
        assert!(GuidanceConfig::from_document("delta_k = -1.0\ndelta_v = 1.0\n", Some(0..1)).is_err());
    }
}
