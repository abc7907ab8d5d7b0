//! Runtime checks of the guidance identities on a concrete layer and input.

use crate::attention::{attend, attention_logits, attention_weights, joint_attention, project_qkv, LayerWeights, StreamBatch};
use crate::error::Result;
use crate::guidance::{apply_dcag, decompose, guided_attention, rescale, GuidanceConfig};
use crate::tensor::Tensor;

/// Tolerance for the affine-in-δ_v and logit-scaling identities, relative to
/// the output or logit scale.
pub const RELATIVE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckOutcome { name, passed, detail }
    }
}

/// Identity, value affinity, key logit scaling and channel orthogonality.
pub fn run_checks(x: &StreamBatch, w: &LayerWeights, cfg: &GuidanceConfig) -> Result<Vec<CheckOutcome>> {
    let range = cfg.token_range.clone();
    let qkv = project_qkv(x, w)?;
    let mut out = Vec::new();

    let guided = guided_attention(x, w, &GuidanceConfig::identity(range.clone()))?;
    let plain = joint_attention(&qkv)?;
    out.push(CheckOutcome::new(
        "identity",
        guided == plain,
        "identity scales reproduce the unguided output bit for bit".into(),
    ));

    let block = qkv.v().slice_rows(range.clone())?;
    let collapsed = rescale(&decompose(&block)?, 1.0, 0.0)?;
    let o0 = attend(&qkv.clone().with_v(qkv.v().with_rows_replaced(range.clone(), &collapsed)?)?)?;
    let o1 = attend(&qkv)?;
    let scale = o0.max_abs().max(o1.max_abs()).max(1.0);
    let mut worst: f64 = 0.0;
    for dv in [0.5, 1.15, 2.0, 3.0] {
        let c = GuidanceConfig::new(1.0, dv, range.clone())?;
        let got = attend(&apply_dcag(qkv.clone(), &c)?)?;
        let want = o0.add(&o1.sub(&o0)?.scale(dv)?)?;
        worst = worst.max(got.max_abs_diff(&want)? / scale);
    }
    out.push(CheckOutcome::new(
        "value affinity",
        worst <= RELATIVE_TOLERANCE,
        format!("max relative deviation from affine in delta_v: {worst:.3e}"),
    ));

    let key_cfg = GuidanceConfig::new(cfg.delta_k, 1.0, range.clone())?;
    let pre = attention_logits(&qkv)?;
    let post = attention_logits(&apply_dcag(qkv.clone(), &key_cfg)?)?;
    let worst = logit_scaling_error(&pre, &post, range.clone(), cfg.delta_k);
    out.push(CheckOutcome::new(
        "logit scaling",
        worst <= RELATIVE_TOLERANCE,
        format!("max relative logit-difference error at delta_k={}: {worst:.3e}", cfg.delta_k),
    ));

    let full = apply_dcag(qkv.clone(), cfg)?;
    let no_v = apply_dcag(qkv.clone(), &GuidanceConfig { delta_v: 1.0, lambda_v: 1.0, ..cfg.clone() })?;
    let no_k = apply_dcag(qkv, &GuidanceConfig { delta_k: 1.0, lambda_k: 1.0, ..cfg.clone() })?;
    let weights_fixed = attention_weights(&full)? == attention_weights(&no_v)?;
    let values_fixed = full.v() == no_k.v();
    out.push(CheckOutcome::new(
        "orthogonality",
        weights_fixed && values_fixed,
        format!("weights independent of value scales: {weights_fixed}; values independent of key scales: {values_fixed}"),
    ));
    Ok(out)
}

/// Largest `|Δpost − δ·Δpre|` over image-token pairs, relative to each row's
/// largest pre-guidance logit.
pub fn logit_scaling_error(pre: &Tensor, post: &Tensor, range: std::ops::Range<usize>, delta_k: f64) -> f64 {
    let s = pre.shape()[2];
    let mut worst: f64 = 0.0;
    for (p, g) in pre.data().chunks(s).zip(post.data().chunks(s)) {
        let scale = p.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        for i in range.clone() {
            for j in range.clone() {
                worst = worst.max(((g[i] - g[j]) - delta_k * (p[i] - p[j])).abs() / scale);
            }
        }
    }
    worst
}
