use std::ops::Range;

use crate::attention::{joint_attention, project_qkv, JointQKV, LayerWeights, StreamBatch, StreamProjections};
use crate::error::{Error, Result};
use crate::guidance::{apply_dcag, GuidanceConfig};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

const STEP_STREAM: u64 = 1 << 32;
const INPUT_STREAM: u64 = 1 << 33;
const RMS_EPS: f64 = 1e-6;

/// Dimensions of a toy stack and of its canonical input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackShape {
    pub layers: usize,
    pub steps: usize,
    pub txt_tokens: usize,
    pub img_tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for StackShape {
    fn default() -> Self {
        StackShape {
            layers: 8,
            steps: 6,
            txt_tokens: 8,
            img_tokens: 64,
            dim: 64,
            heads: 4,
        }
    }
}

impl StackShape {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.txt_tokens == 0 || self.img_tokens == 0 {
            return Err(Error::Config("both streams need at least one token".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.dim / self.heads
            )));
        }
        Ok(())
    }

    pub fn image_range(&self) -> Range<usize> {
        self.txt_tokens..self.txt_tokens + self.img_tokens
    }
}

/// A seeded stack of dual-stream attention layers run over several steps.
///
/// Weights are Gaussian with standard deviation `1/√D`; layer `l` draws from
/// ChaCha stream `l`, step embeddings and the canonical input from their own
/// streams. Each layer sees an RMS-normalized copy of its input.
#[derive(Debug, Clone)]
pub struct ToyStack {
    shape: StackShape,
    seed: u64,
    residual: bool,
    layers: Vec<LayerWeights>,
    step_embeddings: Vec<Tensor>,
}

impl ToyStack {
    pub fn new(shape: StackShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..shape.layers)
            .map(|l| {
                let mut rng = SeedStream::new(seed, l as u64);
                let mut proj = || StreamProjections {
                    w_q: rng.normal_scaled(&[d, d], std),
                    w_k: rng.normal_scaled(&[d, d], std),
                    w_v: rng.normal_scaled(&[d, d], std),
                };
                let txt = proj();
                let img = proj();
                LayerWeights::new(txt, img, shape.heads)
            })
            .collect::<Result<Vec<_>>>()?;
        let step_embeddings = (0..shape.steps)
            .map(|t| SeedStream::new(seed, STEP_STREAM + t as u64).normal(&[1, d]))
            .collect();
        Ok(ToyStack {
            shape,
            seed,
            residual: true,
            layers,
            step_embeddings,
        })
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    pub fn shape(&self) -> &StackShape {
        &self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn step_embeddings(&self) -> &[Tensor] {
        &self.step_embeddings
    }

    /// The seeded standard-normal input of the stack's shape.
    pub fn random_input(&self) -> StreamBatch {
        random_batch(self.seed, self.shape.txt_tokens, self.shape.img_tokens, self.shape.dim)
    }
}

/// Standard-normal text and image tokens drawn from the input stream of `seed`.
pub fn random_batch(seed: u64, txt_tokens: usize, img_tokens: usize, dim: usize) -> StreamBatch {
    let mut rng = SeedStream::new(seed, INPUT_STREAM);
    let txt = rng.normal(&[txt_tokens, dim]);
    let img = rng.normal(&[img_tokens, dim]);
    StreamBatch::new(txt, img).expect("random batch has consistent shapes")
}

/// Scales every token to unit root-mean-square.
pub fn rms_normalize(x: &Tensor) -> Result<Tensor> {
    let w = x.row_len();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(w.max(1)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / w as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Runs every step and layer; returns the final image-token block.
pub fn run_stack(stack: &ToyStack, input: &StreamBatch, cfg: &GuidanceConfig) -> Result<Tensor> {
    run_stack_observed(stack, input, cfg, |_, _, _| {})
}

/// Like [`run_stack`], calling `observe(layer, step, qkv)` with each layer's
/// projected QKV before guidance is applied.
pub fn run_stack_observed<F>(stack: &ToyStack, input: &StreamBatch, cfg: &GuidanceConfig, mut observe: F) -> Result<Tensor>
where
    F: FnMut(usize, usize, &JointQKV),
{
    if input.dim() != stack.shape.dim {
        return Err(Error::Shape {
            op: "run_stack",
            left: input.img().shape().to_vec(),
            right: vec![stack.shape.dim],
        });
    }
    let identity = GuidanceConfig::identity(cfg.token_range.clone());
    let (mut txt, mut img) = input.clone().into_parts();
    for (t, emb) in stack.step_embeddings.iter().enumerate() {
        img = img.add_row(emb)?;
        for (l, w) in stack.layers.iter().enumerate() {
            let normed = StreamBatch::new(rms_normalize(&txt)?, rms_normalize(&img)?)?;
            let qkv = project_qkv(&normed, w)?;
            observe(l, t, &qkv);
            let layer_cfg = if cfg.guides_layer(l) { cfg } else { &identity };
            let out = joint_attention(&apply_dcag(qkv, layer_cfg)?)?;
            let (ot, oi) = out.into_parts();
            if stack.residual {
                txt = txt.add(&ot)?;
                img = img.add(&oi)?;
            } else {
                txt = ot;
                img = oi;
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StackShape {
        StackShape {
            layers: 3,
            steps: 2,
            txt_tokens: 3,
            img_tokens: 9,
            dim: 16,
            heads: 2,
        }
    }

    #[test]
    fn identity_config_matches_unguided_path() {
        let stack = ToyStack::new(small(), 7).unwrap();
        let x = stack.random_input();
        let guided = run_stack(&stack, &x, &GuidanceConfig::identity(x.image_range())).unwrap();

        let (mut txt, mut img) = x.clone().into_parts();
        for emb in stack.step_embeddings() {
            img = img.add_row(emb).unwrap();
            for w in stack.layers() {
                let n = StreamBatch::new(rms_normalize(&txt).unwrap(), rms_normalize(&img).unwrap()).unwrap();
                let out = joint_attention(&project_qkv(&n, w).unwrap()).unwrap();
                txt = txt.add(out.txt()).unwrap();
                img = img.add(out.img()).unwrap();
            }
        }
        assert_eq!(guided, img);
    }

    #[test]
    fn empty_stack_only_adds_step_embeddings() {
        let shape = StackShape { layers: 0, ..small() };
        let stack = ToyStack::new(shape, 3).unwrap();
        let x = stack.random_input();
        let out = run_stack(&stack, &x, &GuidanceConfig::recommended(x.image_range())).unwrap();
        let mut expect = x.img().clone();
        for e in stack.step_embeddings() {
            expect = expect.add_row(e).unwrap();
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = ToyStack::new(small(), 42).unwrap();
        let b = ToyStack::new(small(), 42).unwrap();
        let x = a.random_input();
        let cfg = GuidanceConfig::recommended(x.image_range());
        assert_eq!(run_stack(&a, &x, &cfg).unwrap(), run_stack(&b, &b.random_input(), &cfg).unwrap());
        let c = ToyStack::new(small(), 43).unwrap();
        assert_ne!(a.layers()[0], c.layers()[0]);
    }

    #[test]
    fn unguided_layers_are_skipped() {
        let stack = ToyStack::new(small(), 5).unwrap();
        let x = stack.random_input();
        let r = x.image_range();
        let base = run_stack(&stack, &x, &GuidanceConfig::identity(r.clone())).unwrap();
        let off = GuidanceConfig::recommended(r.clone()).with_layers([99]);
        assert_eq!(run_stack(&stack, &x, &off).unwrap(), base);
        let on = GuidanceConfig::recommended(r).with_layers([1]);
        assert_ne!(run_stack(&stack, &x, &on).unwrap(), base);
    }

    #[test]
    fn observer_sees_every_cell() {
        let stack = ToyStack::new(small(), 5).unwrap();
        let x = stack.random_input();
        let mut seen = Vec::new();
        run_stack_observed(&stack, &x, &GuidanceConfig::identity(x.image_range()), |l, t, q| {
            assert_eq!(q.image_range(), 3..12);
            seen.push((l, t));
        })
        .unwrap();
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[0], (0, 0));
        assert_eq!(seen[5], (2, 1));
    }

    #[test]
    fn shape_validation() {
        assert!(StackShape { steps: 0, ..small() }.validate().is_err());
        assert!(StackShape { heads: 3, ..small() }.validate().is_err());
        assert!(StackShape { dim: 6, heads: 2, ..small() }.validate().is_err());
        assert!(StackShape { img_tokens: 0, ..small() }.validate().is_err());
        assert!(StackShape::default().validate().is_ok());
    }
}
