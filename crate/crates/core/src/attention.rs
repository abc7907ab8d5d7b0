//! Dual-stream multi-modal attention.
//!
//! Text and image tokens get their own Q/K/V projections, rotary position
//! embeddings are applied to Q and K, the two streams are concatenated
//! text-first and attended jointly, and the result is split back into streams.
//! Guidance hooks in between [`project_qkv`] and [`joint_attention`].

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// Rotary embedding base frequency.
pub const ROPE_BASE: f64 = 10_000.0;

/// Text and image token embeddings entering an attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    txt: Tensor,
    img: Tensor,
}

impl StreamBatch {
    pub fn new(txt: Tensor, img: Tensor) -> Result<Self> {
        if txt.rank() != 2 || img.rank() != 2 || txt.shape()[1] != img.shape()[1] {
            return Err(Error::Shape {
                op: "StreamBatch::new",
                left: txt.shape().to_vec(),
                right: img.shape().to_vec(),
            });
        }
        if txt.rows() == 0 || img.rows() == 0 {
            return Err(Error::Domain("both streams need at least one token".into()));
        }
        Ok(StreamBatch { txt, img })
    }

    pub fn txt(&self) -> &Tensor {
        &self.txt
    }

    pub fn img(&self) -> &Tensor {
        &self.img
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.txt, self.img)
    }

    pub fn txt_len(&self) -> usize {
        self.txt.rows()
    }

    pub fn img_len(&self) -> usize {
        self.img.rows()
    }

    pub fn dim(&self) -> usize {
        self.txt.shape()[1]
    }

    /// Where the image tokens sit once the streams are concatenated.
    pub fn image_range(&self) -> Range<usize> {
        self.txt_len()..self.txt_len() + self.img_len()
    }
}

/// Query/key/value projection matrices for one stream, each `D×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl StreamProjections {
    pub fn identity(dim: usize) -> Self {
        StreamProjections {
            w_q: Tensor::identity(dim),
            w_k: Tensor::identity(dim),
            w_v: Tensor::identity(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    txt: StreamProjections,
    img: StreamProjections,
    heads: usize,
}

impl LayerWeights {
    pub fn new(txt: StreamProjections, img: StreamProjections, heads: usize) -> Result<Self> {
        let dim = txt.w_q.shape().first().copied().unwrap_or(0);
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(Error::Domain(format!(
                "hidden dimension {dim} is not divisible into {heads} heads"
            )));
        }
        for w in [&txt.w_q, &txt.w_k, &txt.w_v, &img.w_q, &img.w_k, &img.w_v] {
            if w.shape() != [dim, dim] {
                return Err(Error::Shape {
                    op: "LayerWeights::new",
                    left: vec![dim, dim],
                    right: w.shape().to_vec(),
                });
            }
        }
        Ok(LayerWeights { txt, img, heads })
    }

    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        Self::new(StreamProjections::identity(dim), StreamProjections::identity(dim), heads)
    }

    pub fn txt(&self) -> &StreamProjections {
        &self.txt
    }

    pub fn img(&self) -> &StreamProjections {
        &self.img
    }

    pub fn dim(&self) -> usize {
        self.txt.w_q.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Concatenated per-head Q, K, V of shape `[S, H, d_h]`.
///
/// Text tokens occupy `[0, image_range.start)` and image tokens the rest.
/// Q and K have RoPE applied, V does not.
#[derive(Debug, Clone, PartialEq)]
pub struct JointQKV {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    image_range: Range<usize>,
}

impl JointQKV {
    /// Assembles a joint QKV. An empty text prefix (`image_range.start == 0`)
    /// is accepted so image-only attention can be studied in isolation.
    pub fn new(q: Tensor, k: Tensor, v: Tensor, image_range: Range<usize>) -> Result<Self> {
        if q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::Shape {
                op: "JointQKV::new",
                left: q.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        if q.shape()[2] % 2 != 0 {
            return Err(Error::Domain(format!("head dimension {} is odd", q.shape()[2])));
        }
        if image_range.start >= image_range.end || image_range.end != q.rows() {
            return Err(Error::Domain(format!(
                "image range {image_range:?} must be non-empty and end at sequence length {}",
                q.rows()
            )));
        }
        Ok(JointQKV { q, k, v, image_range })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn image_range(&self) -> Range<usize> {
        self.image_range.clone()
    }

    pub fn seq_len(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn with_k(self, k: Tensor) -> Result<Self> {
        JointQKV::new(self.q, k, self.v, self.image_range)
    }

    pub fn with_v(self, v: Tensor) -> Result<Self> {
        JointQKV::new(self.q, self.k, v, self.image_range)
    }
}

/// Applies rotary embeddings with [`ROPE_BASE`].
pub fn rope(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    rope_with_base(x, positions, ROPE_BASE)
}

/// Rotates each coordinate pair `(2j, 2j+1)` of every head by `pos·θ_j`,
/// `θ_j = base^(-2j/d_h)`.
pub fn rope_with_base(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let [s, h, dh] = x.shape()[..] else {
        return Err(Error::Shape {
            op: "rope",
            left: x.shape().to_vec(),
            right: vec![],
        });
    };
    if dh % 2 != 0 {
        return Err(Error::Domain(format!("rope needs an even head dimension, got {dh}")));
    }
    if positions.len() != s {
        return Err(Error::Shape {
            op: "rope",
            left: x.shape().to_vec(),
            right: vec![positions.len()],
        });
    }
    let thetas: Vec<f64> = (0..dh / 2)
        .map(|j| base.powf(-((2 * j) as f64) / dh as f64))
        .collect();
    let mut out = x.data().to_vec();
    for (t, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        for (j, &theta) in thetas.iter().enumerate() {
            let (sin, cos) = (pos as f64 * theta).sin_cos();
            for head in 0..h {
                let i = (t * h + head) * dh + 2 * j;
                let (a, b) = (out[i], out[i + 1]);
                out[i] = a * cos - b * sin;
                out[i + 1] = a * sin + b * cos;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn project_stream(x: &Tensor, p: &StreamProjections, heads: usize, offset: usize) -> Result<[Tensor; 3]> {
    let (s, d) = (x.rows(), x.shape()[1]);
    let head_shape = [s, heads, d / heads];
    let positions: Vec<usize> = (offset..offset + s).collect();
    let q = rope(&x.matmul(&p.w_q)?.reshape(&head_shape)?, &positions)?;
    let k = rope(&x.matmul(&p.w_k)?.reshape(&head_shape)?, &positions)?;
    let v = x.matmul(&p.w_v)?.reshape(&head_shape)?;
    Ok([q, k, v])
}

/// Per-stream projection, head split and RoPE, then text-first concatenation.
pub fn project_qkv(x: &StreamBatch, w: &LayerWeights) -> Result<JointQKV> {
    if x.dim() != w.dim() {
        return Err(Error::Shape {
            op: "project_qkv",
            left: x.txt.shape().to_vec(),
            right: w.txt.w_q.shape().to_vec(),
        });
    }
    let [qt, kt, vt] = project_stream(&x.txt, &w.txt, w.heads, 0)?;
    let [qi, ki, vi] = project_stream(&x.img, &w.img, w.heads, x.txt_len())?;
    JointQKV::new(
        qt.concat_rows(&qi)?,
        kt.concat_rows(&ki)?,
        vt.concat_rows(&vi)?,
        x.image_range(),
    )
}

/// Copies head `h` of a `[S, H, d_h]` tensor into an `S×d_h` matrix.
pub fn head_matrix(x: &Tensor, h: usize) -> Result<Tensor> {
    let [s, heads, dh] = x.shape()[..] else {
        return Err(Error::Shape {
            op: "head_matrix",
            left: x.shape().to_vec(),
            right: vec![],
        });
    };
    if h >= heads {
        return Err(Error::Domain(format!("head {h} out of range for {heads} heads")));
    }
    let mut data = Vec::with_capacity(s * dh);
    for t in 0..s {
        let start = (t * heads + h) * dh;
        data.extend_from_slice(&x.data()[start..start + dh]);
    }
    Tensor::new(vec![s, dh], data)
}

/// Scaled logits `q·kᵀ/√d_h` for every head, shape `[H, S, S]`.
pub fn attention_logits(qkv: &JointQKV) -> Result<Tensor> {
    let (s, heads) = (qkv.seq_len(), qkv.heads());
    let scale = 1.0 / (qkv.head_dim() as f64).sqrt();
    let mut data = Vec::with_capacity(heads * s * s);
    for h in 0..heads {
        let q = head_matrix(&qkv.q, h)?;
        let kt = head_matrix(&qkv.k, h)?.transpose()?;
        data.extend(q.matmul(&kt)?.into_data().into_iter().map(|x| x * scale));
    }
    Tensor::new(vec![heads, s, s], data)
}

/// Row-stochastic attention weights, shape `[H, S, S]`.
pub fn attention_weights(qkv: &JointQKV) -> Result<Tensor> {
    let logits = attention_logits(qkv)?;
    let s = qkv.seq_len();
    let mut data = logits.into_data();
    for row in data.chunks_mut(s) {
        softmax_in_place(row);
    }
    Tensor::new(vec![qkv.heads(), s, s], data)
}

/// Attention output for the whole concatenated sequence, shape `[S, D]`.
pub fn attend(qkv: &JointQKV) -> Result<Tensor> {
    let weights = attention_weights(qkv)?;
    let (s, heads, dh) = (qkv.seq_len(), qkv.heads(), qkv.head_dim());
    let mut out = vec![0.0; s * heads * dh];
    for h in 0..heads {
        let a = Tensor::new(vec![s, s], weights.data()[h * s * s..(h + 1) * s * s].to_vec())?;
        let o = a.matmul(&head_matrix(&qkv.v, h)?)?;
        for t in 0..s {
            let dst = (t * heads + h) * dh;
            out[dst..dst + dh].copy_from_slice(o.row(t));
        }
    }
    Tensor::new(vec![s, heads * dh], out)
}

/// Joint scaled dot-product attention, split back into text and image streams.
pub fn joint_attention(qkv: &JointQKV) -> Result<StreamBatch> {
    let out = attend(qkv)?;
    let r = qkv.image_range();
    StreamBatch::new(out.slice_rows(0..r.start)?, out.slice_rows(r)?)
}
