//! Reference implementations used as test oracles. These deliberately avoid
//! the library's kernels: plain loops over flat slices.

#![allow(dead_code)]

use dcag_core::attention::{joint_attention, project_qkv, JointQKV, StreamBatch};
use dcag_core::harness::metrics::{Image, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use dcag_core::harness::stack::{rms_normalize, ToyStack};
use dcag_core::rng::SeedStream;
use dcag_core::Tensor;

/// Attention over flat `[S, H, d_h]` buffers; returns `[S, H·d_h]`.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], s: usize, h: usize, dh: usize) -> Vec<f64> {
    let idx = |t: usize, head: usize, c: usize| (t * h + head) * dh + c;
    let mut out = vec![0.0; s * h * dh];
    for head in 0..h {
        for i in 0..s {
            let mut logits = vec![0.0; s];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[idx(i, head, c)] * k[idx(j, head, c)];
                }
                *l = dot / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += weights[j] / total * v[idx(j, head, c)];
                }
                out[idx(i, head, c)] = acc;
            }
        }
    }
    out
}

/// `mean + scale·(x − mean)` over rows `range` of a flat `[S, H, d_h]` buffer,
/// with the mean taken per head and coordinate.
pub fn naive_rescale(x: &[f64], range: std::ops::Range<usize>, width: usize, scale: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    let n = range.len() as f64;
    for c in 0..width {
        let mean: f64 = range.clone().map(|t| x[t * width + c]).sum::<f64>() / n;
        for t in range.clone() {
            out[t * width + c] = mean + scale * (x[t * width + c] - mean);
        }
    }
    out
}

/// Key-only guidance written straight from the rescaling rule, then naive attention.
pub fn key_only_output(qkv: &JointQKV, delta_k: f64) -> Vec<f64> {
    let [s, h, dh] = qkv.q().shape()[..] else { unreachable!() };
    let k = naive_rescale(qkv.k().data(), qkv.image_range(), h * dh, delta_k);
    naive_attention(qkv.q().data(), &k, qkv.v().data(), s, h, dh)
}

/// SSIM with an explicit 11×11 window evaluated at every valid position.
pub fn direct_ssim(a: &Image, b: &Image) -> f64 {
    let n = SSIM_WINDOW;
    let r = (n / 2) as f64;
    let mut window = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - r, y as f64 - r);
            window[y * n + x] = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = window.iter().sum();
    window.iter_mut().for_each(|w| *w /= total);

    let (w, h) = (a.width(), a.height());
    let mut acc = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - n {
        for ox in 0..=w - n {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let g = window[y * n + x];
                    let (p, q) = (a.at(ox + x, oy + y), b.at(ox + x, oy + y));
                    mx += g * p;
                    my += g * q;
                    xx += g * p * p;
                    yy += g * q * q;
                    xy += g * p * q;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Key-only run of the toy stack, applying `x + (δ_k − 1)·(x − mean)` to the
/// image keys with a hand-written loop. Same arithmetic as the library, so the
/// result must agree bit for bit.
pub fn key_only_stack(stack: &ToyStack, input: &StreamBatch, delta_k: f64) -> Tensor {
    let range = input.image_range();
    let (mut txt, mut img) = input.clone().into_parts();
    for emb in stack.step_embeddings() {
        img = img.add_row(emb).unwrap();
        for w in stack.layers() {
            let normed = StreamBatch::new(rms_normalize(&txt).unwrap(), rms_normalize(&img).unwrap()).unwrap();
            let qkv = project_qkv(&normed, w).unwrap();
            let width = qkv.heads() * qkv.head_dim();
            let mut k = qkv.k().data().to_vec();
            if delta_k != 1.0 {
                let mut mean = vec![0.0; width];
                for t in range.clone() {
                    for c in 0..width {
                        mean[c] += k[t * width + c];
                    }
                }
                let n = range.len() as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                for t in range.clone() {
                    for c in 0..width {
                        let x = k[t * width + c];
                        k[t * width + c] = x + (delta_k - 1.0) * (x - mean[c]);
                    }
                }
            }
            let k = Tensor::new(qkv.k().shape().to_vec(), k).unwrap();
            let out = joint_attention(&qkv.with_k(k).unwrap()).unwrap();
            txt = txt.add(out.txt()).unwrap();
            img = img.add(out.img()).unwrap();
        }
    }
    img
}

/// Random joint QKV with `txt` text tokens and `img` image tokens.
pub fn random_qkv(seed: u64, txt: usize, img: usize, heads: usize, head_dim: usize) -> JointQKV {
    let mut rng = SeedStream::new(seed, 17);
    let shape = [txt + img, heads, head_dim];
    let q = rng.normal(&shape);
    let k = rng.normal(&shape);
    // Offset the values so the bias is clearly non-zero.
    let v = rng.normal(&shape).add_row(&rng.normal(&[1, heads, head_dim])).unwrap();
    JointQKV::new(q, k, v, txt..txt + img).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
