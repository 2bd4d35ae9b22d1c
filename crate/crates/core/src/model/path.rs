//! Squared-weight forward pass on an all-ones input.
//!
//! The path measures evaluate the classification branch with every weight and
//! bias replaced by its square on an all-ones input. Normalization layers are
//! bypassed (squared-weight semantics are undefined through running
//! statistics), dropout is off, and pooling is kept: with squared weights and
//! a non-negative input every intermediate activation is non-negative, so
//! ReLU never clips and max pooling is well defined.
//!
//! Everything runs in f64: products of squared weights overflow f32 quickly.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::Checkpoint;

struct Map64 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

fn conv_sq(x: &Map64, kernel: &Tensor, bias: &Tensor) -> Map64 {
    let (k, cin, cout) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    debug_assert_eq!(cin, x.c);
    let pad = (k / 2) as isize;
    let kd: Vec<f64> = kernel.data().iter().map(|&v| (v as f64) * (v as f64)).collect();
    let bd: Vec<f64> = bias.data().iter().map(|&v| (v as f64) * (v as f64)).collect();
    let (h, w) = (x.h, x.w);
    let mut out = vec![0f64; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let acc = &mut out[(y * w + xx) * cout..][..cout];
            acc.copy_from_slice(&bd);
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x.data[((iy as usize) * w + ix as usize) * cin..][..cin];
                    let base = ((ky * k + kx) * cin) * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let krow = &kd[base + ci * cout..][..cout];
                        for (a, &kw) in acc.iter_mut().zip(krow) {
                            *a += v * kw;
                        }
                    }
                }
            }
        }
    }
    Map64 { h, w, c: cout, data: out }
}

fn pool_sq(x: &Map64) -> Map64 {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; oh * ow * x.c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..x.c {
                let mut best = f64::NEG_INFINITY;
                for y in (2 * oy)..(2 * oy + 2).min(x.h) {
                    for xx in (2 * ox)..(2 * ox + 2).min(x.w) {
                        best = best.max(x.data[(y * x.w + xx) * x.c + ch]);
                    }
                }
                out[(oy * ow + ox) * x.c + ch] = best;
            }
        }
    }
    Map64 { h: oh, w: ow, c: x.c, data: out }
}

fn gap_sq(x: &Map64) -> Vec<f64> {
    let denom = (x.h * x.w) as f64;
    let mut acc = vec![0f64; x.c];
    for px in x.data.chunks_exact(x.c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= denom);
    acc
}

fn dense_sq(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), din);
    let mut out: Vec<f64> = b.data().iter().map(|&v| (v as f64) * (v as f64)).collect();
    debug_assert_eq!(out.len(), dout);
    for (i, &xv) in x.iter().enumerate() {
        let wrow = &w.data()[i * dout..][..dout];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * (wv as f64) * (wv as f64);
        }
    }
    out
}

impl Checkpoint {
    /// Logits of the squared-weight network on an all-ones input (the raw
    /// material of the path measures). Returns the two classification logits.
    pub fn forward_squared_on_ones(&self) -> Result<Tensor> {
        let logits = self.squared_ones_logits()?;
        Ok(Tensor::new(&[2], logits.iter().map(|&v| v as f32).collect())?)
    }

    pub(crate) fn squared_ones_logits(&self) -> Result<Vec<f64>> {
        let (h, w) = self.plan.input_hw;
        let mut x = Map64 { h, w, c: self.plan.input_c, data: vec![1.0; h * w * self.plan.input_c] };
        for bp in &self.plan.blocks {
            x = conv_sq(&x, &self.params[bp.conv1][0], &self.params[bp.conv1][1]);
            // batch-norm bypassed; ReLU is the identity on non-negatives
            x = conv_sq(&x, &self.params[bp.conv2][0], &self.params[bp.conv2][1]);
            if bp.pool {
                x = pool_sq(&x);
            }
        }
        let mut v = gap_sq(&x);
        for &l in &self.plan.head.fcs {
            v = dense_sq(&v, &self.params[l][0], &self.params[l][1]);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFiniteActivation { layer: "squared-ones head".into() });
        }
        Ok(v)
    }
}

/// Squared-weight all-ones forward of a bias-free dense chain. `weights[i]`
/// is the `d_i x d_{i+1}` matrix of layer `i`; the input is a vector of ones
/// of length `d_0`. Returns one value per output unit.
///
/// For such a network the result equals, per output, the sum over all
/// input-to-output paths of the product of squared weights along the path.
pub fn dense_chain_squared_ones(weights: &[Tensor]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(CoreError::InvalidSpec {
            what: "dense chain",
            detail: "at least one layer required".into(),
        });
    }
    let mut dims = Vec::with_capacity(weights.len() + 1);
    dims.push(weights[0].shape()[0]);
    for (i, w) in weights.iter().enumerate() {
        if w.rank() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "dense_chain_squared_ones",
                detail: format!("layer {i} is not a matrix: shape {:?}", w.shape()),
            });
        }
        if w.shape()[0] != *dims.last().expect("non-empty") {
            return Err(CoreError::ShapeMismatch {
                op: "dense_chain_squared_ones",
                detail: format!(
                    "layer {i} input dim {} != previous output dim {}",
                    w.shape()[0],
                    dims.last().expect("non-empty")
                ),
            });
        }
        dims.push(w.shape()[1]);
    }
    let mut v = vec![1.0f64; dims[0]];
    let zero_bias: Vec<Tensor> = weights.iter().map(|w| Tensor::zeros(&[w.shape()[1]])).collect();
    for (w, b) in weights.iter().zip(&zero_bias) {
        v = dense_sq(&v, w, b);
    }
    Ok(v)
}
