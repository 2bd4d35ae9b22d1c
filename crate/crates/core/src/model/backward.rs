//! Reverse-mode gradients for the layer set of the architectures: conv,
//! up-conv, dense, batch-norm (batch statistics), ReLU, max-pool, global
//! average pooling, dropout, channel concat, and the sigmoid mask head.
//!
//! Gradients accumulate in f64 across the batch in a fixed order and are
//! stored as f32, mirroring the forward kernels.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

use super::forward::{BnCache, ForwardCache};
use super::Checkpoint;

/// Per-layer gradients, aligned tensor-for-tensor with `Checkpoint::params`.
#[derive(Debug, Clone)]
pub struct Grads {
    pub per_layer: Vec<Vec<Tensor>>,
}

impl Grads {
    pub fn zeros_like(ckpt: &Checkpoint) -> Self {
        let per_layer = ckpt
            .layers()
            .iter()
            .map(|l| l.kind.param_shapes().iter().map(|s| Tensor::zeros(s)).collect())
            .collect();
        Grads { per_layer }
    }

    pub fn all_finite(&self) -> bool {
        self.per_layer.iter().all(|ts| ts.iter().all(|t| t.all_finite()))
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

/// dx, dkernel, dbias of a same-padding stride-1 convolution over a batch.
fn conv_backward(x_in: &Tensor, kernel: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, h, w, cin) = dims4(x_in);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let pad = (k / 2) as isize;
    let kd: Vec<f64> = kernel.data().iter().map(|&v| v as f64).collect();
    let mut dkd = vec![0f64; kd.len()];
    let mut dbd = vec![0f64; cout];
    let mut dx = Tensor::zeros(x_in.shape());
    let isz = h * w * cin;
    let osz = h * w * cout;

    for i in 0..n {
        let xin = &x_in.data()[i * isz..(i + 1) * isz];
        let dob = &dout.data()[i * osz..(i + 1) * osz];
        let mut dxi = vec![0f64; isz];
        for y in 0..h {
            for x in 0..w {
                let douts = &dob[(y * w + x) * cout..][..cout];
                for (o, &d) in douts.iter().enumerate() {
                    dbd[o] += d as f64;
                }
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let in_off = ((iy as usize) * w + ix as usize) * cin;
                        let base = ((ky * k + kx) * cin) * cout;
                        for ci in 0..cin {
                            let xv = xin[in_off + ci] as f64;
                            let krow = &kd[base + ci * cout..][..cout];
                            let dkrow = &mut dkd[base + ci * cout..][..cout];
                            let mut s = 0f64;
                            for (o, &d) in douts.iter().enumerate() {
                                let dv = d as f64;
                                dkrow[o] += xv * dv;
                                s += krow[o] * dv;
                            }
                            dxi[in_off + ci] += s;
                        }
                    }
                }
            }
        }
        for (dst, &v) in dx.data_mut()[i * isz..(i + 1) * isz].iter_mut().zip(&dxi) {
            *dst = v as f32;
        }
    }
    let dk = Tensor::new(kernel.shape(), dkd.into_iter().map(|v| v as f32).collect()).expect("shape");
    let db = Tensor::new(&[cout], dbd.into_iter().map(|v| v as f32).collect()).expect("shape");
    (dx, dk, db)
}

/// dx, dkernel, dbias of the stride-2 transposed convolution.
fn upconv_backward(x_in: &Tensor, kernel: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, h, w, cin) = dims4(x_in);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let kd: Vec<f64> = kernel.data().iter().map(|&v| v as f64).collect();
    let mut dkd = vec![0f64; kd.len()];
    let mut dbd = vec![0f64; cout];
    let mut dx = Tensor::zeros(x_in.shape());
    let isz = h * w * cin;
    let osz = oh * ow * cout;

    for i in 0..n {
        let xin = &x_in.data()[i * isz..(i + 1) * isz];
        let dob = &dout.data()[i * osz..(i + 1) * osz];
        for (p, cell) in dob.chunks_exact(cout).enumerate() {
            let _ = p;
            for (o, &d) in cell.iter().enumerate() {
                dbd[o] += d as f64;
            }
        }
        let mut dxi = vec![0f64; isz];
        for y in 0..h {
            for x in 0..w {
                let in_off = (y * w + x) * cin;
                for ky in 0..k {
                    let oy = 2 * y + ky;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = 2 * x + kx;
                        if ox >= ow {
                            continue;
                        }
                        let douts = &dob[(oy * ow + ox) * cout..][..cout];
                        let base = ((ky * k + kx) * cin) * cout;
                        for ci in 0..cin {
                            let xv = xin[in_off + ci] as f64;
                            let krow = &kd[base + ci * cout..][..cout];
                            let dkrow = &mut dkd[base + ci * cout..][..cout];
                            let mut s = 0f64;
                            for (o, &d) in douts.iter().enumerate() {
                                let dv = d as f64;
                                dkrow[o] += xv * dv;
                                s += krow[o] * dv;
                            }
                            dxi[in_off + ci] += s;
                        }
                    }
                }
            }
        }
        for (dst, &v) in dx.data_mut()[i * isz..(i + 1) * isz].iter_mut().zip(&dxi) {
            *dst = v as f32;
        }
    }
    let dk = Tensor::new(kernel.shape(), dkd.into_iter().map(|v| v as f32).collect()).expect("shape");
    let db = Tensor::new(&[cout], dbd.into_iter().map(|v| v as f32).collect()).expect("shape");
    (dx, dk, db)
}

/// dx, dw, db of `z = x W + b` over a batch of rows.
fn dense_backward(x_in: &Tensor, w: &Tensor, dz: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x_in.shape()[0], x_in.shape()[1]);
    let dout = w.shape()[1];
    let mut dwd = vec![0f64; din * dout];
    let mut dbd = vec![0f64; dout];
    let mut dxd = vec![0f64; n * din];
    for b in 0..n {
        let xrow = &x_in.data()[b * din..][..din];
        let drow = &dz.data()[b * dout..][..dout];
        for (o, &d) in drow.iter().enumerate() {
            dbd[o] += d as f64;
        }
        for (i, &xv) in xrow.iter().enumerate() {
            let xv = xv as f64;
            let wrow = &w.data()[i * dout..][..dout];
            let dwrow = &mut dwd[i * dout..][..dout];
            let mut s = 0f64;
            for (o, &d) in drow.iter().enumerate() {
                let dv = d as f64;
                dwrow[o] += xv * dv;
                s += wrow[o] as f64 * dv;
            }
            dxd[b * din + i] = s;
        }
    }
    let dx = Tensor::new(x_in.shape(), dxd.into_iter().map(|v| v as f32).collect()).expect("shape");
    let dw = Tensor::new(w.shape(), dwd.into_iter().map(|v| v as f32).collect()).expect("shape");
    let db = Tensor::new(&[dout], dbd.into_iter().map(|v| v as f32).collect()).expect("shape");
    (dx, dw, db)
}

/// dx, dgamma, dbeta of batch-statistics normalization. `z` is the pre-norm
/// input cached by the forward pass.
fn bn_backward(z: &Tensor, gamma: &Tensor, cache: &BnCache, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = *z.shape().last().expect("rank >= 1");
    let m = (z.len() / c) as f64;
    let mut sum_dy = vec![0f64; c];
    let mut sum_dy_xhat = vec![0f64; c];
    for (zpx, dpx) in z.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (zpx[ch] as f64 - cache.mean[ch]) * cache.istd[ch];
            let d = dpx[ch] as f64;
            sum_dy[ch] += d;
            sum_dy_xhat[ch] += d * xhat;
        }
    }
    let mut dx = Tensor::zeros(z.shape());
    {
        let dxd = dx.data_mut();
        for (p, (zpx, dpx)) in z.data().chunks_exact(c).zip(dy.data().chunks_exact(c)).enumerate() {
            for ch in 0..c {
                let xhat = (zpx[ch] as f64 - cache.mean[ch]) * cache.istd[ch];
                let g = gamma.data()[ch] as f64 * cache.istd[ch];
                let v = g * (dpx[ch] as f64 - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m);
                dxd[p * c + ch] = v as f32;
            }
        }
    }
    let dgamma = Tensor::new(&[c], sum_dy_xhat.iter().map(|&v| v as f32).collect()).expect("shape");
    let dbeta = Tensor::new(&[c], sum_dy.iter().map(|&v| v as f32).collect()).expect("shape");
    (dx, dgamma, dbeta)
}

/// Gate `g` by the sign of the pre-activation (ReLU backward), in place.
fn relu_gate(g: &mut Tensor, pre: &Tensor) {
    for (gv, &zv) in g.data_mut().iter_mut().zip(pre.data()) {
        if zv <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Scatter pooled gradients back to the argmax positions.
fn unpool(dout: &Tensor, idx: &[u32], in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in idx.iter().zip(dout.data()) {
        dxd[i as usize] += g;
    }
    dx
}

/// Broadcast the GAP gradient back over the spatial extent.
fn gap_backward(dg: &Tensor, in_shape: &[usize]) -> Tensor {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let denom = (h * w) as f64;
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for i in 0..n {
        let grow = &dg.data()[i * c..][..c];
        for p in 0..h * w {
            let off = (i * h * w + p) * c;
            for ch in 0..c {
                dxd[off + ch] = (grow[ch] as f64 / denom) as f32;
            }
        }
    }
    dx
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Reverse-mode gradients of the whole network given the loss gradients at
/// the two output heads: `dlogits` (N x 2) and, for multi-task models,
/// `dmask_probs` (N x H x W) taken w.r.t. the sigmoid mask probabilities.
pub fn backward(
    ckpt: &Checkpoint,
    cache: &ForwardCache,
    dlogits: &Tensor,
    dmask_probs: Option<&Tensor>,
) -> Result<Grads> {
    if dmask_probs.is_some() && cache.dec.is_none() {
        return Err(CoreError::ShapeMismatch {
            op: "backward",
            detail: "mask gradient supplied but the model has no decoder".into(),
        });
    }
    let mut grads = Grads::zeros_like(ckpt);

    // Head, last FC layer first.
    let n_fc = ckpt.plan.head.fcs.len();
    let mut g = dlogits.clone();
    for (i, &l) in ckpt.plan.head.fcs.iter().enumerate().rev() {
        let fc = &cache.fc[i];
        if i + 1 < n_fc {
            if let Some(mask) = &fc.dropout {
                for (gv, &mv) in g.data_mut().iter_mut().zip(mask) {
                    *gv *= mv;
                }
            }
            relu_gate(&mut g, &fc.z);
        }
        let (dx, dw, db) = dense_backward(&fc.x_in, &ckpt.params[l][0], &g);
        grads.per_layer[l][0] = dw;
        grads.per_layer[l][1] = db;
        g = dx;
    }

    // GAP back to the encoder output.
    let last_block = cache.blocks.last().expect("at least one block");
    let mut dfeat = gap_backward(&g, last_block.out.shape());

    // Decoder contributions: gradients flow into the encoder output and into
    // each skip-source activation.
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; cache.blocks.len()];
    if let (Some(dp), Some(dc)) = (&ckpt.plan.decoder, &cache.dec) {
        if let Some(dprobs) = dmask_probs {
            // Through the sigmoid: dz = dp * s * (1 - s).
            let mut dz = Tensor::zeros(dc.out_z.shape());
            for ((d, &p), &gp) in dz.data_mut().iter_mut().zip(dc.masks.data()).zip(dprobs.data()) {
                let s = p as f64;
                *d = (gp as f64 * s * (1.0 - s)) as f32;
            }
            let last_in = dc
                .stages
                .last()
                .map(|s| s.a2.clone())
                .unwrap_or_else(|| last_block.out.clone());
            let (mut dg, dk, db) = conv_backward(&last_in, &ckpt.params[dp.out_conv][0], &dz);
            grads.per_layer[dp.out_conv][0] = dk;
            grads.per_layer[dp.out_conv][1] = db;

            for (sp, sc) in dp.stages.iter().zip(&dc.stages).rev() {
                relu_gate(&mut dg, &sc.a2_pre);
                if let Some(l) = sp.bn2 {
                    let bn = sc.bn2.as_ref().expect("bn cache present");
                    let (dx, dgm, dbt) = bn_backward(&sc.z2, &ckpt.params[l][0], bn, &dg);
                    grads.per_layer[l][0] = dgm;
                    grads.per_layer[l][1] = dbt;
                    dg = dx;
                }
                let (dx, dk, db) = conv_backward(&sc.a1, &ckpt.params[sp.conv2][0], &dg);
                grads.per_layer[sp.conv2][0] = dk;
                grads.per_layer[sp.conv2][1] = db;
                dg = dx;

                relu_gate(&mut dg, &sc.a1_pre);
                if let Some(l) = sp.bn1 {
                    let bn = sc.bn1.as_ref().expect("bn cache present");
                    let (dx, dgm, dbt) = bn_backward(&sc.z1, &ckpt.params[l][0], bn, &dg);
                    grads.per_layer[l][0] = dgm;
                    grads.per_layer[l][1] = dbt;
                    dg = dx;
                }
                let (dconcat, dk, db) = conv_backward(&sc.concat, &ckpt.params[sp.conv1][0], &dg);
                grads.per_layer[sp.conv1][0] = dk;
                grads.per_layer[sp.conv1][1] = db;

                // Split concat gradient into the up-conv part and the skip part.
                let (n, h, w, c_up) = dims4(&sc.up_out);
                let c_cat = dconcat.shape()[3];
                let c_skip = c_cat - c_up;
                let mut dup = Tensor::zeros(sc.up_out.shape());
                let mut dskip = Tensor::zeros(&[n, h, w, c_skip]);
                for p in 0..n * h * w {
                    dup.data_mut()[p * c_up..(p + 1) * c_up]
                        .copy_from_slice(&dconcat.data()[p * c_cat..p * c_cat + c_up]);
                    dskip.data_mut()[p * c_skip..(p + 1) * c_skip]
                        .copy_from_slice(&dconcat.data()[p * c_cat + c_up..(p + 1) * c_cat]);
                }
                match &mut skip_grads[sp.skip_block] {
                    Some(t) => add_into(t, &dskip),
                    slot => *slot = Some(dskip),
                }

                let (dx, dk, db) = upconv_backward(&sc.x_in, &ckpt.params[sp.up][0], &dup);
                grads.per_layer[sp.up][0] = dk;
                grads.per_layer[sp.up][1] = db;
                dg = dx;
            }
            add_into(&mut dfeat, &dg);
        }
    }

    // Encoder blocks, last first.
    let mut g = dfeat;
    for (b, (bp, bc)) in ckpt.plan.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let mut da2 = if let Some(idx) = &bc.pool_idx {
            unpool(&g, idx, bc.a2.shape())
        } else {
            g
        };
        if let Some(sg) = &skip_grads[b] {
            add_into(&mut da2, sg);
        }
        relu_gate(&mut da2, &bc.a2_pre);
        let mut dz2 = da2;
        if let Some(l) = bp.bn2 {
            let bn = bc.bn2.as_ref().expect("bn cache present");
            let (dx, dgm, dbt) = bn_backward(&bc.z2, &ckpt.params[l][0], bn, &dz2);
            grads.per_layer[l][0] = dgm;
            grads.per_layer[l][1] = dbt;
            dz2 = dx;
        }
        let (mut da1, dk2, db2) = conv_backward(&bc.a1, &ckpt.params[bp.conv2][0], &dz2);
        grads.per_layer[bp.conv2][0] = dk2;
        grads.per_layer[bp.conv2][1] = db2;

        relu_gate(&mut da1, &bc.a1_pre);
        let mut dz1 = da1;
        if let Some(l) = bp.bn1 {
            let bn = bc.bn1.as_ref().expect("bn cache present");
            let (dx, dgm, dbt) = bn_backward(&bc.z1, &ckpt.params[l][0], bn, &dz1);
            grads.per_layer[l][0] = dgm;
            grads.per_layer[l][1] = dbt;
            dz1 = dx;
        }
        let (dx, dk1, db1) = conv_backward(&bc.x_in, &ckpt.params[bp.conv1][0], &dz1);
        grads.per_layer[bp.conv1][0] = dk1;
        grads.per_layer[bp.conv1][1] = db1;
        g = dx;
    }

    Ok(grads)
}
