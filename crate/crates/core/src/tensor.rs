//! Dense row-major `f32` tensors and the layer primitives the architectures
//! need: same-padding convolution, 2x2 max pooling, stride-2 transposed
//! convolution, ReLU, global average pooling, and small dense linear algebra.
//!
//! All reductions accumulate in `f64` and store results in `f32`, so sums are
//! reproducible regardless of how callers batch the work. Operations are pure:
//! same inputs, bit-identical outputs.

use crate::error::{CoreError, Result};

/// Dense n-dimensional array of 32-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(CoreError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} elements, data has {}", shape, len, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Element at a multi-index (row-major). Panics on rank/extent misuse;
    /// intended for tests and small fixtures, not hot paths.
    pub fn at(&self, idx: &[usize]) -> f32 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            assert!(ix < self.shape[i], "index {} out of extent {}", ix, self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(CoreError::ShapeMismatch {
                op,
                detail: format!("expected rank-3 HxWxC tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }
}

/// Sum of squared entries, accumulated in f64.
pub fn frobenius_norm_sq(t: &Tensor) -> f64 {
    t.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Elementwise max(0, x).
pub fn relu(t: &Tensor) -> Tensor {
    let data = t.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor { shape: t.shape.clone(), data }
}

/// Kernel pre-converted to f64 with its geometry, shared across the images
/// of a batch so the conversion happens once.
pub(crate) struct PreparedConv {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub kd: Vec<f64>,
    pub bd: Vec<f64>,
}

pub(crate) fn prepare_conv(kernel: &Tensor, bias: &Tensor) -> PreparedConv {
    PreparedConv {
        k: kernel.shape()[0],
        cin: kernel.shape()[2],
        cout: kernel.shape()[3],
        kd: kernel.data().iter().map(|&v| v as f64).collect(),
        bd: bias.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Same-padding convolution of one image via an explicit patch matrix,
/// blocked four output pixels at a time. Accumulation order per output lane
/// matches [`conv2d`] (bias, then ky, kx, ci ascending), so results agree
/// with it exactly; out-of-bounds taps contribute an exact 0.0 product.
pub(crate) fn conv2d_fast(input: &[f32], h: usize, w: usize, pc: &PreparedConv, out: &mut [f32]) {
    let (k, cin, cout) = (pc.k, pc.cin, pc.cout);
    let pad = (k / 2) as isize;
    let cols = k * k * cin;
    debug_assert_eq!(input.len(), h * w * cin);
    debug_assert_eq!(out.len(), h * w * cout);

    const BLOCK: usize = 4;
    let mut patches = vec![0f64; BLOCK * cols];
    let mut acc = vec![0f64; BLOCK * cout];
    let npix = h * w;
    let mut p0 = 0usize;
    while p0 < npix {
        let bn = BLOCK.min(npix - p0);
        // Gather patches (zero padding included).
        for b in 0..bn {
            let p = p0 + b;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            let patch = &mut patches[b * cols..(b + 1) * cols];
            let mut r = 0;
            for ky in 0..k as isize {
                let iy = y + ky - pad;
                let row_ok = iy >= 0 && iy < h as isize;
                for kx in 0..k as isize {
                    let ix = x + kx - pad;
                    if row_ok && ix >= 0 && ix < w as isize {
                        let src = &input[((iy as usize) * w + ix as usize) * cin..][..cin];
                        for (dst, &v) in patch[r..r + cin].iter_mut().zip(src) {
                            *dst = v as f64;
                        }
                    } else {
                        patch[r..r + cin].fill(0.0);
                    }
                    r += cin;
                }
            }
        }
        for b in 0..bn {
            acc[b * cout..(b + 1) * cout].copy_from_slice(&pc.bd);
        }
        if bn == BLOCK {
            let (p0s, rest) = patches.split_at(cols);
            let (p1s, rest) = rest.split_at(cols);
            let (p2s, p3s) = rest.split_at(cols);
            let (a0, rest) = acc.split_at_mut(cout);
            let (a1, rest) = rest.split_at_mut(cout);
            let (a2, a3) = rest.split_at_mut(cout);
            for r in 0..cols {
                let (v0, v1, v2, v3) = (p0s[r], p1s[r], p2s[r], p3s[r]);
                let krow = &pc.kd[r * cout..][..cout];
                for o in 0..cout {
                    let kw = krow[o];
                    a0[o] += v0 * kw;
                    a1[o] += v1 * kw;
                    a2[o] += v2 * kw;
                    a3[o] += v3 * kw;
                }
            }
        } else {
            for b in 0..bn {
                let patch = &patches[b * cols..(b + 1) * cols];
                let a = &mut acc[b * cout..(b + 1) * cout];
                for (r, &v) in patch.iter().enumerate() {
                    let krow = &pc.kd[r * cout..][..cout];
                    for (ao, &kw) in a.iter_mut().zip(krow) {
                        *ao += v * kw;
                    }
                }
            }
        }
        for b in 0..bn {
            let dst = &mut out[(p0 + b) * cout..][..cout];
            for (d, &v) in dst.iter_mut().zip(&acc[b * cout..(b + 1) * cout]) {
                *d = v as f32;
            }
        }
        p0 += bn;
    }
}

/// Same-padding stride-1 convolution of one HxWxCin image with a
/// k x k x Cin x Cout kernel (k odd) plus a per-output-channel bias.
///
/// `out[y, x, o] = bias[o] + sum over the k x k window of input * kernel`,
/// zero outside the image bounds.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = input.dims3("conv2d")?;
    if kernel.rank() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel must be k x k x Cin x Cout, got {:?}", kernel.shape),
        });
    }
    let (k, k2, kcin, cout) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if k != k2 {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel spatial dims differ: {} vs {}", k, k2),
        });
    }
    if k % 2 == 0 {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel size {} must be odd", k),
        });
    }
    if kcin != cin {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel input channels {} != image channels {}", kcin, cin),
        });
    }
    if bias.len() != cout {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias length {} != output channels {}", bias.len(), cout),
        });
    }

    let pc = prepare_conv(kernel, bias);
    let mut out = vec![0f32; h * w * cout];
    conv2d_fast(&input.data, h, w, &pc, &mut out);
    Tensor::new(&[h, w, cout], out)
}

/// 2x2 max pooling with ceiling division on odd extents; edge windows shrink.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    Ok(maxpool2_with_idx(input)?.0)
}

/// Max pooling that also returns, per output cell, the flat input index of
/// the maximum (first maximum wins ties — fixed scan order).
pub fn maxpool2_with_idx(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (h, w, c) = input.dims3("maxpool2")?;
    if h == 0 || w == 0 {
        return Err(CoreError::ShapeMismatch {
            op: "maxpool2",
            detail: format!("spatial extents must be >= 1, got {}x{}", h, w),
        });
    }
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0f32; oh * ow * c];
    let mut idx = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0u32;
                for y in (2 * oy)..(2 * oy + 2).min(h) {
                    for x in (2 * ox)..(2 * ox + 2).min(w) {
                        let i = (y * w + x) * c + ch;
                        let v = input.data[i];
                        if v > best {
                            best = v;
                            best_i = i as u32;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    Ok((Tensor::new(&[oh, ow, c], out)?, idx))
}

/// Stride-2 transposed convolution ("up-convolution"). The output is exactly
/// 2H x 2W x Cout: every input cell scatter-adds `input * kernel` at offset
/// (2y + ky, 2x + kx); scatter targets past the doubled bounds are dropped.
pub fn upconv2(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = input.dims3("upconv2")?;
    if kernel.rank() != 4 || kernel.shape[0] != kernel.shape[1] {
        return Err(CoreError::ShapeMismatch {
            op: "upconv2",
            detail: format!("kernel must be k x k x Cin x Cout, got {:?}", kernel.shape),
        });
    }
    let (k, kcin, cout) = (kernel.shape[0], kernel.shape[2], kernel.shape[3]);
    if kcin != cin {
        return Err(CoreError::ShapeMismatch {
            op: "upconv2",
            detail: format!("kernel input channels {} != image channels {}", kcin, cin),
        });
    }
    if bias.len() != cout {
        return Err(CoreError::ShapeMismatch {
            op: "upconv2",
            detail: format!("bias length {} != output channels {}", bias.len(), cout),
        });
    }
    let (oh, ow) = (2 * h, 2 * w);
    let kd: Vec<f64> = kernel.data.iter().map(|&v| v as f64).collect();
    let mut out = vec![0f64; oh * ow * cout];
    for (o, cell) in out.chunks_exact_mut(cout).enumerate() {
        let _ = o;
        for (a, &b) in cell.iter_mut().zip(bias.data.iter()) {
            *a = b as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let px = &input.data[(y * w + x) * cin..][..cin];
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
                    let acc = &mut out[(oy * ow + ox) * cout..][..cout];
                    let krow_base = ((ky * k + kx) * cin) * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let v = v as f64;
                        let krow = &kd[krow_base + ci * cout..][..cout];
                        for (a, &kw) in acc.iter_mut().zip(krow) {
                            *a += v * kw;
                        }
                    }
                }
            }
        }
    }
    let data = out.into_iter().map(|v| v as f32).collect();
    Tensor::new(&[oh, ow, cout], data)
}

/// Per-channel mean over the spatial extent: HxWxC -> C.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.dims3("global_avg_pool")?;
    let denom = (h * w) as f64;
    let mut acc = vec![0f64; c];
    for px in input.data.chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v as f64;
        }
    }
    let data = acc.into_iter().map(|v| (v / denom) as f32).collect();
    Tensor::new(&[c], data)
}

/// Matrix product of an r x k by a k x c tensor, f64 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            detail: format!("expected rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        });
    }
    let (r, ka) = (a.shape[0], a.shape[1]);
    let (kb, c) = (b.shape[0], b.shape[1]);
    if ka != kb {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dimensions differ: {} vs {}", ka, kb),
        });
    }
    let mut out = vec![0f64; r * c];
    for i in 0..r {
        let arow = &a.data[i * ka..][..ka];
        let orow = &mut out[i * c..][..c];
        for (kk, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b.data[kk * c..][..c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    let data = out.into_iter().map(|v| v as f32).collect();
    Tensor::new(&[r, c], data)
}

/// Matrix-vector product of an r x c tensor with a length-c vector.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 || v.rank() != 1 {
        return Err(CoreError::ShapeMismatch {
            op: "matvec",
            detail: format!("expected matrix and vector, got {:?} and {:?}", m.shape, v.shape),
        });
    }
    let (r, c) = (m.shape[0], m.shape[1]);
    if v.len() != c {
        return Err(CoreError::ShapeMismatch {
            op: "matvec",
            detail: format!("vector length {} != matrix columns {}", v.len(), c),
        });
    }
    let mut out = vec![0f64; r];
    for i in 0..r {
        let row = &m.data[i * c..][..c];
        out[i] = row.iter().zip(v.data.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
    }
    let data = out.into_iter().map(|x| x as f32).collect();
    Tensor::new(&[r], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(&[h, w, c], data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let img = t3(3, 3, 1, (1..=9).map(|v| v as f32).collect());
        let kernel = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::new(&[1], vec![0.0]).unwrap();
        let out = conv2d(&img, &kernel, &bias).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn conv_zero_kernel_zero_output() {
        let img = t3(4, 5, 2, vec![1.5; 40]);
        let kernel = Tensor::zeros(&[3, 3, 2, 3]);
        let bias = Tensor::zeros(&[3]);
        let out = conv2d(&img, &kernel, &bias).unwrap();
        assert_eq!(out.shape(), &[4, 5, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_kernel_window_counts() {
        // 3x3 all-ones kernel on a 3x3 constant-1 image: each output counts the
        // in-bounds window cells — 9 at the center, 6 on edges, 4 at corners.
        let img = t3(3, 3, 1, vec![1.0; 9]);
        let kernel = Tensor::new(&[3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&img, &kernel, &bias).unwrap();
        assert_eq!(out.at(&[1, 1, 0]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        assert_eq!(out.at(&[0, 2, 0]), 4.0);
        assert_eq!(out.at(&[2, 0, 0]), 4.0);
        assert_eq!(out.at(&[2, 2, 0]), 4.0);
        assert_eq!(out.at(&[0, 1, 0]), 6.0);
        assert_eq!(out.at(&[1, 0, 0]), 6.0);
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let img = t3(3, 3, 2, vec![0.0; 18]);
        let kernel = Tensor::zeros(&[3, 3, 1, 4]);
        let bias = Tensor::zeros(&[4]);
        let err = conv2d(&img, &kernel, &bias).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input channels"), "got: {msg}");

        let kernel_even = Tensor::zeros(&[2, 2, 2, 4]);
        let err = conv2d(&img, &kernel_even, &bias).unwrap_err();
        assert!(err.to_string().contains("odd"));

        let bad_bias = Tensor::zeros(&[3]);
        let kernel_ok = Tensor::zeros(&[3, 3, 2, 4]);
        let err = conv2d(&img, &kernel_ok, &bad_bias).unwrap_err();
        assert!(err.to_string().contains("bias"));
    }

    #[test]
    fn maxpool_constant_halves() {
        let img = t3(4, 6, 2, vec![0.25; 48]);
        let out = maxpool2(&img).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_single_window() {
        let img = t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let out = maxpool2(&img).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn maxpool_matches_bruteforce_scan() {
        // Distinct values so the argmax is unambiguous.
        let data: Vec<f32> = (0..16).map(|v| ((v * 7) % 16) as f32).collect();
        let img = t3(4, 4, 1, data.clone());
        let out = maxpool2(&img).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut best = f32::NEG_INFINITY;
                for y in 2 * oy..2 * oy + 2 {
                    for x in 2 * ox..2 * ox + 2 {
                        best = best.max(data[y * 4 + x]);
                    }
                }
                assert_eq!(out.at(&[oy, ox, 0]), best);
            }
        }
    }

    #[test]
    fn maxpool_odd_extent_ceils() {
        let img = t3(3, 5, 1, (0..15).map(|v| v as f32).collect());
        let out = maxpool2(&img).unwrap();
        assert_eq!(out.shape(), &[2, 3, 1]);
        // Bottom-right window is the single cell (2,4).
        assert_eq!(out.at(&[1, 2, 0]), 14.0);
    }

    #[test]
    fn upconv_zero_kernel_zero_output() {
        let img = t3(3, 3, 2, vec![1.0; 18]);
        let kernel = Tensor::zeros(&[2, 2, 2, 1]);
        let bias = Tensor::zeros(&[1]);
        let out = upconv2(&img, &kernel, &bias).unwrap();
        assert_eq!(out.shape(), &[6, 6, 1]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upconv_one_by_one_scatter() {
        let img = t3(1, 1, 1, vec![2.5]);
        let kernel = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = upconv2(&img, &kernel, &bias).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upconv_matches_scatter_add_oracle() {
        let img = t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let kernel = Tensor::new(&[2, 2, 1, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let bias = Tensor::new(&[1], vec![0.125]).unwrap();
        let out = upconv2(&img, &kernel, &bias).unwrap();

        // Independent scatter-add enumeration.
        let mut oracle = vec![0.125f64; 16];
        for y in 0..2 {
            for x in 0..2 {
                let v = img.at(&[y, x, 0]) as f64;
                for ky in 0..2 {
                    for kx in 0..2 {
                        let (oy, ox) = (2 * y + ky, 2 * x + kx);
                        oracle[oy * 4 + ox] += v * kernel.at(&[ky, kx, 0, 0]) as f64;
                    }
                }
            }
        }
        for (got, want) in out.data().iter().zip(oracle) {
            assert!((*got as f64 - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm_sq(&Tensor::zeros(&[3, 4])), 0.0);
        let mut eye = Tensor::zeros(&[5, 5]);
        for i in 0..5 {
            eye.data_mut()[i * 5 + i] = 1.0;
        }
        assert_eq!(frobenius_norm_sq(&eye), 5.0);
        let v = Tensor::new(&[3], vec![1.0, 2.0, 2.0]).unwrap();
        assert_eq!(frobenius_norm_sq(&v), 9.0);
    }

    #[test]
    fn gap_and_relu() {
        let img = t3(2, 2, 2, vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0, 7.0, -8.0]);
        let g = global_avg_pool(&img).unwrap();
        assert_eq!(g.data(), &[4.0, -5.0]);
        let r = relu(&img);
        assert_eq!(r.data(), &[1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn matmul_matvec_hand_cases() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);

        let v = Tensor::new(&[3], vec![1.0, 1.0, 2.0]).unwrap();
        let mv = matvec(&a, &v).unwrap();
        assert_eq!(mv.data(), &[9.0, 21.0]);

        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn tensor_new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
