//! Forward-pass validation: an independent straight-line oracle, homogeneity,
//! and train/eval agreement where they must coincide.

use genmeter_core::model::{build, Mode, NetworkSpec};
use genmeter_core::rng::SeededRng;
use genmeter_core::tensor::Tensor;

/// Straight-line re-implementation of the classification forward pass for a
/// no-batchnorm spec: conv(3x3, same) -> relu -> conv -> relu -> [pool] per
/// block, then global average pooling and three dense layers. Written
/// directly from the architecture tables, independent of the model module.
fn oracle_forward(ckpt: &genmeter_core::model::Checkpoint, image: &[f32], h: usize, w: usize) -> [f64; 2] {
    let spec = &ckpt.spec;
    let mut cur: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let (mut ch, mut cw, mut cc) = (h, w, 1usize);
    let mut layer = 0usize; // index into weight-bearing layers, in order

    let weights: Vec<(&Tensor, &Tensor)> = ckpt
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.is_weight_layer())
        .map(|(i, _)| (&ckpt.params()[i][0], &ckpt.params()[i][1]))
        .collect();

    let conv = |x: &[f64], h: usize, w: usize, cin: usize, k: &Tensor, b: &Tensor| -> Vec<f64> {
        let ks = k.shape()[0];
        let cout = k.shape()[3];
        let pad = (ks / 2) as isize;
        let mut out = vec![0f64; h * w * cout];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for o in 0..cout {
                    let mut acc = b.data()[o] as f64;
                    for ky in 0..ks as isize {
                        for kx in 0..ks as isize {
                            let (iy, ix) = (y + ky - pad, xx + kx - pad);
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let kv = k.at(&[ky as usize, kx as usize, ci, o]) as f64;
                                acc += x[((iy as usize) * w + ix as usize) * cin + ci] * kv;
                            }
                        }
                    }
                    out[((y as usize) * w + xx as usize) * cout + o] = acc;
                }
            }
        }
        // storage rounds to f32 between layers, as the engine does
        out.into_iter().map(|v| v as f32 as f64).collect()
    };

    for b in 0..spec.blocks() {
        for _ in 0..2 {
            let (k, bias) = weights[layer];
            cur = conv(&cur, ch, cw, cc, k, bias);
            cc = k.shape()[3];
            cur.iter_mut().for_each(|v| *v = v.max(0.0));
            layer += 1;
        }
        if spec.pool[b] {
            let (oh, ow) = (ch.div_ceil(2), cw.div_ceil(2));
            let mut pooled = vec![f64::NEG_INFINITY; oh * ow * cc];
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..cc {
                        let mut best = f64::NEG_INFINITY;
                        for y in 2 * oy..(2 * oy + 2).min(ch) {
                            for x in 2 * ox..(2 * ox + 2).min(cw) {
                                best = best.max(cur[(y * cw + x) * cc + c]);
                            }
                        }
                        pooled[(oy * ow + ox) * cc + c] = best;
                    }
                }
            }
            cur = pooled;
            ch = oh;
            cw = ow;
        }
    }

    let mut v = vec![0f64; cc];
    for px in cur.chunks_exact(cc) {
        for (a, &x) in v.iter_mut().zip(px) {
            *a += x;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x / (ch * cw) as f64) as f32 as f64);

    for i in 0..3 {
        let (w_t, b_t) = weights[layer + i];
        let (din, dout) = (w_t.shape()[0], w_t.shape()[1]);
        let mut out = vec![0f64; dout];
        for (o, out_v) in out.iter_mut().enumerate() {
            let mut acc = b_t.data()[o] as f64;
            for (j, &xv) in v.iter().enumerate().take(din) {
                acc += xv * w_t.data()[j * dout + o] as f64;
            }
            *out_v = acc as f32 as f64;
        }
        if i < 2 {
            out.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        v = out;
    }
    [v[0], v[1]]
}

#[test]
fn forward_matches_independent_oracle() {
    let spec = NetworkSpec::vgg_like((12, 12), 2, 4, false, 0.0, false).unwrap();
    let ckpt = build(&spec, &mut SeededRng::new(41, 0)).unwrap();
    let mut rng = SeededRng::new(17, 3);
    let batch = rng.sample_normal(0.4, 0.2, &[3, 12, 12, 1]);
    let out = ckpt.forward(&batch, Mode::Eval, None).unwrap();
    for i in 0..3 {
        let img = &batch.data()[i * 144..(i + 1) * 144];
        let want = oracle_forward(&ckpt, img, 12, 12);
        for j in 0..2 {
            let got = out.logits.data()[i * 2 + j] as f64;
            let tol = 1e-5 * want[j].abs().max(1e-3);
            assert!(
                (got - want[j]).abs() <= tol,
                "sample {i} logit {j}: engine {got} vs oracle {}",
                want[j]
            );
        }
    }
}

#[test]
fn zero_weights_give_symmetric_logits() {
    let spec = NetworkSpec::vgg_like((12, 12), 1, 4, false, 0.0, false).unwrap();
    let mut ckpt = build(&spec, &mut SeededRng::new(0, 0)).unwrap();
    let mut v = ckpt.vectorize(None);
    v.values.fill(0.0);
    ckpt.devectorize(&v).unwrap();
    let batch = SeededRng::new(1, 1).sample_normal(0.5, 0.1, &[2, 12, 12, 1]);
    let out = ckpt.forward(&batch, Mode::Eval, None).unwrap();
    assert!(out.logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn scaling_one_biasfree_layer_scales_logits() {
    let spec = NetworkSpec::vgg_like((12, 12), 1, 4, false, 0.0, false).unwrap();
    let mut ckpt = build(&spec, &mut SeededRng::new(23, 0)).unwrap();
    // Zero every bias so the network is positively homogeneous per layer.
    for l in 0..ckpt.layers().len() {
        let bias_zero: Vec<f32> = vec![0.0; ckpt.params()[l][1].len()];
        ckpt.params_mut()[l][1].data_mut().copy_from_slice(&bias_zero);
    }
    let batch = SeededRng::new(2, 2).sample_normal(0.5, 0.2, &[2, 12, 12, 1]);
    let base = ckpt.forward(&batch, Mode::Eval, None).unwrap();

    let c = 3.0f32;
    let fc1 = ckpt.fc_layer_index(0);
    for v in ckpt.params_mut()[fc1][0].data_mut() {
        *v *= c;
    }
    let scaled = ckpt.forward(&batch, Mode::Eval, None).unwrap();
    for (s, b) in scaled.logits.data().iter().zip(base.logits.data()) {
        let want = b * c;
        assert!(
            (s - want).abs() <= 1e-5 * want.abs().max(1e-4),
            "scaled logit {s} vs {want}"
        );
    }
}

#[test]
fn train_and_eval_agree_without_bn_or_dropout() {
    let spec = NetworkSpec::vgg_like((16, 16), 2, 4, false, 0.0, false).unwrap();
    let ckpt = build(&spec, &mut SeededRng::new(9, 0)).unwrap();
    let batch = SeededRng::new(3, 3).sample_normal(0.4, 0.15, &[4, 16, 16, 1]);
    let eval = ckpt.forward(&batch, Mode::Eval, None).unwrap();
    let train = ckpt.forward(&batch, Mode::Train, None).unwrap();
    assert_eq!(eval.logits.data(), train.logits.data());
}

#[test]
fn train_mode_deterministic_given_stream() {
    let spec = NetworkSpec::vgg_like((16, 16), 1, 4, true, 0.3, false).unwrap();
    let mut ckpt = build(&spec, &mut SeededRng::new(9, 0)).unwrap();
    // Non-negative weights on positive inputs keep every ReLU alive, so the
    // dropout masks demonstrably reach the logits.
    let mut v = ckpt.vectorize(None);
    for x in v.values.iter_mut() {
        *x = x.abs();
    }
    ckpt.devectorize(&v).unwrap();
    let batch = SeededRng::new(3, 3).sample_normal(0.4, 0.15, &[4, 16, 16, 1]);
    let a = ckpt.forward(&batch, Mode::Train, Some(&mut SeededRng::new(5, 5))).unwrap();
    let b = ckpt.forward(&batch, Mode::Train, Some(&mut SeededRng::new(5, 5))).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    let c = ckpt.forward(&batch, Mode::Train, Some(&mut SeededRng::new(5, 6))).unwrap();
    // Different dropout stream: logits differ (dropout is live in train mode).
    assert_ne!(a.logits.data(), c.logits.data());
}

#[test]
fn decoder_masks_have_input_resolution() {
    let spec = NetworkSpec::vgg_like((32, 32), 3, 4, true, 0.0, true).unwrap();
    let ckpt = build(&spec, &mut SeededRng::new(7, 0)).unwrap();
    let batch = SeededRng::new(4, 4).sample_normal(0.4, 0.1, &[2, 32, 32, 1]);
    let out = ckpt.forward(&batch, Mode::Eval, None).unwrap();
    let masks = out.masks.expect("decoder produces masks");
    assert_eq!(masks.shape(), &[2, 32, 32]);
    assert!(masks.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}
