//! Convolution correctness against an independent nested-loop reference.
//!
//! The reference below is deliberately written in a different style from the
//! engine (explicitly materialized padding, no grouping of loops) so the two
//! implementations share no code.

use lodet_core::conv::{conv2d, conv2d_backward, Conv2dCfg, ConvPath};
use lodet_core::tape::{finite_diff_max_rel_err, Tape};
use lodet_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

/// Reference convolution: pads the input explicitly, then walks every output
/// element with plain quadruple loops.
fn reference_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: usize,
) -> Tensor<f64> {
    let (n, c_in, h, w_in) = x.dims4().unwrap();
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;

    let ph = h + 2 * padding;
    let pw = w_in + 2 * padding;
    let mut padded = vec![0.0; n * c_in * ph * pw];
    for bn in 0..n {
        for ci in 0..c_in {
            for y in 0..h {
                for xx in 0..w_in {
                    padded[((bn * c_in + ci) * ph + y + padding) * pw + xx + padding] =
                        x.data()[((bn * c_in + ci) * h + y) * w_in + xx];
                }
            }
        }
    }

    let oh = (ph - (dilation * (k - 1) + 1)) / stride + 1;
    let ow = (pw - (dilation * (k - 1) + 1)) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for bn in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = match b {
                        Some(b) => b.data()[co],
                        None => 0.0,
                    };
                    for cil in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + cil;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy * stride + ky * dilation;
                                let ix = ox * stride + kx * dilation;
                                acc += w.data()[((co * cin_g + cil) * k + ky) * k + kx]
                                    * padded[((bn * c_in + ci) * ph + iy) * pw + ix];
                            }
                        }
                    }
                    out[((bn * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, c_out, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dilated_grouped_conv_matches_reference() {
    // 1x4x8x8, k=3, dilation=2, groups=4.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[1, 4, 8, 8]);
    let w = random_tensor(&mut rng, &[4, 1, 3, 3]);
    let b = random_tensor(&mut rng, &[4]);
    let cfg = Conv2dCfg { stride: 1, dilation: 2, groups: 4, padding: 2 };
    let expect = reference_conv(&x, &w, Some(&b), 1, 2, 4, 2);
    for path in [ConvPath::Direct, ConvPath::Im2col] {
        let (got, _) = conv2d(&x, &w, Some(&b), &cfg, path).unwrap();
        assert!(max_abs_diff(&got, &expect) < 1e-12, "path {path:?}");
    }
}

#[test]
fn conv_matches_reference_across_config_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(c_in, c_out, groups) in &[(1usize, 1usize, 1usize), (4, 6, 2), (6, 6, 6), (8, 4, 4)] {
        for &k in &[1usize, 3] {
            for &stride in &[1usize, 2] {
                for &dilation in &[1usize, 2] {
                    for &padding in &[0usize, 1, 2] {
                        let eff = dilation * (k - 1) + 1;
                        if 7 + 2 * padding < eff {
                            continue;
                        }
                        let x = random_tensor(&mut rng, &[2, c_in, 7, 7]);
                        let w = random_tensor(&mut rng, &[c_out, c_in / groups, k, k]);
                        let b = random_tensor(&mut rng, &[c_out]);
                        let cfg = Conv2dCfg { stride, dilation, groups, padding };
                        let expect =
                            reference_conv(&x, &w, Some(&b), stride, dilation, groups, padding);
                        let (got, _) = conv2d(&x, &w, Some(&b), &cfg, ConvPath::Direct).unwrap();
                        assert!(
                            max_abs_diff(&got, &expect) < 1e-12,
                            "cfg {cfg:?} c_in={c_in} c_out={c_out} k={k}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn im2col_path_is_bitwise_equal_to_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for &(c_in, c_out, groups) in &[(3usize, 5usize, 1usize), (4, 4, 2), (6, 6, 6)] {
        for &k in &[1usize, 3] {
            for &stride in &[1usize, 2] {
                for &dilation in &[1usize, 3] {
                    let padding = dilation * (k - 1) / 2;
                    let x = random_tensor(&mut rng, &[1, c_in, 9, 9]);
                    let w = random_tensor(&mut rng, &[c_out, c_in / groups, k, k]);
                    let b = random_tensor(&mut rng, &[c_out]);
                    let cfg = Conv2dCfg { stride, dilation, groups, padding };
                    let (direct, cd) = conv2d(&x, &w, Some(&b), &cfg, ConvPath::Direct).unwrap();
                    let (fast, cf) = conv2d(&x, &w, Some(&b), &cfg, ConvPath::Im2col).unwrap();
                    assert_eq!(direct.shape(), fast.shape());
                    for (a, z) in direct.data().iter().zip(fast.data()) {
                        assert_eq!(a.to_bits(), z.to_bits(), "cfg {cfg:?}");
                    }
                    assert_eq!(cd, cf, "operation counts must agree");
                }
            }
        }
    }
}

#[test]
fn ungrouped_conv_equals_blockdiagonal_group_decomposition() {
    // A groups=1 conv with block-diagonal weights equals the grouped conv on
    // the same blocks, checked on shapes up to 8x8.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for &groups in &[2usize, 4] {
        let c_in = 8;
        let c_out = 8;
        let cin_g = c_in / groups;
        let cout_g = c_out / groups;
        let x = random_tensor(&mut rng, &[1, c_in, 8, 8]);
        let wg = random_tensor(&mut rng, &[c_out, cin_g, 3, 3]);
        // Expand the grouped weight into a block-diagonal dense weight.
        let mut dense = Tensor::<f64>::zeros(&[c_out, c_in, 3, 3]);
        for co in 0..c_out {
            let g = co / cout_g;
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                for t in 0..9 {
                    dense.data_mut()[(co * c_in + ci) * 9 + t] =
                        wg.data()[(co * cin_g + cil) * 9 + t];
                }
            }
        }
        let cfg_g = Conv2dCfg { groups, ..Conv2dCfg::same3x3(1, groups) };
        let cfg_d = Conv2dCfg::same3x3(1, 1);
        let (yg, _) = conv2d(&x, &wg, None, &cfg_g, ConvPath::Direct).unwrap();
        let (yd, _) = conv2d(&x, &dense, None, &cfg_d, ConvPath::Direct).unwrap();
        assert!(max_abs_diff(&yg, &yd) < 1e-12);
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x0 = random_tensor(&mut rng, &[1, 4, 5, 5]);
    let w0 = random_tensor(&mut rng, &[2, 2, 3, 3]);
    let b0 = random_tensor(&mut rng, &[2]);
    let cfg = Conv2dCfg { stride: 1, dilation: 1, groups: 2, padding: 1 };

    let loss = |inputs: &[Tensor<f64>]| -> lodet_core::tensor::Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(inputs[0].clone(), true);
        let w = tape.input(inputs[1].clone(), true);
        let b = tape.input(inputs[2].clone(), true);
        let y = tape.conv2d(x, w, Some(b), cfg)?;
        let sq = tape.mul(y, y)?;
        let l = tape.sum(sq)?;
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let x = tape.input(x0.clone(), true);
    let w = tape.input(w0.clone(), true);
    let b = tape.input(b0.clone(), true);
    let y = tape.conv2d(x, w, Some(b), cfg).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let l = tape.sum(sq).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic = vec![
        grads.get(x).unwrap().clone(),
        grads.get(w).unwrap().clone(),
        grads.get(b).unwrap().clone(),
    ];

    let err = finite_diff_max_rel_err(loss, &[x0, w0, b0], &analytic, 1e-6).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn conv_backward_agrees_with_manual_accumulation() {
    // dL/dx for L = sum(conv(x, w)) equals convolving ones with the flipped
    // kernel; verified numerically through the reference forward.
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = random_tensor(&mut rng, &[1, 2, 6, 6]);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let cfg = Conv2dCfg::same3x3(1, 1);
    let (y, _) = conv2d(&x, &w, None, &cfg, ConvPath::Direct).unwrap();
    let dout = Tensor::filled(y.shape(), 1.0);
    let (dx, dw, db) = conv2d_backward(&x, &w, false, &cfg, &dout).unwrap();
    assert!(db.is_none());

    // Central differences on a few probe coordinates.
    let probes = [(0usize, 0.0), (7, 0.0), (35, 0.0), (71, 0.0)];
    for &(idx, _) in &probes {
        let eps = 1e-6;
        let mut xp = x.clone();
        xp.data_mut()[idx] += eps;
        let up = reference_conv(&xp, &w, None, 1, 1, 1, 1).sum();
        xp.data_mut()[idx] -= 2.0 * eps;
        let down = reference_conv(&xp, &w, None, 1, 1, 1, 1).sum();
        let numeric = (up - down) / (2.0 * eps);
        assert!((dx.data()[idx] - numeric).abs() < 1e-6);
    }
    for idx in [0usize, 10, 26] {
        let eps = 1e-6;
        let mut wp = w.clone();
        wp.data_mut()[idx] += eps;
        let up = reference_conv(&x, &wp, None, 1, 1, 1, 1).sum();
        wp.data_mut()[idx] -= 2.0 * eps;
        let down = reference_conv(&x, &wp, None, 1, 1, 1, 1).sum();
        let numeric = (up - down) / (2.0 * eps);
        assert!((dw.data()[idx] - numeric).abs() < 1e-6);
    }
}

#[test]
fn planted_gradient_bug_is_detected() {
    // A gradient corrupted by a factor of two must produce a relative error
    // near |2g - g| / (|2g| + |g|) = 1/3 under the checker's normalization.
    let x0 = Tensor::from_f64_slice(&[3], &[0.7, -0.3, 1.2]).unwrap();
    let loss = |inputs: &[Tensor<f64>]| -> lodet_core::tensor::Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(inputs[0].clone(), true);
        let sq = tape.mul(x, x)?;
        let l = tape.sum(sq)?;
        tape.value(l).item()
    };
    let corrupted = x0.map(|v| 4.0 * v); // true gradient is 2x; planted bug doubles it
    let err = finite_diff_max_rel_err(loss, &[x0], &[corrupted], 1e-6).unwrap();
    assert!((err - 1.0 / 3.0).abs() < 1e-3, "got {err}");
}

#[test]
fn forward_is_deterministic_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random_tensor(&mut rng, &[1, 6, 12, 12]);
        let w = random_tensor(&mut rng, &[6, 1, 3, 3]);
        let cfg = Conv2dCfg::same3x3(1, 6);
        let (y, _) = conv2d(&x, &w, None, &cfg, ConvPath::Im2col).unwrap();
        y.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}
