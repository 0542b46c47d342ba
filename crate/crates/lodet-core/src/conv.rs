//! 2-D convolution kernels.
//!
//! Two execution paths produce bit-identical results at both precisions: a
//! direct nested-loop reference and an im2col path that walks each output
//! element's taps in the same `(channel, ky, kx)` order, so every output
//! accumulates its terms in the same floating-point order. Padding taps are
//! materialized as zeros and multiplied like any other tap, which makes the
//! instrumented operation counts match the ideal-condition cost model.

use alloc::format;
use alloc::vec;

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Convolution hyper-parameters. Kernels are square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, groups: 1, padding: 0 }
    }
}

impl Conv2dCfg {
    /// 3x3 "same"-size convolution: padding equals dilation.
    pub fn same3x3(dilation: usize, groups: usize) -> Self {
        Self { stride: 1, dilation, groups, padding: dilation }
    }

    pub fn pointwise() -> Self {
        Self::default()
    }
}

/// Which kernel implementation executes the convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvPath {
    /// Naive nested loops; the reference implementation.
    Direct,
    /// Zero-padded im2col with an accumulation order matching `Direct`.
    #[default]
    Im2col,
}

/// Multiply-accumulate and bias-application counts observed while running a
/// convolution. One MAC or one bias add is two floating-point operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConvCost {
    pub macs: u64,
    pub bias_adds: u64,
}

impl ConvCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs + 2 * self.bias_adds
    }
}

/// Output spatial extent of a dilated strided convolution.
pub fn conv_out_extent(input: usize, k: usize, cfg: &Conv2dCfg) -> Result<usize> {
    let effective = cfg.dilation * (k - 1) + 1;
    let padded = input + 2 * cfg.padding;
    if padded < effective {
        return Err(TensorError::ZeroSizeOutput { dim: "spatial" });
    }
    Ok((padded - effective) / cfg.stride + 1)
}

fn validate<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    cfg: &Conv2dCfg,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if cfg.stride == 0 || cfg.dilation == 0 || cfg.groups == 0 {
        return Err(TensorError::BadParameter {
            context: format!("stride/dilation/groups must be >= 1, got {cfg:?}"),
        });
    }
    let (n, c_in, h, w_in) = x.dims4()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(TensorError::ShapeMismatch {
            context: format!("weight must be (c_out, c_in/g, k, k), got {ws:?}"),
        });
    }
    let (c_out, wc, k) = (ws[0], ws[1], ws[2]);
    if c_in % cfg.groups != 0 {
        return Err(TensorError::BadGroups { channels: c_in, groups: cfg.groups });
    }
    if c_out % cfg.groups != 0 {
        return Err(TensorError::BadGroups { channels: c_out, groups: cfg.groups });
    }
    if wc != c_in / cfg.groups {
        return Err(TensorError::ShapeMismatch {
            context: format!(
                "weight expects {} input channels per group, tensor has {}",
                wc,
                c_in / cfg.groups
            ),
        });
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                context: format!("bias must be ({c_out}), got {:?}", b.shape()),
            });
        }
    }
    let oh = conv_out_extent(h, k, cfg)?;
    let ow = conv_out_extent(w_in, k, cfg)?;
    Ok((n, c_in, h, w_in, c_out, k, oh, ow))
}

/// Forward convolution. Returns the output and the observed operation count.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    cfg: &Conv2dCfg,
    path: ConvPath,
) -> Result<(Tensor<S>, ConvCost)> {
    let (n, c_in, h, w_in, c_out, k, oh, ow) = validate(x, w, b, cfg)?;
    match path {
        ConvPath::Direct => conv2d_direct(x, w, b, cfg, n, c_in, h, w_in, c_out, k, oh, ow),
        ConvPath::Im2col => conv2d_im2col(x, w, b, cfg, n, c_in, h, w_in, c_out, k, oh, ow),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_direct<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    cfg: &Conv2dCfg,
    n: usize,
    c_in: usize,
    h: usize,
    w_in: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
) -> Result<(Tensor<S>, ConvCost)> {
    let cin_g = c_in / cfg.groups;
    let cout_g = c_out / cfg.groups;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![S::zero(); n * c_out * oh * ow];
    let mut cost = ConvCost::default();

    for bn in 0..n {
        for co in 0..c_out {
            let g = co / cout_g;
            let wbase = co * cin_g * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for cil in 0..cin_g {
                        let ci = g * cin_g + cil;
                        let xbase = (bn * c_in + ci) * h * w_in;
                        for ky in 0..k {
                            let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                                - cfg.padding as isize;
                            for kx in 0..k {
                                let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                                    - cfg.padding as isize;
                                let tap = if iy >= 0
                                    && (iy as usize) < h
                                    && ix >= 0
                                    && (ix as usize) < w_in
                                {
                                    xd[xbase + iy as usize * w_in + ix as usize]
                                } else {
                                    S::zero()
                                };
                                acc += wd[wbase + (cil * k + ky) * k + kx] * tap;
                                cost.macs += 1;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[co];
                        cost.bias_adds += 1;
                    }
                    out[((bn * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok((Tensor::new(&[n, c_out, oh, ow], out)?, cost))
}

/// Lower one (batch, group) slab into a (cin_g*k*k, oh*ow) column matrix with
/// zeros where taps fall into padding.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    xd: &[S],
    bn: usize,
    g: usize,
    cfg: &Conv2dCfg,
    c_in: usize,
    h: usize,
    w_in: usize,
    k: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let cin_g = c_in / cfg.groups;
    let ncols = oh * ow;
    for cil in 0..cin_g {
        let ci = g * cin_g + cil;
        let xbase = (bn * c_in + ci) * h * w_in;
        for ky in 0..k {
            for kx in 0..k {
                let row = (cil * k + ky) * k + kx;
                let rbase = row * ncols;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize - cfg.padding as isize;
                    let inside_y = iy >= 0 && (iy as usize) < h;
                    for ox in 0..ow {
                        let ix =
                            (ox * cfg.stride + kx * cfg.dilation) as isize - cfg.padding as isize;
                        col[rbase + oy * ow + ox] =
                            if inside_y && ix >= 0 && (ix as usize) < w_in {
                                xd[xbase + iy as usize * w_in + ix as usize]
                            } else {
                                S::zero()
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_im2col<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    cfg: &Conv2dCfg,
    n: usize,
    c_in: usize,
    h: usize,
    w_in: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
) -> Result<(Tensor<S>, ConvCost)> {
    let cin_g = c_in / cfg.groups;
    let cout_g = c_out / cfg.groups;
    let rows = cin_g * k * k;
    let ncols = oh * ow;
    let xd = x.data();
    let wd = w.data();
    let mut col = vec![S::zero(); rows * ncols];
    let mut out = vec![S::zero(); n * c_out * oh * ow];
    let mut cost = ConvCost::default();

    for bn in 0..n {
        for g in 0..cfg.groups {
            im2col(xd, bn, g, cfg, c_in, h, w_in, k, oh, ow, &mut col);
            for col_ in 0..cout_g {
                let co = g * cout_g + col_;
                let wrow = &wd[co * rows..(co + 1) * rows];
                let obase = (bn * c_out + co) * ncols;
                let acc = &mut out[obase..obase + ncols];
                // Row-by-row axpy keeps each output's accumulation order equal
                // to the direct path's (cil, ky, kx) walk.
                for (r, &wv) in wrow.iter().enumerate() {
                    let crow = &col[r * ncols..(r + 1) * ncols];
                    for (a, &c) in acc.iter_mut().zip(crow.iter()) {
                        *a += wv * c;
                    }
                }
                cost.macs += (rows * ncols) as u64;
                if let Some(b) = b {
                    let bv = b.data()[co];
                    for a in acc.iter_mut() {
                        *a += bv;
                    }
                    cost.bias_adds += ncols as u64;
                }
            }
        }
    }
    Ok((Tensor::new(&[n, c_out, oh, ow], out)?, cost))
}

/// Gradients of a convolution w.r.t. input, weight, and bias.
///
/// `dbias` is returned only when the forward pass had a bias.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    had_bias: bool,
    cfg: &Conv2dCfg,
    dout: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (n, c_in, h, w_in, c_out, k, oh, ow) = validate(x, w, None, cfg)?;
    let (dn, dc, dh, dw_) = dout.dims4()?;
    if (dn, dc, dh, dw_) != (n, c_out, oh, ow) {
        return Err(TensorError::ShapeMismatch {
            context: format!(
                "dout shape {:?} does not match conv output ({n},{c_out},{oh},{ow})",
                dout.shape()
            ),
        });
    }
    let cin_g = c_in / cfg.groups;
    let cout_g = c_out / cfg.groups;
    let rows = cin_g * k * k;
    let ncols = oh * ow;
    let xd = x.data();
    let wd = w.data();
    let dod = dout.data();

    let mut dx = vec![S::zero(); x.len()];
    let mut dwt = vec![S::zero(); w.len()];
    let mut db = if had_bias { Some(vec![S::zero(); c_out]) } else { None };
    let mut col = vec![S::zero(); rows * ncols];
    let mut dcol = vec![S::zero(); rows * ncols];

    for bn in 0..n {
        for g in 0..cfg.groups {
            im2col(xd, bn, g, cfg, c_in, h, w_in, k, oh, ow, &mut col);
            for v in dcol.iter_mut() {
                *v = S::zero();
            }
            for col_ in 0..cout_g {
                let co = g * cout_g + col_;
                let wrow = &wd[co * rows..(co + 1) * rows];
                let dob = &dod[(bn * c_out + co) * ncols..(bn * c_out + co + 1) * ncols];
                // dW[co][r] = sum_cols dout * col ; dcol[r] += w[co][r] * dout
                for r in 0..rows {
                    let crow = &col[r * ncols..(r + 1) * ncols];
                    let drow = &mut dcol[r * ncols..(r + 1) * ncols];
                    let mut acc = S::zero();
                    let wv = wrow[r];
                    for ((dc_, &c), &go) in drow.iter_mut().zip(crow.iter()).zip(dob.iter()) {
                        acc += go * c;
                        *dc_ += wv * go;
                    }
                    dwt[co * rows + r] += acc;
                }
                if let Some(db) = db.as_mut() {
                    let mut acc = S::zero();
                    for &go in dob {
                        acc += go;
                    }
                    db[co] += acc;
                }
            }
            // col2im: scatter dcol back onto dx.
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xbase = (bn * c_in + ci) * h * w_in;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (cil * k + ky) * k + kx;
                        let rbase = row * ncols;
                        for oy in 0..oh {
                            let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                                - cfg.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                                    - cfg.padding as isize;
                                if ix < 0 || ix as usize >= w_in {
                                    continue;
                                }
                                dx[xbase + iy as usize * w_in + ix as usize] +=
                                    dcol[rbase + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    let dx = Tensor::new(&[n, c_in, h, w_in], dx)?;
    let dwt = Tensor::new(w.shape(), dwt)?;
    let db = match db {
        Some(v) => Some(Tensor::new(&[c_out], v)?),
        None => None,
    };
    Ok((dx, dwt, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_scaling_conv() {
        // 1x1x3x3 ones through a single 1x1 weight of 2 with zero bias.
        let x = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::filled(&[1, 1, 1, 1], 2.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let (y, cost) =
            conv2d(&x, &w, Some(&b), &Conv2dCfg::pointwise(), ConvPath::Direct).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
        assert_eq!(cost.macs, 9);
        assert_eq!(cost.bias_adds, 9);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        // Depthwise 3x3 with center weight 1, padding 1.
        let x = Tensor::<f64>::from_f64_slice(
            &[1, 2, 2, 2],
            &[1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0],
        )
        .unwrap();
        let mut w = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 4] = 1.0;
        let cfg = Conv2dCfg::same3x3(1, 2);
        let (y, _) = conv2d(&x, &w, None, &cfg, ConvPath::Direct).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_size_output_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let cfg = Conv2dCfg { stride: 1, dilation: 1, groups: 1, padding: 0 };
        assert!(matches!(
            conv2d(&x, &w, None, &cfg, ConvPath::Direct),
            Err(TensorError::ZeroSizeOutput { .. })
        ));
    }

    #[test]
    fn non_divisible_groups_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
        let cfg = Conv2dCfg { groups: 2, ..Conv2dCfg::default() };
        assert!(matches!(
            conv2d(&x, &w, None, &cfg, ConvPath::Direct),
            Err(TensorError::BadGroups { channels: 3, groups: 2 })
        ));
    }
}
