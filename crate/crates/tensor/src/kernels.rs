//! Forward and backward compute kernels shared by the tape operations.
//!
//! Plain nested loops over flat storage; at the image sizes this crate
//! targets they outrun any clever blocking we could justify maintaining.

use crate::error::TensorError;
use crate::tensor::Tensor;
use crate::Result;

pub(crate) fn conv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if effective > padded {
        return Err(TensorError::shape(
            "conv2d",
            format!(
                "effective kernel extent {} exceeds padded input extent {}",
                effective, padded
            ),
        ));
    }
    Ok((padded - effective) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if stride < 1 || dilation < 1 {
        return Err(TensorError::invalid(
            "conv2d",
            format!("stride {} and dilation {} must be >= 1", stride, dilation),
        ));
    }
    let (in_c, in_h, in_w) = input.dims3()?;
    let (out_c, k_c, k_h, k_w) = kernel.dims4()?;
    if k_c != in_c {
        return Err(TensorError::shape(
            "conv2d",
            format!(
                "kernel expects {} input channels, input has {}",
                k_c, in_c
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {} output channels",
                    b.shape(),
                    out_c
                ),
            ));
        }
    }
    let out_h = conv_out_dim(in_h, k_h, stride, dilation, padding)?;
    let out_w = conv_out_dim(in_w, k_w, stride, dilation, padding)?;
    Ok(ConvGeometry {
        in_c,
        in_h,
        in_w,
        out_c,
        k_h,
        k_w,
        out_h,
        out_w,
        stride,
        dilation,
        padding,
    })
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, bias, stride, dilation, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.out_c * g.out_h * g.out_w];
    for o in 0..g.out_c {
        let bias_v = bias.map_or(0.0, |b| b.data()[o]);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = bias_v;
                for c in 0..g.in_c {
                    let x_base = c * g.in_h;
                    let k_base = (o * g.in_c + c) * g.k_h;
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky * g.dilation) as isize
                            - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let x_row = (x_base + iy as usize) * g.in_w;
                        let k_row = (k_base + ky) * g.k_w;
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx * g.dilation) as isize
                                - g.padding as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            acc += x[x_row + ix as usize] * k[k_row + kx];
                        }
                    }
                }
                out[(o * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    Tensor::new(vec![g.out_c, g.out_h, g.out_w], out)
}

/// Accumulates conv2d gradients. Any of the three outputs may be skipped
/// when the corresponding operand does not need a gradient.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    dilation: usize,
    padding: usize,
    grad_input: Option<&mut Tensor>,
    grad_kernel: Option<&mut Tensor>,
    grad_bias: Option<&mut Tensor>,
) -> Result<()> {
    let g = conv_geometry(input, kernel, None, stride, dilation, padding)?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gi = grad_input.map(|t| t.data_mut());
    let mut gk = grad_kernel.map(|t| t.data_mut());
    let mut gb = grad_bias.map(|t| t.data_mut());
    for o in 0..g.out_c {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let up = go[(o * g.out_h + oy) * g.out_w + ox];
                if let Some(gb) = gb.as_deref_mut() {
                    gb[o] += up;
                }
                for c in 0..g.in_c {
                    let x_base = c * g.in_h;
                    let k_base = (o * g.in_c + c) * g.k_h;
                    for ky in 0..g.k_h {
                        let iy = (oy * g.stride + ky * g.dilation) as isize
                            - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let x_row = (x_base + iy as usize) * g.in_w;
                        let k_row = (k_base + ky) * g.k_w;
                        for kx in 0..g.k_w {
                            let ix = (ox * g.stride + kx * g.dilation) as isize
                                - g.padding as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let xi = x_row + ix as usize;
                            if let Some(gi) = gi.as_deref_mut() {
                                gi[xi] += up * k[k_row + kx];
                            }
                            if let Some(gk) = gk.as_deref_mut() {
                                gk[k_row + kx] += up * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Corner-aligned bilinear sampling positions: output index `i` of `n`
/// samples the source at `i * (m - 1) / (n - 1)`.
#[inline]
fn resize_src(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

#[inline]
fn split_coord(s: f64, n: usize) -> (usize, usize, f64) {
    let lo = s.floor() as usize;
    let lo = lo.min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, s - lo as f64)
}

pub(crate) fn resize_forward(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h < 1 || out_w < 1 {
        return Err(TensorError::invalid(
            "bilinear_resize",
            format!("target size {}x{} must be at least 1x1", out_h, out_w),
        ));
    }
    let (c_n, in_h, in_w) = input.dims3()?;
    let x = input.data();
    let mut out = vec![0.0; c_n * out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, wy) = split_coord(resize_src(oy, out_h, in_h), in_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = split_coord(resize_src(ox, out_w, in_w), in_w);
            for c in 0..c_n {
                let base = c * in_h;
                let v00 = x[(base + y0) * in_w + x0];
                let v01 = x[(base + y0) * in_w + x1];
                let v10 = x[(base + y1) * in_w + x0];
                let v11 = x[(base + y1) * in_w + x1];
                let top = v00 + wx * (v01 - v00);
                let bot = v10 + wx * (v11 - v10);
                out[(c * out_h + oy) * out_w + ox] = top + wy * (bot - top);
            }
        }
    }
    Tensor::new(vec![c_n, out_h, out_w], out)
}

pub(crate) fn resize_backward(
    input_shape: (usize, usize, usize),
    grad_out: &Tensor,
    grad_input: &mut Tensor,
) -> Result<()> {
    let (c_n, in_h, in_w) = input_shape;
    let (_, out_h, out_w) = grad_out.dims3()?;
    let go = grad_out.data();
    let gi = grad_input.data_mut();
    for oy in 0..out_h {
        let (y0, y1, wy) = split_coord(resize_src(oy, out_h, in_h), in_h);
        for ox in 0..out_w {
            let (x0, x1, wx) = split_coord(resize_src(ox, out_w, in_w), in_w);
            for c in 0..c_n {
                let up = go[(c * out_h + oy) * out_w + ox];
                let base = c * in_h;
                gi[(base + y0) * in_w + x0] += up * (1.0 - wy) * (1.0 - wx);
                gi[(base + y0) * in_w + x1] += up * (1.0 - wy) * wx;
                gi[(base + y1) * in_w + x0] += up * wy * (1.0 - wx);
                gi[(base + y1) * in_w + x1] += up * wy * wx;
            }
        }
    }
    Ok(())
}

/// Sampling geometry of a rotation: for each output pixel, the four
/// source neighbours and their bilinear weights, or None outside the
/// source extent (zero fill).
#[inline]
fn rotate_sample(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    cos_t: f64,
    sin_t: f64,
) -> Option<[(usize, usize, f64); 4]> {
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let dy = oy as f64 - cy;
    let dx = ox as f64 - cx;
    // Sampling grid rotated by the negative angle.
    let sx = cos_t * dx + sin_t * dy + cx;
    let sy = -sin_t * dx + cos_t * dy + cy;
    if sx <= -1.0 || sx >= w as f64 || sy <= -1.0 || sy >= h as f64 {
        return None;
    }
    let y0 = sy.floor();
    let x0 = sx.floor();
    let wy = sy - y0;
    let wx = sx - x0;
    let mut taps = [(0usize, 0usize, 0.0f64); 4];
    let mut n = 0;
    for (yy, fy) in [(y0, 1.0 - wy), (y0 + 1.0, wy)] {
        if yy < 0.0 || yy >= h as f64 {
            continue;
        }
        for (xx, fx) in [(x0, 1.0 - wx), (x0 + 1.0, wx)] {
            if xx < 0.0 || xx >= w as f64 {
                continue;
            }
            taps[n] = (yy as usize, xx as usize, fy * fx);
            n += 1;
        }
    }
    for t in taps.iter_mut().skip(n) {
        t.2 = 0.0;
    }
    Some(taps)
}

pub(crate) fn rotate_forward(input: &Tensor, angle_deg: f64) -> Result<Tensor> {
    let (c_n, h, w) = input.dims3()?;
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let x = input.data();
    let mut out = vec![0.0; c_n * h * w];
    for oy in 0..h {
        for ox in 0..w {
            let Some(taps) = rotate_sample(oy, ox, h, w, cos_t, sin_t) else {
                continue;
            };
            for c in 0..c_n {
                let base = c * h;
                let mut acc = 0.0;
                for &(sy, sx, wgt) in &taps {
                    if wgt != 0.0 {
                        acc += wgt * x[(base + sy) * w + sx];
                    }
                }
                out[(base + oy) * w + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c_n, h, w], out)
}

pub(crate) fn rotate_backward(
    input_shape: (usize, usize, usize),
    angle_deg: f64,
    grad_out: &Tensor,
    grad_input: &mut Tensor,
) -> Result<()> {
    let (c_n, h, w) = input_shape;
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let go = grad_out.data();
    let gi = grad_input.data_mut();
    for oy in 0..h {
        for ox in 0..w {
            let Some(taps) = rotate_sample(oy, ox, h, w, cos_t, sin_t) else {
                continue;
            };
            for c in 0..c_n {
                let base = c * h;
                let up = go[(base + oy) * w + ox];
                if up == 0.0 {
                    continue;
                }
                for &(sy, sx, wgt) in &taps {
                    if wgt != 0.0 {
                        gi[(base + sy) * w + sx] += up * wgt;
                    }
                }
            }
        }
    }
    Ok(())
}
