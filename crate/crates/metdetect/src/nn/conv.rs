//! 2D convolution (cross-correlation) and the upsampling convolution.
//!
//! The stride-1 path walks kernel taps in the outer loops and accumulates
//! shifted row-axpy updates in the inner loop, which keeps the inner loop
//! contiguous in both source and destination.

use super::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Valid,
    Same,
}

struct ConvGeom {
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

fn conv_geometry(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    match padding {
        Padding::Valid => {
            if in_h < kh || in_w < kw {
                return Err(Error::Shape(format!(
                    "input {in_h}x{in_w} smaller than kernel {kh}x{kw} with valid padding"
                )));
            }
            Ok(ConvGeom {
                out_h: (in_h - kh) / stride + 1,
                out_w: (in_w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            let out_h = in_h.div_ceil(stride);
            let out_w = in_w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
            Ok(ConvGeom {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

fn check_conv_shapes(input: &Tensor4, weights: &Tensor4, bias: &[f64]) -> Result<()> {
    let [_, ic, _, _] = input.shape;
    let [oc, wic, _, _] = weights.shape;
    if ic != wic {
        return Err(Error::Shape(format!(
            "input shape {:?} has {ic} channels but weights {:?} expect {wic}",
            input.shape, weights.shape
        )));
    }
    if bias.len() != oc {
        return Err(Error::Shape(format!(
            "bias length {} does not match {oc} output channels of weights {:?}",
            bias.len(),
            weights.shape
        )));
    }
    Ok(())
}

/// Cross-correlation of `input` with `weights` (oc, ic, kh, kw) plus bias.
pub fn conv2d(
    input: &Tensor4,
    weights: &Tensor4,
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> Result<Tensor4> {
    check_conv_shapes(input, weights, bias)?;
    let [b, ic, h, w] = input.shape;
    let [oc, _, kh, kw] = weights.shape;
    let g = conv_geometry(h, w, kh, kw, stride, padding)?;
    let mut out = Tensor4::zeros([b, oc, g.out_h, g.out_w]);

    if stride == 1 {
        for bi in 0..b {
            for o in 0..oc {
                out.plane_mut(bi, o).fill(bias[o]);
                for i in 0..ic {
                    let in_plane = input.plane(bi, i);
                    // split borrows: recompute the output plane slice each tap
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weights.at(o, i, ky, kx);
                            if wv == 0.0 {
                                continue;
                            }
                            let dy = ky as isize - g.pad_top as isize;
                            let dx = kx as isize - g.pad_left as isize;
                            let oy0 = (-dy).max(0) as usize;
                            let oy1 = (g.out_h as isize).min(h as isize - dy).max(0) as usize;
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = (g.out_w as isize).min(w as isize - dx).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            let out_plane = out.plane_mut(bi, o);
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let orow = &mut out_plane
                                    [oy * g.out_w + ox0..oy * g.out_w + ox1];
                                let irow = &in_plane[iy * w + (ox0 as isize + dx) as usize
                                    ..iy * w + (ox1 as isize + dx) as usize];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        // generic strided path
        for bi in 0..b {
            for o in 0..oc {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = bias[o];
                        for i in 0..ic {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += weights.at(o, i, ky, kx)
                                        * input.at(bi, i, iy as usize, ix as usize);
                                }
                            }
                        }
                        *out.at_mut(bi, o, oy, ox) = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] (stride 1 only, which is all the network
/// uses): returns (d_input, d_weights, d_bias).
pub fn conv2d_backward(
    input: &Tensor4,
    weights: &Tensor4,
    upstream: &Tensor4,
    padding: Padding,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let [b, ic, h, w] = input.shape;
    let [oc, _, kh, kw] = weights.shape;
    let g = conv_geometry(h, w, kh, kw, 1, padding)?;
    if upstream.shape != [b, oc, g.out_h, g.out_w] {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match forward output {:?}",
            upstream.shape,
            [b, oc, g.out_h, g.out_w]
        )));
    }

    let mut d_input = Tensor4::zeros(input.shape);
    let mut d_weights = Tensor4::zeros(weights.shape);
    let mut d_bias = vec![0.0; oc];

    for bi in 0..b {
        for o in 0..oc {
            let up_plane = upstream.plane(bi, o);
            d_bias[o] += up_plane.iter().sum::<f64>();
            for i in 0..ic {
                let in_plane = input.plane(bi, i);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dy = ky as isize - g.pad_top as isize;
                        let dx = kx as isize - g.pad_left as isize;
                        let oy0 = (-dy).max(0) as usize;
                        let oy1 = (g.out_h as isize).min(h as isize - dy).max(0) as usize;
                        let ox0 = (-dx).max(0) as usize;
                        let ox1 = (g.out_w as isize).min(w as isize - dx).max(0) as usize;
                        if ox0 >= ox1 || oy0 >= oy1 {
                            continue;
                        }
                        // weight gradient: correlation of input with upstream;
                        // four accumulators let the dot product vectorize
                        let mut acc = [0.0f64; 4];
                        for oy in oy0..oy1 {
                            let iy = (oy as isize + dy) as usize;
                            let urow = &up_plane[oy * g.out_w + ox0..oy * g.out_w + ox1];
                            let irow = &in_plane[iy * w + (ox0 as isize + dx) as usize
                                ..iy * w + (ox1 as isize + dx) as usize];
                            let mut chunks_u = urow.chunks_exact(4);
                            let mut chunks_i = irow.chunks_exact(4);
                            for (cu, ci) in (&mut chunks_u).zip(&mut chunks_i) {
                                acc[0] += cu[0] * ci[0];
                                acc[1] += cu[1] * ci[1];
                                acc[2] += cu[2] * ci[2];
                                acc[3] += cu[3] * ci[3];
                            }
                            for (uv, iv) in
                                chunks_u.remainder().iter().zip(chunks_i.remainder())
                            {
                                acc[0] += uv * iv;
                            }
                        }
                        *d_weights.at_mut(o, i, ky, kx) +=
                            (acc[0] + acc[1]) + (acc[2] + acc[3]);

                        // input gradient: scatter upstream through the tap
                        let wv = weights.at(o, i, ky, kx);
                        if wv != 0.0 {
                            let din_plane = d_input.plane_mut(bi, i);
                            for oy in oy0..oy1 {
                                let iy = (oy as isize + dy) as usize;
                                let urow =
                                    &up_plane[oy * g.out_w + ox0..oy * g.out_w + ox1];
                                let drow = &mut din_plane[iy * w
                                    + (ox0 as isize + dx) as usize
                                    ..iy * w + (ox1 as isize + dx) as usize];
                                for (dv, uv) in drow.iter_mut().zip(urow) {
                                    *dv += wv * uv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((d_input, d_weights, d_bias))
}

/// Nearest-neighbor 2x upsample.
fn upsample2(input: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = input.shape;
    let mut out = Tensor4::zeros([b, c, 2 * h, 2 * w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = input.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    dst[(2 * y) * 2 * w + 2 * x] = v;
                    dst[(2 * y) * 2 * w + 2 * x + 1] = v;
                    dst[(2 * y + 1) * 2 * w + 2 * x] = v;
                    dst[(2 * y + 1) * 2 * w + 2 * x + 1] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums every 2x2 block.
fn upsample2_adjoint(upstream: &Tensor4) -> Tensor4 {
    let [b, c, h2, w2] = upstream.shape;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor4::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = upstream.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(2 * y) * w2 + 2 * x]
                        + src[(2 * y) * w2 + 2 * x + 1]
                        + src[(2 * y + 1) * w2 + 2 * x]
                        + src[(2 * y + 1) * w2 + 2 * x + 1];
                }
            }
        }
    }
    out
}

/// Up-convolution: nearest 2x upsample followed by a 3x3 same-padded
/// convolution. Doubles the spatial dimensions.
pub fn upconv2(input: &Tensor4, weights: &Tensor4, bias: &[f64]) -> Result<(Tensor4, Tensor4)> {
    let up = upsample2(input);
    let out = conv2d(&up, weights, bias, 1, Padding::Same)?;
    Ok((out, up))
}

/// Gradients of [`upconv2`]; `upsampled` is the intermediate returned by the
/// forward pass.
pub fn upconv2_backward(
    upsampled: &Tensor4,
    weights: &Tensor4,
    upstream: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let (d_up, d_w, d_b) = conv2d_backward(upsampled, weights, upstream, Padding::Same)?;
    Ok((upsample2_adjoint(&d_up), d_w, d_b))
}
