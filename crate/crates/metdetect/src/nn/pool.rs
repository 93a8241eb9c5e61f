//! 2x2 max pooling with argmax routing.

use super::Tensor4;
use crate::error::{Error, Result};

/// Flat input-plane offsets of each pooling window's argmax, one per output
/// element, used to route gradients back.
pub struct MaxPoolIndices {
    pub input_shape: [usize; 4],
    pub argmax: Vec<u32>,
}

/// Non-overlapping 2x2 max pooling. Ties go to the first window entry in
/// raster order.
pub fn maxpool2(input: &Tensor4) -> Result<(Tensor4, MaxPoolIndices)> {
    let [b, c, h, w] = input.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 needs even spatial dims, got {:?}",
            input.shape
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let mut ai = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let plane = input.plane(bi, ci);
            let out_plane = out.plane_mut(bi, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (2 * oy) * w + 2 * ox;
                    // raster order within the window; strictly-greater keeps
                    // the first occurrence on ties
                    let mut best = plane[base];
                    let mut best_off = base;
                    for &off in &[base + 1, base + w, base + w + 1] {
                        if plane[off] > best {
                            best = plane[off];
                            best_off = off;
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                    argmax[ai] = best_off as u32;
                    ai += 1;
                }
            }
        }
    }
    Ok((
        out,
        MaxPoolIndices {
            input_shape: input.shape,
            argmax,
        },
    ))
}

/// Adds each upstream value at its window's argmax position.
pub fn maxpool2_backward(indices: &MaxPoolIndices, upstream: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = indices.input_shape;
    let mut grad = Tensor4::zeros(indices.input_shape);
    let [ub, uc, uh, uw] = upstream.shape;
    debug_assert_eq!((ub, uc, uh, uw), (b, c, h / 2, w / 2));
    let mut ai = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let up_plane = upstream.plane(bi, ci);
            let g_plane = grad.plane_mut(bi, ci);
            for &uv in up_plane {
                g_plane[indices.argmax[ai] as usize] += uv;
                ai += 1;
            }
        }
    }
    grad
}
