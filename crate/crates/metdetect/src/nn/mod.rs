//! Differentiable operators for the segmentation network.
//!
//! Every operator is a pure function in double precision with a hand-written
//! exact gradient for its stated forward definition. Identical inputs give
//! bit-identical outputs; there is no hidden threading or global state.

mod adam;
pub mod check;
mod conv;
mod loss;
mod pool;

pub use adam::{adam_step, AdamState};
pub use conv::{conv2d, conv2d_backward, upconv2, upconv2_backward, Padding};
pub use loss::{
    segmentation_loss, softdice_loss, softmax_crossentropy, LossValues,
};
pub use pool::{maxpool2, maxpool2_backward, MaxPoolIndices};

use crate::error::{Error, Result};

/// Dense 4D tensor in (batch, channels, height, width) layout, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((b * ch + c) * h + y) * w + x]
    }

    /// Contiguous (y, x) plane of one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let [_, ch, h, w] = self.shape;
        let start = (b * ch + c) * h * w;
        &self.data[start..start + h * w]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let [_, ch, h, w] = self.shape;
        let start = (b * ch + c) * h * w;
        &mut self.data[start..start + h * w]
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value in {what}")));
        }
        Ok(())
    }
}

/// Element-wise max(0, x).
pub fn relu(input: &Tensor4) -> Tensor4 {
    Tensor4 {
        shape: input.shape,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Routes the upstream gradient through the positive support of the forward
/// input (derivative at exactly zero is taken as zero).
pub fn relu_backward(input: &Tensor4, upstream: &Tensor4) -> Tensor4 {
    debug_assert_eq!(input.shape, upstream.shape);
    Tensor4 {
        shape: input.shape,
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [ba, ca, ha, wa] = a.shape;
    let [bb, cb, hb, wb] = b.shape;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::Shape(format!(
            "cannot concat {:?} with {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor4::zeros([ba, ca + cb, ha, wa]);
    for bi in 0..ba {
        for c in 0..ca {
            out.plane_mut(bi, c).copy_from_slice(a.plane(bi, c));
        }
        for c in 0..cb {
            out.plane_mut(bi, ca + c).copy_from_slice(b.plane(bi, c));
        }
    }
    Ok(out)
}

/// Splits the channel-concat gradient back into both inputs.
pub fn concat_channels_backward(upstream: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let [b, c, h, w] = upstream.shape;
    let cb = c - ca;
    let mut ga = Tensor4::zeros([b, ca, h, w]);
    let mut gb = Tensor4::zeros([b, cb, h, w]);
    for bi in 0..b {
        for ci in 0..ca {
            ga.plane_mut(bi, ci).copy_from_slice(upstream.plane(bi, ci));
        }
        for ci in 0..cb {
            gb.plane_mut(bi, ci)
                .copy_from_slice(upstream.plane(bi, ca + ci));
        }
    }
    (ga, gb)
}

/// Channel-wise softmax (numerically stabilized).
pub fn softmax_channels(logits: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = logits.shape;
    let mut out = Tensor4::zeros(logits.shape);
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let mut maxv = f64::NEG_INFINITY;
            for ci in 0..c {
                maxv = maxv.max(logits.data[(bi * c + ci) * plane + p]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                let e = (logits.data[(bi * c + ci) * plane + p] - maxv).exp();
                out.data[(bi * c + ci) * plane + p] = e;
                denom += e;
            }
            for ci in 0..c {
                out.data[(bi * c + ci) * plane + p] /= denom;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_backward() {
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0, 0.0]);
        let up = Tensor4::from_vec([1, 1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let g = relu_backward(&x, &up);
        assert_eq!(g.data, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_round_trip() {
        let a = Tensor4::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor4::from_vec([1, 1, 1, 2], vec![5.0, 6.0]).unwrap();
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape, [1, 3, 1, 2]);
        assert_eq!(cat.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (ga, gb) = concat_channels_backward(&cat, 2);
        assert_eq!(ga.data, a.data);
        assert_eq!(gb.data, b.data);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor4::from_vec([1, 2, 1, 2], vec![0.3, -4.0, 2.0, 11.0]).unwrap();
        let p = softmax_channels(&x);
        for i in 0..2 {
            let s = p.at(0, 0, 0, i) + p.at(0, 1, 0, i);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
