use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl PoolGeometry {
    pub fn new(window: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        PoolGeometry { window, stride, pad }
    }

    pub fn square(window: usize, stride: usize, pad: usize) -> Self {
        Self::new((window, window), (stride, stride), (pad, pad))
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.window;
        let (ph, pw) = self.pad;
        if kh == 0 || kw == 0 {
            return shape_err("pooling window must be non-empty");
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return shape_err("pooling stride must be positive");
        }
        if ph >= kh || pw >= kw {
            return shape_err(format!("pooling padding {:?} must be smaller than window {:?}", self.pad, self.window));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return shape_err(format!("pooling window {:?} exceeds padded input {}x{}", self.window, h + 2 * ph, w + 2 * pw));
        }
        Ok(((h + 2 * ph - kh) / self.stride.0 + 1, (w + 2 * pw - kw) / self.stride.1 + 1))
    }

    /// Clipped `[start, end)` input rows/cols of output cell `(oh, ow)`.
    fn span(&self, oh: usize, ow: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r0 = (oh * self.stride.0) as isize - self.pad.0 as isize;
        let c0 = (ow * self.stride.1) as isize - self.pad.1 as isize;
        let r1 = (r0 + self.window.0 as isize).min(h as isize);
        let c1 = (c0 + self.window.1 as isize).min(w as isize);
        (r0.max(0) as usize, r1 as usize, c0.max(0) as usize, c1 as usize)
    }
}

/// Max pooling; also returns the flat input index that won each window.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, geom: PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = geom.output_extent(h, w)?;
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let (r0, r1, c0, c1) = geom.span(oh, ow, h, w);
                let mut best = base + r0 * w + c0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        let idx = base + r * w + col;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * ho + oh) * wo + ow;
                out.data_mut()[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape.to_vec());
    for (&src, &go) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[src] = g.data()[src] + go;
    }
    g
}

/// Average pooling. Padded cells are excluded from the divisor, so constant
/// inputs pool to the same constant at the borders.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>, geom: PoolGeometry) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = geom.output_extent(h, w)?;
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let (r0, r1, c0, c1) = geom.span(oh, ow, h, w);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for col in c0..c1 {
                        acc = acc + x[base + r * w + col];
                    }
                }
                let count = T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                out.data_mut()[(plane * ho + oh) * wo + ow] = acc / count;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Scalar>(input_shape: &[usize], geom: PoolGeometry, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [a, b, c, d] => (a, b, c, d),
        _ => return shape_err("avgpool2d backward expects a rank-4 input shape"),
    };
    let (ho, wo) = geom.output_extent(h, w)?;
    let mut g = Tensor::zeros(input_shape.to_vec());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let (r0, r1, c0, c1) = geom.span(oh, ow, h, w);
                let count = T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                let share = grad_out.data()[(plane * ho + oh) * wo + ow] / count;
                for r in r0..r1 {
                    for col in c0..c1 {
                        let i = base + r * w + col;
                        g.data_mut()[i] = g.data()[i] + share;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Bin `[start, end)` of adaptive pooling cell `i` of `out` over an extent of `len`.
pub fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Average pooling onto a fixed `out_h × out_w` grid.
pub fn adaptive_avgpool2d<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return shape_err(format!("adaptive pooling to {out_h}x{out_w} needs an input of at least that size, got {h}x{w}"));
    }
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..out_h {
            let (r0, r1) = adaptive_bin(oh, out_h, h);
            for ow in 0..out_w {
                let (c0, c1) = adaptive_bin(ow, out_w, w);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for col in c0..c1 {
                        acc = acc + x[base + r * w + col];
                    }
                }
                out.data_mut()[(plane * out_h + oh) * out_w + ow] = acc / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avgpool2d_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [a, b, c, d] => (a, b, c, d),
        _ => return shape_err("adaptive pooling backward expects a rank-4 input shape"),
    };
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let mut g = Tensor::zeros(input_shape.to_vec());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..out_h {
            let (r0, r1) = adaptive_bin(oh, out_h, h);
            for ow in 0..out_w {
                let (c0, c1) = adaptive_bin(ow, out_w, w);
                let share = grad_out.data()[(plane * out_h + oh) * out_w + ow]
                    / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                for r in r0..r1 {
                    for col in c0..c1 {
                        let i = base + r * w + col;
                        g.data_mut()[i] = g.data()[i] + share;
                    }
                }
            }
        }
    }
    Ok(g)
}
