//! 2-D convolution via im2col + GEMM, and its adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Stride and zero-padding of a convolution, as `(rows, cols)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry { stride: (1, 1), pad: (0, 0) };

    pub fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        ConvGeometry { stride, pad }
    }

    /// Stride 1, padding that preserves spatial size for odd kernels.
    pub fn same(kh: usize, kw: usize) -> Self {
        ConvGeometry { stride: (1, 1), pad: ((kh - 1) / 2, (kw - 1) / 2) }
    }

    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return shape_err("stride must be positive");
        }
        let (ph, pw) = self.pad;
        if kh == 0 || kh > h + 2 * ph {
            return shape_err(format!("kernel height {kh} exceeds padded input height {}", h + 2 * ph));
        }
        if kw == 0 || kw > w + 2 * pw {
            return shape_err(format!("kernel width {kw} exceeds padded input width {}", w + 2 * pw));
        }
        Ok(((h + 2 * ph - kh) / self.stride.0 + 1, (w + 2 * pw - kw) / self.stride.1 + 1))
    }
}

struct Layout {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Layout {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn layout<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Layout> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return shape_err(format!("conv2d kernel must be rank 4, got {s:?}")),
    };
    if kcin != cin {
        return shape_err(format!("conv2d input channels: input has {cin}, kernel expects {kcin}"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err(format!("conv2d bias: expected [{cout}], got {:?}", b.shape()));
        }
    }
    let (ho, wo) = geom.output_extent(h, w, kh, kw)?;
    Ok(Layout { n, cin, h, w, cout, kh, kw, ho, wo })
}

fn is_pointwise(l: &Layout, geom: ConvGeometry) -> bool {
    l.kh == 1 && l.kw == 1 && geom == ConvGeometry::UNIT
}

/// Unfolds output rows `rows` of one image into `cols` (`K × rows.len()·W'`).
fn im2col<T: Scalar>(x: &[T], l: &Layout, geom: ConvGeometry, rows: std::ops::Range<usize>, cols: &mut [T]) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let p = rows.len() * l.wo;
    for ci in 0..l.cin {
        let plane = &x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (ci * l.kh + ki) * l.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for (r, oh) in rows.clone().enumerate() {
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    let out_row = &mut dst[r * l.wo..(r + 1) * l.wo];
                    if ih < 0 || ih as usize >= l.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * l.w..(ih as usize + 1) * l.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * sw + kj) as isize - pw as isize;
                        *o = if iw < 0 || iw as usize >= l.w { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Upper bound on im2col buffer elements in the forward pass; large images are
/// processed in bands of output rows.
const FORWARD_COLS_BUDGET: usize = 1 << 23;

fn col2im<T: Scalar>(cols: &[T], l: &Layout, geom: ConvGeometry, gx: &mut [T]) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    let p = l.p();
    for ci in 0..l.cin {
        let plane = &mut gx[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (ci * l.kh + ki) * l.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..l.ho {
                    let ih = (oh * sh + ki) as isize - ph as isize;
                    if ih < 0 || ih as usize >= l.h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * l.w..(ih as usize + 1) * l.w];
                    for ow in 0..l.wo {
                        let iw = (ow * sw + kj) as isize - pw as isize;
                        if iw >= 0 && (iw as usize) < l.w {
                            dst[iw as usize] = dst[iw as usize] + src[oh * l.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `input [N,Cin,H,W] * kernel [Cout,Cin,kh,kw] (+ bias [Cout]) -> [N,Cout,H',W']`
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let l = layout(input, kernel, bias, geom)?;
    let (k, p) = (l.k(), l.p());
    let mut out = Tensor::zeros(vec![l.n, l.cout, l.ho, l.wo]);
    let pointwise = is_pointwise(&l, geom);
    let band = (FORWARD_COLS_BUDGET / (k * l.wo).max(1)).clamp(1, l.ho.max(1));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * band * l.wo] };
    let in_stride = l.cin * l.h * l.w;
    let out_stride = l.cout * p;
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for b in 0..l.n {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let y = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (co, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        if pointwise {
            T::gemm(l.cout, k, p, T::one(), kernel.data(), k as isize, 1, x, p as isize, 1, beta, y, p as isize, 1);
            continue;
        }
        let mut r0 = 0;
        while r0 < l.ho {
            let r1 = (r0 + band).min(l.ho);
            let pc = (r1 - r0) * l.wo;
            im2col(x, &l, geom, r0..r1, &mut cols[..k * pc]);
            T::gemm(
                l.cout,
                k,
                pc,
                T::one(),
                kernel.data(),
                k as isize,
                1,
                &cols[..k * pc],
                pc as isize,
                1,
                beta,
                &mut y[r0 * l.wo..],
                p as isize,
                1,
            );
            r0 = r1;
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and (when present) bias.
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let l = layout(input, kernel, None, geom)?;
    if grad_out.shape() != [l.n, l.cout, l.ho, l.wo] {
        return shape_err(format!(
            "conv2d backward: upstream gradient {:?} does not match output [{}, {}, {}, {}]",
            grad_out.shape(),
            l.n,
            l.cout,
            l.ho,
            l.wo
        ));
    }
    let (k, p) = (l.k(), l.p());
    let pointwise = is_pointwise(&l, geom);
    let mut gin = Tensor::zeros(input.shape().to_vec());
    let mut gk = Tensor::zeros(kernel.shape().to_vec());
    let mut gb = has_bias.then(|| Tensor::zeros(vec![l.cout]));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcols = vec![T::zero(); k * p];
    let in_stride = l.cin * l.h * l.w;
    let out_stride = l.cout * p;
    for b in 0..l.n {
        let x = &input.data()[b * in_stride..(b + 1) * in_stride];
        let go = &grad_out.data()[b * out_stride..(b + 1) * out_stride];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(p).enumerate() {
                gb.data_mut()[co] = gb.data()[co] + chunk.iter().copied().sum::<T>();
            }
        }
        let cols_ref: &[T] = if pointwise {
            x
        } else {
            im2col(x, &l, geom, 0..l.ho, &mut cols);
            &cols
        };
        // dK += dY [Cout,P] * cols^T [P,K]
        T::gemm(
            l.cout,
            p,
            k,
            T::one(),
            go,
            p as isize,
            1,
            cols_ref,
            1,
            p as isize,
            T::one(),
            gk.data_mut(),
            k as isize,
            1,
        );
        // dcols = K^T [K,Cout] * dY [Cout,P]
        let gx = &mut gin.data_mut()[b * in_stride..(b + 1) * in_stride];
        if pointwise {
            T::gemm(l.cin, l.cout, p, T::one(), kernel.data(), 1, k as isize, go, p as isize, 1, T::zero(), gx, p as isize, 1);
        } else {
            T::gemm(
                k,
                l.cout,
                p,
                T::one(),
                kernel.data(),
                1,
                k as isize,
                go,
                p as isize,
                1,
                T::zero(),
                &mut gcols,
                p as isize,
                1,
            );
            col2im(&gcols, &l, geom, gx);
        }
    }
    Ok(Conv2dGrads { input: gin, kernel: gk, bias: gb })
}

/// An n×n convolution factorized into an n×1 stage followed by a 1×n stage.
///
/// `pad` zero-pads the long axis of each stage, so `pad = (n - 1) / 2` keeps the
/// spatial size and `pad = 0` matches a valid n×n convolution.
pub fn separable_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel_v: &Tensor<T>,
    kernel_h: &Tensor<T>,
    pad: usize,
) -> Result<Tensor<T>> {
    match (kernel_v.shape(), kernel_h.shape()) {
        ([_, _, _, 1], [_, _, 1, _]) => {}
        (v, h) => return shape_err(format!("separable_conv2d expects n×1 then 1×n kernels, got {v:?} and {h:?}")),
    }
    let mid = conv2d(input, kernel_v, None, ConvGeometry::new((1, 1), (pad, 0)))?;
    conv2d(&mid, kernel_h, None, ConvGeometry::new((1, 1), (0, pad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let (n, cin, h, w) = input.dims4().unwrap();
        let (cout, _, kh, kw) = kernel.dims4().unwrap();
        let (ho, wo) = g.output_extent(h, w, kh, kw).unwrap();
        let mut out = Tensor::zeros(vec![n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (oh * g.stride.0 + i) as isize - g.pad.0 as isize;
                                    let iw = (ow * g.stride.1 + j) as isize - g.pad.1 as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += input[[b, ci, ih as usize, iw as usize]] * kernel[[co, ci, i, j]];
                                    }
                                }
                            }
                        }
                        out[[b, co, oh, ow]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::full(vec![1, 1, 1, 1], 5.0);
        let k = Tensor::<f32>::ones(vec![1, 1, 1, 1]);
        let y = conv2d(&x, &k, None, ConvGeometry::UNIT).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn all_ones_sums_receptive_field() {
        let x = Tensor::<f32>::ones(vec![1, 3, 4, 4]);
        let k = Tensor::<f32>::ones(vec![64, 3, 3, 3]);
        let y = conv2d(&x, &k, None, ConvGeometry::UNIT).unwrap();
        assert_eq!(y.shape(), &[1, 64, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (g, kh, kw) in [
            (ConvGeometry::UNIT, 3, 3),
            (ConvGeometry::new((2, 2), (1, 1)), 3, 3),
            (ConvGeometry::new((1, 2), (0, 3)), 1, 7),
            (ConvGeometry::UNIT, 1, 1),
            (ConvGeometry::new((2, 1), (2, 0)), 5, 2),
        ] {
            let x = Tensor::<f64>::randn(vec![2, 3, 9, 8], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(vec![4, 3, kh, kw], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);
            let fast = conv2d(&x, &k, Some(&b), g).unwrap();
            let slow = reference(&x, &k, Some(&b), g);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-6, "{g:?} {kh}x{kw}");
        }
    }

    #[test]
    fn odd_same_padding_preserves_shape() {
        for k in [1, 3, 5, 7] {
            let x = Tensor::<f32>::zeros(vec![1, 2, 11, 6]);
            let kern = Tensor::<f32>::zeros(vec![3, 2, k, k]);
            let y = conv2d(&x, &kern, None, ConvGeometry::same(k, k)).unwrap();
            assert_eq!(y.shape(), &[1, 3, 11, 6]);
        }
    }

    #[test]
    fn channel_mismatch_is_named() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let msg = conv2d(&x, &k, None, ConvGeometry::UNIT).unwrap_err().to_string();
        assert!(msg.contains("channels"), "{msg}");
        let k = Tensor::<f32>::zeros(vec![1, 2, 9, 3]);
        let msg = conv2d(&x, &k, None, ConvGeometry::UNIT).unwrap_err().to_string();
        assert!(msg.contains("height"), "{msg}");
    }

    #[test]
    fn separable_identity_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![1, 2, 5, 5], 1.0, &mut rng);
        let mut kv = Tensor::<f64>::zeros(vec![2, 2, 1, 1]);
        let mut kh = Tensor::<f64>::zeros(vec![2, 2, 1, 1]);
        for c in 0..2 {
            kv[[c, c, 0, 0]] = 1.0;
            kh[[c, c, 0, 0]] = 1.0;
        }
        assert_eq!(separable_conv2d(&x, &kv, &kh, 0).unwrap(), x);
    }

    #[test]
    fn separable_rank_one_equals_full_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(vec![1, 1, 12, 10], 1.0, &mut rng);
        let u = Tensor::<f64>::randn(vec![1, 1, 7, 1], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![1, 1, 1, 7], 1.0, &mut rng);
        let mut full = Tensor::<f64>::zeros(vec![1, 1, 7, 7]);
        for i in 0..7 {
            for j in 0..7 {
                full[[0, 0, i, j]] = u.data()[i] * v.data()[j];
            }
        }
        for pad in [0, 3] {
            let sep = separable_conv2d(&x, &u, &v, pad).unwrap();
            let direct = conv2d(&x, &full, None, ConvGeometry::new((1, 1), (pad, pad))).unwrap();
            assert!(sep.max_abs_diff(&direct).unwrap() < 1e-6);
        }
    }

    #[test]
    fn separable_matches_two_stage_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(vec![2, 3, 9, 9], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(vec![4, 3, 5, 1], 1.0, &mut rng);
        let kh = Tensor::<f64>::randn(vec![2, 4, 1, 5], 1.0, &mut rng);
        let sep = separable_conv2d(&x, &kv, &kh, 2).unwrap();
        let mid = reference(&x, &kv, None, ConvGeometry::new((1, 1), (2, 0)));
        let oracle = reference(&mid, &kh, None, ConvGeometry::new((1, 1), (0, 2)));
        assert!(sep.max_abs_diff(&oracle).unwrap() < 1e-6);
    }
}
