//! Upsampling, bilinear resizing, reflection padding and cropping.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMethod {
    Bilinear,
    Nearest,
}

impl std::str::FromStr for UpsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(UpsampleMethod::Bilinear),
            "nearest" => Ok(UpsampleMethod::Nearest),
            other => Err(Error::Config(format!("unknown upsample method {other:?}"))),
        }
    }
}

/// Source taps `(i0, i1, w0, w1)` for each destination index of a linear
/// resize with half-pixel centers (align-corners off).
fn linear_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let w1 = src - i0 as f64;
            let w1 = if i1 == i0 { 0.0 } else { w1 };
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Bilinear resize of every plane to `out_h × out_w`.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return shape_err(format!("cannot resize {h}x{w} to {out_h}x{out_w}"));
    }
    let rows = linear_taps(h, out_h);
    let cols = linear_taps(w, out_w);
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    let x = input.data();
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(r0, r1, a0, a1)) in rows.iter().enumerate() {
            let (a0, a1) = (T::from_f64_lossy(a0), T::from_f64_lossy(a1));
            for (ox, &(c0, c1, b0, b1)) in cols.iter().enumerate() {
                let (b0, b1) = (T::from_f64_lossy(b0), T::from_f64_lossy(b1));
                dst[oy * out_w + ox] = a0 * (b0 * src[r0 * w + c0] + b1 * src[r0 * w + c1])
                    + a1 * (b0 * src[r1 * w + c0] + b1 * src[r1 * w + c1]);
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [a, b, c, d] => (a, b, c, d),
        _ => return shape_err("bilinear backward expects a rank-4 input shape"),
    };
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let rows = linear_taps(h, out_h);
    let cols = linear_taps(w, out_w);
    let mut g = Tensor::zeros(input_shape.to_vec());
    for plane in 0..n * c {
        let go = &grad_out.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut g.data_mut()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(r0, r1, a0, a1)) in rows.iter().enumerate() {
            for (ox, &(c0, c1, b0, b1)) in cols.iter().enumerate() {
                let v = go[oy * out_w + ox];
                dst[r0 * w + c0] = dst[r0 * w + c0] + v * T::from_f64_lossy(a0 * b0);
                dst[r0 * w + c1] = dst[r0 * w + c1] + v * T::from_f64_lossy(a0 * b1);
                dst[r1 * w + c0] = dst[r1 * w + c0] + v * T::from_f64_lossy(a1 * b0);
                dst[r1 * w + c1] = dst[r1 * w + c1] + v * T::from_f64_lossy(a1 * b1);
            }
        }
    }
    Ok(g)
}

/// Multiplies both spatial extents by `factor`.
pub fn upsample<T: Scalar>(input: &Tensor<T>, factor: usize, method: UpsampleMethod) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be at least 1".into()));
    }
    let (n, c, h, w) = input.dims4()?;
    match method {
        UpsampleMethod::Bilinear => resize_bilinear(input, h * factor, w * factor),
        UpsampleMethod::Nearest => {
            let (oh, ow) = (h * factor, w * factor);
            let mut out = Tensor::zeros(vec![n, c, oh, ow]);
            for plane in 0..n * c {
                for y in 0..oh {
                    for x in 0..ow {
                        out.data_mut()[(plane * oh + y) * ow + x] = input.data()[(plane * h + y / factor) * w + x / factor];
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn upsample_backward<T: Scalar>(
    input_shape: &[usize],
    factor: usize,
    method: UpsampleMethod,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match method {
        UpsampleMethod::Bilinear => resize_bilinear_backward(input_shape, grad_out),
        UpsampleMethod::Nearest => {
            let (n, c, h, w) = match *input_shape {
                [a, b, c, d] => (a, b, c, d),
                _ => return shape_err("upsample backward expects a rank-4 input shape"),
            };
            let (oh, ow) = (h * factor, w * factor);
            let mut g = Tensor::zeros(input_shape.to_vec());
            for plane in 0..n * c {
                for y in 0..oh {
                    for x in 0..ow {
                        let i = (plane * h + y / factor) * w + x / factor;
                        g.data_mut()[i] = g.data()[i] + grad_out.data()[(plane * oh + y) * ow + x];
                    }
                }
            }
            Ok(g)
        }
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Reflect-pads bottom and right so that both extents become multiples of `multiple`.
pub fn reflect_pad_to_multiple<T: Scalar>(input: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(input.clone());
    }
    let mut out = Tensor::zeros(vec![n, c, ph, pw]);
    for plane in 0..n * c {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize, w);
                out.data_mut()[(plane * ph + y) * pw + x] = input.data()[(plane * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

/// Top-left `out_h × out_w` window of every plane.
pub fn crop_top_left<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h > h || out_w > w {
        return shape_err(format!("cannot crop {h}x{w} to {out_h}x{out_w}"));
    }
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    for plane in 0..n * c {
        for y in 0..out_h {
            let src = &input.data()[(plane * h + y) * w..(plane * h + y) * w + out_w];
            out.data_mut()[(plane * out_h + y) * out_w..(plane * out_h + y + 1) * out_w].copy_from_slice(src);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(vec![1, 2, 3, 5], 1.0, &mut rng);
        for m in [UpsampleMethod::Bilinear, UpsampleMethod::Nearest] {
            assert!(upsample(&x, 1, m).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
        }
    }

    #[test]
    fn factor_zero_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(upsample(&x, 0, UpsampleMethod::Nearest), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 4], 2.5);
        for m in [UpsampleMethod::Bilinear, UpsampleMethod::Nearest] {
            let y = upsample(&x, 3, m).unwrap();
            assert_eq!(y.shape(), &[1, 1, 9, 12]);
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
        let r = resize_bilinear(&Tensor::<f64>::full(vec![1, 1, 1, 1], 2.5), 7, 5).unwrap();
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn nearest_replicates_blocks() {
        let x = Tensor::<f32>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMethod::Nearest).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        for (a, b) in [(3, 7), (4, 8), (5, 2), (1, 6)] {
            for (_, _, w0, w1) in linear_taps(a, b) {
                assert!((w0 + w1 - 1.0).abs() < 1e-15 && w0 >= 0.0 && w1 >= 0.0);
            }
        }
    }

    #[test]
    fn bilinear_doubling_matches_half_pixel_formula() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMethod::Bilinear).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn reflect_pad_then_crop_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::randn(vec![1, 3, 5, 7], 1.0, &mut rng);
        let p = reflect_pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 3, 8, 8]);
        assert_eq!(p[[0, 1, 5, 0]], x[[0, 1, 3, 0]]);
        assert_eq!(crop_top_left(&p, 5, 7).unwrap(), x);
    }
}
