//! Forward kernels and their adjoints. Every function here is pure.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod resample;

pub use conv::{conv2d, conv2d_backward, separable_conv2d, ConvGeometry};
pub use norm::{batchnorm2d, batchnorm2d_backward, Mode, BN_EPS, BN_MOMENTUM};
pub use pool::{adaptive_avgpool2d, avgpool2d, maxpool2d, PoolGeometry};
pub use resample::{crop_top_left, reflect_pad_to_multiple, resize_bilinear, upsample, UpsampleMethod};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        return shape_err("concat of zero tensors");
    };
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return shape_err(format!(
                "concat: tensor of shape {:?} does not match batch/spatial extents {:?}",
                t.shape(),
                first.shape()
            ));
        }
        total_c += tc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::from_vec(vec![n, total_c, h, w], data)
}

/// Splits an upstream concat gradient back into per-input pieces.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return shape_err(format!("split of {c} channels into {channels:?}"));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * hw)).collect();
    for b in 0..n {
        let mut offset = 0;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            let start = (b * c + offset) * hw;
            part.extend_from_slice(&grad.data()[start..start + ci * hw]);
            offset += ci;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::from_vec(vec![n, ci, h, w], d))
        .collect()
}

/// Sums over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
pub fn channel_sum<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(vec![n, 1, h, w]);
    for b in 0..n {
        let dst = &mut out.data_mut()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let src = &input.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    Ok(out)
}

pub fn channel_sum_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [a, b, c, d] => (a, b, c, d),
        _ => return shape_err("channel_sum backward expects a rank-4 input shape"),
    };
    let hw = h * w;
    let mut g = Tensor::zeros(input_shape.to_vec());
    for b in 0..n {
        let src = &grad_out.data()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            g.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activations() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![-1.0, 3.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0, 0.0]);
        assert_eq!(sigmoid(&x).data()[2], 0.5);
    }

    #[test]
    fn concat_single_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::randn(vec![2, 3, 4, 5], 1.0, &mut rng);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(vec![1, 2, 4, 5]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn channel_sum_of_identical_channels() {
        let x = Tensor::<f64>::full(vec![1, 5, 2, 2], 0.75);
        assert!(channel_sum(&x).unwrap().data().iter().all(|&v| v == 3.75));
    }

    #[test]
    fn channel_sum_is_linear_over_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![2, 5, 4, 4], 1.0, &mut rng);
        let lhs = channel_sum(&concat_channels(&[&a, &b]).unwrap()).unwrap();
        let rhs = channel_sum(&a).unwrap().zip_map(&channel_sum(&b).unwrap(), |x, y| x + y).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-6);
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(vec![2, 1, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![2, 4, 3, 3], 1.0, &mut rng);
        let parts = split_channels(&concat_channels(&[&a, &b]).unwrap(), &[1, 4]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }
}
