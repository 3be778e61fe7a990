use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
    /// Batch mean and unbiased batch variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!(
            "batchnorm over {c} channels got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(())
}

/// Batch normalization. In train mode the batch statistics are used and
/// returned in the cache; in eval mode `running_mean`/`running_var` are used.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    check_affine(c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return shape_err(format!("batchnorm running statistics must have {c} entries"));
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::from_f64_lossy(eps);
    let x = input.data();
    let (mean, var_biased, var_unbiased) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    acc = acc + x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                mean[ch] = acc / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        sq = sq + (v - mean[ch]) * (v - mean[ch]);
                    }
                }
                var[ch] = sq / cnt;
            }
            let unbiased = if count > 1 {
                let scale = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                var.iter().map(|&v| v * scale).collect()
            } else {
                var.clone()
            };
            (mean, var, unbiased)
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), Vec::new()),
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape().to_vec());
    let mut out = Tensor::zeros(input.shape().to_vec());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in range {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + be;
            }
        }
    }
    let cache = BatchNormCache {
        xhat,
        inv_std,
        mode,
        batch_mean: if mode == Mode::Train { mean } else { Vec::new() },
        batch_var: var_unbiased,
    };
    Ok((out, cache))
}

/// Exponential moving update of running statistics from a train-mode cache.
pub fn update_running_stats<T: Scalar>(
    cache: &BatchNormCache<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
    momentum: f64,
) {
    if cache.mode != Mode::Train {
        return;
    }
    let m = T::from_f64_lossy(momentum);
    let keep = T::one() - m;
    for (r, &b) in running_mean.iter_mut().zip(&cache.batch_mean) {
        *r = keep * *r + m * b;
    }
    for (r, &b) in running_var.iter_mut().zip(&cache.batch_var) {
        *r = keep * *r + m * b;
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = cache.xhat.dims4()?;
    grad_out.expect_same_shape(&cache.xhat)?;
    let hw = h * w;
    let count = T::from_usize(n * hw).unwrap();
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] = dgamma[ch] + dy[i] * xh[i];
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    let mut dx = Tensor::zeros(cache.xhat.shape().to_vec());
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch];
            let s = cache.inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx.data_mut()[i] = match cache.mode {
                    Mode::Eval => dy[i] * g * s,
                    // dx = g*s/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                    Mode::Train => g * s * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count),
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        beta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_channel_passes_through() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = batchnorm2d(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), &[0.0], &[1.0], Mode::Train, BN_EPS)
            .unwrap();
        let shrink = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * shrink).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], 2.0, &mut rng);
        let beta = Tensor::from_vec(vec![3], vec![0.5, -1.0, 3.0]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = batchnorm2d(&x, &Tensor::zeros(vec![3]), &beta, &[0.0; 3], &[1.0; 3], mode, BN_EPS).unwrap();
            for (i, &v) in y.data().iter().enumerate() {
                assert_eq!(v, beta.data()[(i / 16) % 3]);
            }
        }
    }

    #[test]
    fn train_mode_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(vec![4, 2, 6, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let gamma = Tensor::from_vec(vec![2], vec![2.0, 0.5]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![-1.0, 4.0]).unwrap();
        let (y, cache) = batchnorm2d(&x, &gamma, &beta, &[0.0; 2], &[1.0; 2], Mode::Train, 0.0).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|b| (0..30).map(move |i| (b, i))).map(|(b, i)| y.data()[(b * 2 + ch) * 30 + i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - beta.data()[ch]).abs() < 1e-5);
            assert!((std - gamma.data()[ch]).abs() < 1e-5);
        }
        let mut rm = [0.0; 2];
        let mut rv = [1.0; 2];
        update_running_stats(&cache, &mut rm, &mut rv, BN_MOMENTUM);
        assert!((rm[0] - 0.1 * cache.batch_mean[0]).abs() < 1e-12);
        assert!((rv[1] - (0.9 + 0.1 * cache.batch_var[1])).abs() < 1e-12);
    }

    #[test]
    fn single_constant_sample_is_guarded() {
        let x = Tensor::<f32>::full(vec![1, 1, 1, 1], 3.0);
        let (y, _) = batchnorm2d(&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1]), &[0.0], &[1.0], Mode::Train, BN_EPS).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn affine_length_checked() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 2, 2]);
        let err = batchnorm2d(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![3]), &[0.0; 3], &[1.0; 3], Mode::Eval, BN_EPS);
        assert!(err.is_err());
    }
}
