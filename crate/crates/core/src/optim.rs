//! AdamW with an exponentially decaying learning rate.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every step.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 1e-4, decay: 1.0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-2 }
    }
}

struct Moments<T> {
    first: Tensor<T>,
    second: Tensor<T>,
}

pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.learning_rate)));
        }
        if !(config.decay > 0.0 && config.decay <= 1.0) {
            return Err(Error::Config(format!("decay factor must lie in (0, 1], got {}", config.decay)));
        }
        Ok(AdamW { config, step: 0, moments: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next step will use: `base · decay^t`.
    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate * self.config.decay.powi(self.step as i32)
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// The whole step is rejected, leaving parameters and state untouched,
    /// if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return shape_err(format!("parameter {name} is {:?} but its gradient is {:?}", p.shape(), g.shape()));
            }
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        let lr = self.learning_rate();
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let shrink = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        let (lr_t, bc1_t, bc2_t, eps) =
            (T::from_f64_lossy(lr), T::from_f64_lossy(bc1), T::from_f64_lossy(bc2), T::from_f64_lossy(c.epsilon));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros(g.shape().to_vec()),
                second: Tensor::zeros(g.shape().to_vec()),
            });
            let pd = p.data_mut();
            let md = m.first.data_mut();
            let vd = m.second.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let mhat = md[i] / bc1_t;
                let vhat = vd[i] / bc2_t;
                pd[i] = pd[i] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Shapes of the stored moment tensors, for invariant checks.
    pub fn moment_shapes(&self) -> BTreeMap<String, (Vec<usize>, Vec<usize>)> {
        self.moments
            .iter()
            .map(|(k, m)| (k.clone(), (m.first.shape().to_vec(), m.second.shape().to_vec())))
            .collect()
    }
}
