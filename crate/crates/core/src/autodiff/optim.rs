use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;
use super::Scalar;

/// A named trainable tensor with its optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, m, v, step: 0 }
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
            step: self.step,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config }
    }

    /// One update of `param` with gradient `grad` at learning rate `lr`:
    /// `θ ← θ(1 − lr·λ)`, then the bias-corrected Adam step.
    pub fn step<T: Scalar>(&self, param: &mut Parameter<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if grad.shape() != param.value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} for parameter {} of shape {:?}",
                grad.shape(),
                param.name,
                param.value.shape()
            )));
        }
        let c = &self.config;
        param.step += 1;
        let t = param.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = T::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let decay = f(1.0 - lr * c.weight_decay);
        let step_size = f(lr / bc1);
        let inv_sqrt_bc2 = f(1.0 / bc2.sqrt());
        let one = T::one();
        let values = param.value.data_mut();
        let (m, v) = (param.m.data_mut(), param.v.data_mut());
        for (((p, m), v), &g) in values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
            *p *= decay;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - step_size * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
        }
        if !param.value.is_finite() {
            return Err(Error::Numeric(format!("parameter {} became non-finite", param.name)));
        }
        Ok(())
    }
}

/// `lr₀ · decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-a..=a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = Parameter::new("w", Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap());
        opt.step(&mut p, &Tensor::new(vec![2], vec![0.5, -3.0]).unwrap(), 0.01).unwrap();
        assert!((p.value.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.value.data()[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn schedule_and_init_bounds() {
        assert!((lr_at_epoch(5e-4, 0.98, 10) - 5e-4 * 0.98f64.powi(10)).abs() < 1e-18);
        assert_eq!(lr_at_epoch(1.0, 0.5, 0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f32> = xavier_uniform(&[64, 32], 32, 64, &mut rng);
        let a = (6.0f32 / 96.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= a));
        assert!(w.data().iter().any(|v| v.abs() > a * 0.9));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Parameter::new("w", Tensor::<f32>::zeros(&[3]));
        let r = AdamW::default().step(&mut p, &Tensor::zeros(&[2]), 0.1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
