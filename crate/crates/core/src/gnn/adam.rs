use super::{ModelParams, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dims: &[usize], config: AdamConfig) -> Self {
        AdamState {
            config,
            m: ModelParams::zeros(dims),
            v: ModelParams::zeros(dims),
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(Error::shape(
                "adam: params, grads and state differ in shape",
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        let tensors = params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> ModelParams<f32> {
        let mut p = ModelParams::zeros(&[1, 1]);
        p.layers[0].weight.as_mut_slice()[0] = v;
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = ModelParams::<f32>::glorot(&[3, 2], 1);
        let before = p.clone();
        let mut s = AdamState::new(&p.dims(), AdamConfig::default());
        s.step(&mut p, &ModelParams::zeros(&[3, 2])).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.5);
        let mut s = AdamState::new(&p.dims(), AdamConfig::with_lr(0.001));
        s.step(&mut p, &scalar(1.0)).unwrap();
        let delta = p.layers[0].weight.as_slice()[0] - 0.5;
        assert!((delta + 0.001).abs() < 1e-7, "{delta}");
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut p = ModelParams::<f32>::glorot(&[4, 3], 5);
            let g = ModelParams::<f32>::glorot(&[4, 3], 6);
            let mut s = AdamState::new(&p.dims(), AdamConfig::default());
            for _ in 0..10 {
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        let bits = |p: &ModelParams<f32>| -> Vec<u32> {
            p.tensors().flatten().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ModelParams::<f32>::zeros(&[2, 2]);
        let mut s = AdamState::new(&[2, 2], AdamConfig::default());
        assert!(s.step(&mut p, &ModelParams::zeros(&[2, 3])).is_err());
    }
}
