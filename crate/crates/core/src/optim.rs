//! AdamW with decoupled weight decay.
//!
//! Moments live in the parameter dtype; bias-correction scalars are computed
//! in f64 once per step so long runs in f32 don't lose the correction to
//! rounding. `lr` and `wd` arrive per step — schedules stay outside.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    decay: Vec<bool>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    /// `decay_filter` decides per parameter name whether weight decay applies
    /// (biases and norm gains conventionally opt out).
    pub fn new(params: &ParamSet<T>, decay_filter: impl Fn(&str) -> bool) -> Self {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut decay = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            m.push(Tensor::zeros(t.shape().to_vec()));
            v.push(Tensor::zeros(t.shape().to_vec()));
            decay.push(decay_filter(name));
        }
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, decay, steps: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// First and second moments, in parameter order. Checkpointing reads
    /// these; nothing else should.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuild an optimizer mid-run from checkpointed moments.
    pub fn restore(
        params: &ParamSet<T>,
        decay_filter: impl Fn(&str) -> bool,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        steps: u64,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Param(format!(
                "moment count {}/{} does not match {} parameters",
                m.len(),
                v.len(),
                params.len()
            )));
        }
        for (k, (name, p)) in params.iter().enumerate() {
            if m[k].shape() != p.shape() || v[k].shape() != p.shape() {
                return Err(Error::Param(format!("moment shape mismatch at {name:?}")));
            }
        }
        let decay = params.names().map(|n| decay_filter(n)).collect();
        Ok(Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, decay, steps })
    }

    /// One update. `grads` must line up with `params.iter()` order.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Param(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::from_f64(lr / bc1);
        let denom_scale = T::from_f64(1.0 / bc2.sqrt());
        let b1 = T::from_f64(self.beta1);
        let b1c = T::from_f64(1.0 - self.beta1);
        let b2 = T::from_f64(self.beta2);
        let b2c = T::from_f64(1.0 - self.beta2);
        let eps = T::from_f64(self.eps);

        for (k, (name, p)) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Param(format!(
                    "gradient shape {:?} does not match parameter {name:?} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let decay_here = if self.decay[k] { T::from_f64(lr * wd) } else { T::ZERO };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                m[i] = b1 * m[i] + b1c * gd[i];
                v[i] = b2 * v[i] + b2c * gd[i] * gd[i];
                let denom = v[i].sqrt() * denom_scale + eps;
                pd[i] = pd[i] - decay_here * pd[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![1, value.len()], value.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_is_signed_unit_step_times_lr() {
        // after one update m-hat = g and sqrt(v-hat) = |g|, so the step is
        // lr * g / (|g| + eps)
        let mut params = one_param(&[1.0, -4.0]);
        let mut opt = AdamW::new(&params, |_| true);
        let g = Tensor::from_vec(vec![1, 2], vec![2.0, -0.5]).unwrap();
        opt.step(&mut params, &[g], 0.1, 0.0).unwrap();
        let w = params.get("w").unwrap();
        assert!((w.data()[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((w.data()[1] - (-4.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_only_decay() {
        let mut params = one_param(&[2.0]);
        let mut opt = AdamW::new(&params, |_| true);
        let g = Tensor::zeros(vec![1, 1]);
        opt.step(&mut params, &[g], 0.5, 0.1).unwrap();
        // moments stay zero, so the adaptive term vanishes and p <- p(1 - lr wd)
        assert_eq!(params.get("w").unwrap().data()[0], 2.0 * (1.0 - 0.5 * 0.1));
    }

    #[test]
    fn decay_filter_exempts_parameters() {
        let mut params = ParamSet::new();
        params.insert("layer.w", Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        params.insert("layer.b", Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&params, |name| !name.ends_with(".b"));
        let g = Tensor::zeros(vec![1, 1]);
        opt.step(&mut params, &[g.clone(), g], 0.5, 0.1).unwrap();
        assert!(params.get("layer.w").unwrap().data()[0] < 2.0);
        assert_eq!(params.get("layer.b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize 0.5*(w - 3)^2; gradient is (w - 3)
        let mut params = one_param(&[0.0]);
        let mut opt = AdamW::new(&params, |_| true);
        for _ in 0..2000 {
            let w = params.get("w").unwrap().data()[0];
            let g = Tensor::from_vec(vec![1, 1], vec![w - 3.0]).unwrap();
            opt.step(&mut params, &[g], 0.05, 0.0).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let run = || {
            let mut params = one_param(&[1.0, 2.0, 3.0]);
            let mut opt = AdamW::new(&params, |_| true);
            for s in 0..50 {
                let g = Tensor::from_vec(
                    vec![1, 3],
                    vec![(s as f64).sin(), (s as f64).cos(), 0.1],
                )
                .unwrap();
                opt.step(&mut params, &[g], 0.01, 0.04).unwrap();
            }
            params
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn gradient_count_mismatch_is_an_error() {
        let mut params = one_param(&[1.0]);
        let mut opt = AdamW::new(&params, |_| true);
        assert!(opt.step(&mut params, &[], 0.1, 0.0).is_err());
    }
}
