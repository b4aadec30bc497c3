//! ADAM optimizer with bias correction.

use crate::error::{FinoError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(param_shapes: &[Vec<usize>], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.first_moment[i], &self.second_moment[i])
    }

    /// Restore moment arrays (checkpoint resume). Shapes must match.
    pub fn restore_moments(&mut self, i: usize, m: Tensor, v: Tensor) -> Result<()> {
        if m.shape() != self.first_moment[i].shape() || v.shape() != self.second_moment[i].shape() {
            return Err(FinoError::shape(
                "adam_restore",
                format!("moment {i} shape mismatch"),
            ));
        }
        self.first_moment[i] = m;
        self.second_moment[i] = v;
        Ok(())
    }

    /// One ADAM update over all parameters. `grads[i]` pairs with
    /// `params[i]`; `names` is used only for diagnostics.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[String],
    ) -> Result<()> {
        assert_eq!(params.len(), self.first_moment.len());
        assert_eq!(params.len(), grads.len());
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(FinoError::NonFinite(format!(
                    "gradient of parameter {}",
                    names.get(i).map(String::as_str).unwrap_or("?")
                )));
            }
            if g.shape() != params[i].shape() {
                return Err(FinoError::shape(
                    "adam_step",
                    format!("gradient/parameter shape mismatch at {i}"),
                ));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut st = AdamState::new(&[vec![2]], 0.1);
        for _ in 0..5 {
            st.step(
                &mut [&mut p],
                &[Tensor::zeros(&[2])],
                &["p".to_string()],
            )
            .unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Hand-computed oracle: p=0, g=1, lr=0.1, defaults.
        // m̂ = 1, v̂ = 1 -> Δ = lr · 1/(1 + ε) ≈ 0.1
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut st = AdamState::new(&[vec![1]], 0.1);
        st.step(
            &mut [&mut p],
            &[Tensor::new(vec![1], vec![1.0]).unwrap()],
            &["p".to_string()],
        )
        .unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut b = a.clone();
        let g = Tensor::new(vec![2], vec![0.3, 0.7]).unwrap();
        let mut st = AdamState::new(&[vec![2], vec![2]], 4e-4);
        for _ in 0..10 {
            st.step(
                &mut [&mut a, &mut b],
                &[g.clone(), g.clone()],
                &["a".to_string(), "b".to_string()],
            )
            .unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_grad_rejected_with_name() {
        let mut p = Tensor::zeros(&[1]);
        let mut st = AdamState::new(&[vec![1]], 0.1);
        let err = st
            .step(
                &mut [&mut p],
                &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()],
                &["block0.phi1.weight".to_string()],
            )
            .unwrap_err();
        assert!(err.to_string().contains("block0.phi1.weight"));
    }
}
