use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer over a fixed-order parameter list.
pub struct Adam<E: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// One update. `params` and `grads` must match the construction order.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1 = E::from_f64c(self.beta1);
        let b2 = E::from_f64c(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64c(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = E::from_f64c(1.0 - self.beta2.powi(self.step as i32));
        let lr = E::from_f64c(self.lr);
        let eps = E::from_f64c(self.eps);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !g.all_finite() {
                return Err(Error::Diverged("non-finite gradient in optimizer step".into()));
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2
        let mut x = Tensor::scalar(0.0f64);
        let mut opt = Adam::new(0.1, &[vec![1, 1]]);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (x.as_scalar() - 3.0));
            opt.step(&mut [&mut x], &[g]).unwrap();
        }
        assert!((x.as_scalar() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_nan_gradient() {
        let mut x = Tensor::scalar(0.0f64);
        let mut opt = Adam::new(0.1, &[vec![1, 1]]);
        assert!(opt.step(&mut [&mut x], &[Tensor::scalar(f64::NAN)]).is_err());
    }
}
