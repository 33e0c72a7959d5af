//! Reverse-mode differentiable array core.
//!
//! A [`Tape`] records primitive applications during the forward pass; calling
//! [`Tape::backward`] on a scalar output propagates gradients to every leaf.
//! Training runs in `f32`; the gradient-check harness ([`gradcheck`])
//! instantiates the same ops in `f64` and compares analytic gradients against
//! central finite differences.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::gradcheck;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Numerically stable softmax of one logit vector.
pub fn softmax<E: Scalar>(logits: &[E]) -> Result<Vec<E>> {
    if logits.is_empty() {
        return Err(Error::Contract("softmax of empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input contains NaN/Inf".into()));
    }
    Ok(kernels::softmax_unchecked(logits))
}

/// Cross-entropy −log softmax(logits)[target], stable under large logits.
pub fn cross_entropy<E: Scalar>(logits: &[E], target: usize) -> Result<E> {
    if target >= logits.len() {
        return Err(Error::Index(format!(
            "cross_entropy target {} out of range for {} logits",
            target,
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("cross_entropy input contains NaN/Inf".into()));
    }
    Ok(kernels::cross_entropy_unchecked(logits, target))
}

/// D_KL(p ‖ q) = Σ pᵢ ln(pᵢ/qᵢ) with q clamped at 1e-12.
pub fn kl_divergence<E: Scalar>(p: &[E], q: &[E]) -> Result<E> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let one = E::from_f64c(1.0);
    let tol = E::from_f64c(1e-5);
    let sp = p.iter().copied().fold(E::zero(), |a, b| a + b);
    let sq = q.iter().copied().fold(E::zero(), |a, b| a + b);
    if (sp - one).abs() > tol || (sq - one).abs() > tol {
        return Err(Error::Contract("kl_divergence inputs must sum to 1".into()));
    }
    Ok(kernels::kl_divergence_unchecked(p, q))
}

/// Mean squared error between two equal-length vectors.
pub fn mse<E: Scalar>(a: &[E], b: &[E]) -> Result<E> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "mse length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(kernels::mse_unchecked(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0f64, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_analytic() {
        let p = softmax(&[0.0f64, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let v = [0.3f64, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[] as &[f64]).is_err());
    }

    #[test]
    fn softmax_large_magnitude_sums_to_one() {
        let p = softmax(&[1e4f64, -1e4, 5e3, 0.0]).unwrap();
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn cross_entropy_analytic() {
        let l = cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_no_overflow() {
        let l = cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(l.is_finite());
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_out_of_range() {
        assert!(cross_entropy(&[0.0f64, 0.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_matches_softmax_sum_oracle() {
        // Oracle: direct summation of exp terms, then -log of the target prob.
        let mut state = 0x12345u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for t in 0..10 {
            let logits: Vec<f64> = (0..10).map(|_| next()).collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            let oracle = -(logits[t].exp() / z).ln();
            let got = cross_entropy(&logits, t).unwrap();
            assert!((got - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_identity_and_analytic() {
        assert!(kl_divergence(&[0.3f64, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-12);
        let d = kl_divergence(&[0.5f64, 0.5], &[0.25, 0.75]).unwrap();
        assert!((d - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_elementwise_oracle() {
        let mut state = 0x9e3779b9u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 + 0.01
        };
        for _ in 0..20 {
            let mut p: Vec<f64> = (0..100).map(|_| next()).collect();
            let mut q: Vec<f64> = (0..100).map(|_| next()).collect();
            let sp: f64 = p.iter().sum();
            let sq: f64 = q.iter().sum();
            p.iter_mut().for_each(|x| *x /= sp);
            q.iter_mut().for_each(|x| *x /= sq);
            let oracle: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
            let got = kl_divergence(&p, &q).unwrap();
            assert!((got - oracle).abs() < 1e-6);
            assert!(got >= -1e-12);
        }
    }

    #[test]
    fn kl_length_mismatch() {
        assert!(kl_divergence(&[1.0f64], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mse_cases() {
        assert!(mse(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((mse(&[1.0f64, 1.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(mse(&[1.0f64], &[1.0, 2.0]).is_err());
        // symmetry + loop oracle
        let a = [0.1f64, -2.0, 3.5, 0.0];
        let b = [1.0f64, 2.0, -0.5, 4.0];
        let mut oracle = 0.0;
        for i in 0..4 {
            oracle += (a[i] - b[i]).powi(2);
        }
        oracle /= 4.0;
        assert!((mse(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!((mse(&a, &b).unwrap() - mse(&b, &a).unwrap()).abs() < 1e-12);
    }
}
