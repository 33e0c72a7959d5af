//! Finite-difference verification of the tape's analytic gradients.
//!
//! Runs in `f64` only: central differences at ε=1e-4 carry ~1e-8 truncation
//! error there, comfortably inside the 1e-3 acceptance tolerance.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max relative error between analytic and central-difference gradients of a
/// scalar-valued function over the given input tensors.
///
/// Relative error uses an absolute floor of 1e-3 in the denominator so that
/// near-zero gradient coordinates are judged on absolute error.
pub fn gradcheck<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = pts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        if out.value().len() != 1 {
            return Err(Error::Contract("gradcheck target must be scalar-valued".into()));
        }
        Ok(out.scalar_value())
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    if out.value().len() != 1 {
        return Err(Error::Contract("gradcheck target must be scalar-valued".into()));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut max_rel: f64 = 0.0;
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let orig = point.data[ci];
            work[pi].data[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[pi].data[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Panics with context if `gradcheck` exceeds `tol`.
pub fn assert_gradcheck<F>(name: &str, f: F, points: &[Tensor<f64>], eps: f64, tol: f64)
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let err = gradcheck(&f, points, eps).unwrap_or_else(|e| panic!("gradcheck {name}: {e}"));
    assert!(err < tol, "gradcheck {name}: max relative error {err:.3e} >= {tol:.1e}");
}

/// Convenience: `n` random tensors of the given shape from a seeded stream.
pub fn random_points(shapes: &[Vec<usize>], scale: f64, seed: u64) -> Vec<Tensor<f64>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| Tensor::<f64>::randn(s.clone(), scale, &mut rng)).collect()
}

/// Normalize a tensor's entries into a strictly positive probability vector.
pub fn to_prob_vector(t: &Tensor<f64>) -> Tensor<f64> {
    let exps: Vec<f64> = t.data.iter().map(|x| x.exp() + 0.01).collect();
    let z: f64 = exps.iter().sum();
    Tensor::new(t.shape.clone(), exps.into_iter().map(|x| x / z).collect())
}
