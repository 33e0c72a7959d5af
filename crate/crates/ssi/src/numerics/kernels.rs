//! Raw compute kernels shared by the eager API and the tape ops.
//!
//! Matrix multiplies are data-parallel over output rows when the `parallel`
//! feature is enabled. Each output row is computed independently, so results
//! are bit-identical to the sequential kernels for any thread count.

use super::scalar::Scalar;
use super::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const PAR_MIN_FLOPS: usize = 1 << 15;

fn mm_row<E: Scalar>(out_row: &mut [E], a_row: &[E], b: &Tensor<E>) {
    let n = out_row.len();
    let k = a_row.len();
    for x in out_row.iter_mut() {
        *x = E::zero();
    }
    for (kk, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b.data[kk * n..(kk + 1) * n];
        for j in 0..n {
            out_row[j] += av * b_row[j];
        }
    }
}

/// C = A · B for (m×k)·(k×n).
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_FLOPS {
        out.data
            .par_chunks_mut(n)
            .zip(a.data.par_chunks(k))
            .for_each(|(orow, arow)| mm_row(orow, arow, b));
        return out;
    }
    matmul_seq_into(&mut out, a, b);
    out
}

/// Sequential reference for `matmul`; also the fallback when the
/// `parallel` feature is off.
pub fn matmul_seq<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(vec![a.rows(), b.cols()]);
    matmul_seq_into(&mut out, a, b);
    out
}

fn matmul_seq_into<E: Scalar>(out: &mut Tensor<E>, a: &Tensor<E>, b: &Tensor<E>) {
    let (k, n) = (a.cols(), b.cols());
    for (orow, arow) in out.data.chunks_mut(n).zip(a.data.chunks(k)) {
        mm_row(orow, arow, b);
    }
}

fn mm_nt_row<E: Scalar>(out_row: &mut [E], a_row: &[E], b: &Tensor<E>) {
    let k = a_row.len();
    for (j, x) in out_row.iter_mut().enumerate() {
        let b_row = &b.data[j * k..(j + 1) * k];
        let mut acc = E::zero();
        for kk in 0..k {
            acc += a_row[kk] * b_row[kk];
        }
        *x = acc;
    }
}

/// C = A · Bᵀ for (m×k)·(n×k)ᵀ.
pub fn matmul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.cols(), b.cols(), "matmul_nt inner dimension mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(vec![m, n]);
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_FLOPS {
        out.data
            .par_chunks_mut(n)
            .zip(a.data.par_chunks(k))
            .for_each(|(orow, arow)| mm_nt_row(orow, arow, b));
        return out;
    }
    for (orow, arow) in out.data.chunks_mut(n).zip(a.data.chunks(k)) {
        mm_nt_row(orow, arow, b);
    }
    out
}

/// C = Aᵀ · B for (k×m)ᵀ·(k×n).
pub fn matmul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    assert_eq!(a.rows(), b.rows(), "matmul_tn inner dimension mismatch");
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    // Accumulate rank-1 updates; rows of the output are not independent here,
    // so keep it sequential and let the outer loop stay deterministic.
    for kk in 0..k {
        let a_row = &a.data[kk * m..(kk + 1) * m];
        let b_row = &b.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * b_row[j];
            }
        }
    }
    out
}

pub fn softmax_unchecked<E: Scalar>(logits: &[E]) -> Vec<E> {
    let mx = logits.iter().copied().fold(logits[0], |a, b| a.max_s(b));
    let mut out: Vec<E> = logits.iter().map(|&x| (x - mx).exp()).collect();
    let z: E = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v = *v / z;
    }
    out
}

pub fn log_softmax_unchecked<E: Scalar>(logits: &[E]) -> Vec<E> {
    let mx = logits.iter().copied().fold(logits[0], |a, b| a.max_s(b));
    let z: E = logits.iter().map(|&x| (x - mx).exp()).sum();
    let lz = z.ln() + mx;
    logits.iter().map(|&x| x - lz).collect()
}

pub fn cross_entropy_unchecked<E: Scalar>(logits: &[E], target: usize) -> E {
    let mx = logits.iter().copied().fold(logits[0], |a, b| a.max_s(b));
    let z: E = logits.iter().map(|&x| (x - mx).exp()).sum();
    z.ln() + mx - logits[target]
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn kl_divergence_unchecked<E: Scalar>(p: &[E], q: &[E]) -> E {
    let floor = E::from_f64c(PROB_FLOOR);
    let mut acc = E::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        let pc = pi.max_s(floor);
        let qc = qi.max_s(floor);
        if pi > E::zero() {
            acc += pi * (pc / qc).ln();
        }
    }
    acc
}

pub fn mse_unchecked<E: Scalar>(a: &[E], b: &[E]) -> E {
    let n = E::from_f64c(a.len() as f64);
    let mut acc = E::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    acc / n
}
