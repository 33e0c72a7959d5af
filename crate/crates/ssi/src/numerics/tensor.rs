use super::scalar::Scalar;
use rand::Rng;

/// Dense row-major tensor. The tape works almost entirely with 2-D
/// (rows × cols) tensors; scalars are 1×1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    pub fn row_vec(data: Vec<E>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Gaussian init via Box-Muller, deterministic for a fixed RNG stream.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = (-2.0 * u.ln()).sqrt() * v.cos();
            data.push(E::from_f64c(z * std));
        }
        Tensor { shape, data }
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> E {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[E] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn transposed(&self) -> Tensor<E> {
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![E::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = self.data[r * n + c];
            }
        }
        Tensor::matrix(n, m, data)
    }

    pub fn as_scalar(&self) -> E {
        assert_eq!(self.data.len(), 1, "expected scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Lossy element-type conversion (f32 ↔ f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64c(x.to_f64c())).collect(),
        }
    }
}
