//! Dynamically recorded reverse-mode differentiation graph.
//!
//! Ops append nodes to the [`Tape`] during the forward pass. Each node keeps
//! its forward value plus a closure that maps the output gradient to parent
//! gradient contributions. [`Tape::backward`] visits nodes once in reverse
//! topological (= insertion) order; calling it a second time without
//! re-running the forward pass is an error.

use super::kernels;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use std::cell::RefCell;
use std::rc::Rc;

type BackFn<E> = Box<dyn Fn(&Tensor<E>, &[&Tensor<E>], &Tensor<E>) -> Vec<Tensor<E>>>;

struct Node<E: Scalar> {
    value: Tensor<E>,
    parents: Vec<usize>,
    back: Option<BackFn<E>>,
}

struct Inner<E: Scalar> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

pub struct Tape<E: Scalar> {
    inner: Rc<RefCell<Inner<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a tape.
pub struct Var<E: Scalar> {
    tape: Tape<E>,
    idx: usize,
}

impl<E: Scalar> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var { tape: self.tape.clone(), idx: self.idx }
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, v: &Var<E>) -> Option<&Tensor<E>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the leaf did not influence the output.
    pub fn get_or_zeros(&self, v: &Var<E>) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape()),
        }
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(Inner { nodes: Vec::new(), backward_done: false })) }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Register an input/parameter node.
    pub fn leaf(&self, value: Tensor<E>) -> Var<E> {
        self.push(value, vec![], None)
    }

    /// Alias for [`Tape::leaf`]; constants simply never get stepped.
    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(value)
    }

    fn push(&self, value: Tensor<E>, parents: Vec<usize>, back: Option<BackFn<E>>) -> Var<E> {
        debug_assert!(value.all_finite(), "non-finite forward value");
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, parents, back });
        Var { tape: self.clone(), idx: inner.nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar output. Consumes the tape's single
    /// backward budget.
    pub fn backward(&self, root: &Var<E>) -> Result<Gradients<E>> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.backward_done {
                return Err(Error::Contract(
                    "backward called twice on one tape without re-running forward".into(),
                ));
            }
            inner.backward_done = true;
        }
        let inner = self.inner.borrow();
        if inner.nodes[root.idx].value.len() != 1 {
            return Err(Error::Contract("backward root must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = Vec::with_capacity(inner.nodes.len());
        grads.resize_with(inner.nodes.len(), || None);
        grads[root.idx] = Some(Tensor::scalar(E::one()));

        for idx in (0..=root.idx).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let node = &inner.nodes[idx];
            let Some(back) = node.back.as_ref() else { continue };
            let parent_vals: Vec<&Tensor<E>> =
                node.parents.iter().map(|&p| &inner.nodes[p].value).collect();
            let g = grads[idx].as_ref().unwrap();
            let contributions = back(g, &parent_vals, &node.value);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contributions) {
                debug_assert!(c.all_finite(), "non-finite gradient");
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<E: Scalar> Var<E> {
    pub fn value(&self) -> Tensor<E> {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Handle to the tape this var lives on (for pushing constants).
    pub fn tape(&self) -> Tape<E> {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape.clone()
    }

    pub fn scalar_value(&self) -> E {
        self.tape.inner.borrow().nodes[self.idx].value.as_scalar()
    }

    fn with<T>(&self, f: impl FnOnce(&Tensor<E>) -> T) -> T {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    fn with2<T>(&self, other: &Var<E>, f: impl FnOnce(&Tensor<E>, &Tensor<E>) -> T) -> T {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.idx].value, &inner.nodes[other.idx].value)
    }

    pub fn add(&self, other: &Var<E>) -> Var<E> {
        let out = self.with2(other, |a, b| a.zip_map(b, |x, y| x + y));
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&self, other: &Var<E>) -> Var<E> {
        let out = self.with2(other, |a, b| a.zip_map(b, |x, y| x - y));
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|x| -x)])),
        )
    }

    pub fn mul(&self, other: &Var<E>) -> Var<E> {
        let out = self.with2(other, |a, b| a.zip_map(b, |x, y| x * y));
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g, pv, _| {
                vec![g.zip_map(pv[1], |x, y| x * y), g.zip_map(pv[0], |x, y| x * y)]
            })),
        )
    }

    pub fn scale(&self, c: E) -> Var<E> {
        let out = self.with(|a| a.map(|x| x * c));
        self.tape
            .push(out, vec![self.idx], Some(Box::new(move |g, _, _| vec![g.map(|x| x * c)])))
    }

    pub fn add_scalar(&self, c: E) -> Var<E> {
        let out = self.with(|a| a.map(|x| x + c));
        self.tape.push(out, vec![self.idx], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    /// Add a constant tensor (e.g. an additive attention mask).
    pub fn add_const(&self, t: &Tensor<E>) -> Var<E> {
        let out = self.with(|a| a.zip_map(t, |x, y| x + y));
        self.tape.push(out, vec![self.idx], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, t: &Tensor<E>) -> Var<E> {
        let tc = t.clone();
        let out = self.with(|a| a.zip_map(t, |x, y| x * y));
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, _, _| vec![g.zip_map(&tc, |x, y| x * y)])),
        )
    }

    pub fn matmul(&self, other: &Var<E>) -> Var<E> {
        let out = self.with2(other, kernels::matmul);
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g, pv, _| {
                vec![kernels::matmul_nt(g, pv[1]), kernels::matmul_tn(pv[0], g)]
            })),
        )
    }

    /// self · otherᵀ.
    pub fn matmul_nt(&self, other: &Var<E>) -> Var<E> {
        let out = self.with2(other, kernels::matmul_nt);
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g, pv, _| {
                vec![kernels::matmul(g, pv[1]), kernels::matmul_tn(g, pv[0])]
            })),
        )
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Var<E> {
        let out = self.with(|t| t.transposed());
        self.tape.push(out, vec![self.idx], Some(Box::new(|g, _, _| vec![g.transposed()])))
    }

    /// Broadcast-add a 1×n bias row to every row.
    pub fn add_row(&self, bias: &Var<E>) -> Var<E> {
        let out = self.with2(bias, |a, b| {
            assert_eq!(a.cols(), b.cols(), "add_row width mismatch");
            let mut o = a.clone();
            let n = a.cols();
            for row in o.data.chunks_mut(n) {
                for (x, &bv) in row.iter_mut().zip(&b.data) {
                    *x += bv;
                }
            }
            o
        });
        self.tape.push(
            out,
            vec![self.idx, bias.idx],
            Some(Box::new(|g, _, _| {
                let n = g.cols();
                let mut db = Tensor::zeros(vec![1, n]);
                for row in g.data.chunks(n) {
                    for (acc, &x) in db.data.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![g.clone(), db]
            })),
        )
    }

    /// Gather rows by index (embedding lookup). Backward scatter-adds, so
    /// repeated indices accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<E> {
        let idxs = indices.to_vec();
        let out = self.with(|t| {
            let n = t.cols();
            let mut data = Vec::with_capacity(indices.len() * n);
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(indices.len(), n, data)
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, pv, _| {
                let n = pv[0].cols();
                let mut dt = Tensor::zeros(pv[0].shape.clone());
                for (r, &i) in idxs.iter().enumerate() {
                    let dst = &mut dt.data[i * n..(i + 1) * n];
                    for (acc, &x) in dst.iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                vec![dt]
            })),
        )
    }

    pub fn row(&self, r: usize) -> Var<E> {
        self.slice_rows(r, r + 1)
    }

    pub fn slice_rows(&self, lo: usize, hi: usize) -> Var<E> {
        let out = self.with(|t| {
            let n = t.cols();
            Tensor::matrix(hi - lo, n, t.data[lo * n..hi * n].to_vec())
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, pv, _| {
                let n = pv[0].cols();
                let mut dt = Tensor::zeros(pv[0].shape.clone());
                dt.data[lo * n..hi * n].copy_from_slice(&g.data);
                vec![dt]
            })),
        )
    }

    pub fn slice_cols(&self, lo: usize, hi: usize) -> Var<E> {
        let out = self.with(|t| {
            let (m, n) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(m * (hi - lo));
            for r in 0..m {
                data.extend_from_slice(&t.data[r * n + lo..r * n + hi]);
            }
            Tensor::matrix(m, hi - lo, data)
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, pv, _| {
                let (m, n) = (pv[0].rows(), pv[0].cols());
                let w = hi - lo;
                let mut dt = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    dt.data[r * n + lo..r * n + hi].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                vec![dt]
            })),
        )
    }

    pub fn concat_cols(parts: &[Var<E>]) -> Var<E> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let inner = tape.inner.borrow();
        let m = inner.nodes[parts[0].idx].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| inner.nodes[p.idx].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(inner.nodes[p.idx].value.row(r));
            }
        }
        drop(inner);
        let out = Tensor::matrix(m, total, data);
        let widths_b = widths.clone();
        tape.push(
            out,
            parts.iter().map(|p| p.idx).collect(),
            Some(Box::new(move |g, pv, _| {
                let m = g.rows();
                let mut grads: Vec<Tensor<E>> =
                    pv.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
                for r in 0..m {
                    let mut off = 0;
                    for (k, &w) in widths_b.iter().enumerate() {
                        let src = &g.row(r)[off..off + w];
                        grads[k].data[r * w..(r + 1) * w].copy_from_slice(src);
                        off += w;
                    }
                }
                grads
            })),
        )
    }

    pub fn concat_rows(parts: &[Var<E>]) -> Var<E> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let inner = tape.inner.borrow();
        let n = inner.nodes[parts[0].idx].value.cols();
        let heights: Vec<usize> = parts.iter().map(|p| inner.nodes[p.idx].value.rows()).collect();
        let total: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(total * n);
        for p in parts {
            data.extend_from_slice(&inner.nodes[p.idx].value.data);
        }
        drop(inner);
        let out = Tensor::matrix(total, n, data);
        let heights_b = heights.clone();
        tape.push(
            out,
            parts.iter().map(|p| p.idx).collect(),
            Some(Box::new(move |g, _, _| {
                let n = g.cols();
                let mut grads = Vec::with_capacity(heights_b.len());
                let mut off = 0;
                for &h in &heights_b {
                    grads.push(Tensor::matrix(h, n, g.data[off * n..(off + h) * n].to_vec()));
                    off += h;
                }
                grads
            })),
        )
    }

    pub fn softmax_rows(&self) -> Var<E> {
        let out = self.with(|t| {
            let n = t.cols();
            let mut o = t.clone();
            for row in o.data.chunks_mut(n) {
                let sm = kernels::softmax_unchecked(row);
                row.copy_from_slice(&sm);
            }
            o
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, _, y| {
                let n = y.cols();
                let mut dx = Tensor::zeros(y.shape.clone());
                for ((dxr, gr), yr) in
                    dx.data.chunks_mut(n).zip(g.data.chunks(n)).zip(y.data.chunks(n))
                {
                    let dot: E = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn log_softmax_rows(&self) -> Var<E> {
        let out = self.with(|t| {
            let n = t.cols();
            let mut o = t.clone();
            for row in o.data.chunks_mut(n) {
                let ls = kernels::log_softmax_unchecked(row);
                row.copy_from_slice(&ls);
            }
            o
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, _, y| {
                let n = y.cols();
                let mut dx = Tensor::zeros(y.shape.clone());
                for ((dxr, gr), yr) in
                    dx.data.chunks_mut(n).zip(g.data.chunks(n)).zip(y.data.chunks(n))
                {
                    let gsum: E = gr.iter().copied().sum();
                    for j in 0..n {
                        dxr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Row-wise layer normalization with learned 1×n gain and bias.
    pub fn layer_norm(&self, gain: &Var<E>, bias: &Var<E>, eps: f64) -> Var<E> {
        let epse = E::from_f64c(eps);
        let out = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let gm = &inner.nodes[gain.idx].value;
            let bt = &inner.nodes[bias.idx].value;
            let n = x.cols();
            let inv_n = E::from_f64c(1.0 / n as f64);
            let mut o = x.clone();
            for row in o.data.chunks_mut(n) {
                let mu: E = row.iter().copied().sum::<E>() * inv_n;
                let var: E = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() * inv_n;
                let sig = (var + epse).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mu) / sig * gm.data[j] + bt.data[j];
                }
            }
            o
        };
        self.tape.push(
            out,
            vec![self.idx, gain.idx, bias.idx],
            Some(Box::new(move |g, pv, _| {
                let x = pv[0];
                let gm = pv[1];
                let n = x.cols();
                let inv_n = E::from_f64c(1.0 / n as f64);
                let mut dx = Tensor::zeros(x.shape.clone());
                let mut dgain = Tensor::zeros(vec![1, n]);
                let mut dbias = Tensor::zeros(vec![1, n]);
                for ((dxr, gr), xr) in
                    dx.data.chunks_mut(n).zip(g.data.chunks(n)).zip(x.data.chunks(n))
                {
                    let mu: E = xr.iter().copied().sum::<E>() * inv_n;
                    let var: E = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() * inv_n;
                    let sig = (var + epse).sqrt();
                    let xhat: Vec<E> = xr.iter().map(|&v| (v - mu) / sig).collect();
                    // d/dxhat, plus gain/bias accumulation
                    let mut dxhat = vec![E::zero(); n];
                    for j in 0..n {
                        dgain.data[j] += gr[j] * xhat[j];
                        dbias.data[j] += gr[j];
                        dxhat[j] = gr[j] * gm.data[j];
                    }
                    let m1: E = dxhat.iter().copied().sum::<E>() * inv_n;
                    let m2: E = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<E>() * inv_n;
                    for j in 0..n {
                        dxr[j] = (dxhat[j] - m1 - xhat[j] * m2) / sig;
                    }
                }
                vec![dx, dgain, dbias]
            })),
        )
    }

    pub fn gelu(&self) -> Var<E> {
        let c = E::from_f64c((2.0 / std::f64::consts::PI).sqrt());
        let a = E::from_f64c(0.044715);
        let half = E::from_f64c(0.5);
        let out = self.with(|t| {
            t.map(|x| {
                let u = c * (x + a * x * x * x);
                half * x * (E::one() + u.tanh())
            })
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, pv, _| {
                vec![g.zip_map(pv[0], |gv, x| {
                    let u = c * (x + a * x * x * x);
                    let t = u.tanh();
                    let du = c * (E::one() + E::from_f64c(3.0) * a * x * x);
                    gv * (half * (E::one() + t) + half * x * (E::one() - t * t) * du)
                })]
            })),
        )
    }

    pub fn sigmoid(&self) -> Var<E> {
        let out = self.with(|t| t.map(|x| E::one() / (E::one() + (-x).exp())));
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, _, y| vec![g.zip_map(y, |gv, yv| gv * yv * (E::one() - yv))])),
        )
    }

    pub fn tanh_act(&self) -> Var<E> {
        let out = self.with(|t| t.map(|x| x.tanh()));
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, _, y| vec![g.zip_map(y, |gv, yv| gv * (E::one() - yv * yv))])),
        )
    }

    pub fn softplus(&self) -> Var<E> {
        let out = self.with(|t| {
            t.map(|x| x.max_s(E::zero()) + (E::one() + (-x.abs()).exp()).ln())
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, pv, _| {
                vec![g.zip_map(pv[0], |gv, x| gv / (E::one() + (-x).exp()))]
            })),
        )
    }

    pub fn recip(&self) -> Var<E> {
        let out = self.with(|t| t.map(|x| E::one() / x));
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, pv, _| vec![g.zip_map(pv[0], |gv, x| -gv / (x * x))])),
        )
    }

    /// Inverted-scaling dropout; call only on the training path.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Var<E> {
        assert!((0.0..1.0).contains(&p), "dropout prob must be in [0,1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = E::from_f64c(1.0 / (1.0 - p));
        let mask = self.with(|t| {
            let mut m = Tensor::zeros(t.shape.clone());
            for v in m.data.iter_mut() {
                if rng.gen_range(0.0..1.0f64) >= p {
                    *v = keep;
                }
            }
            m
        });
        let mask_b = mask.clone();
        let out = self.with(|t| t.zip_map(&mask, |x, m| x * m));
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, _, _| vec![g.zip_map(&mask_b, |gv, m| gv * m)])),
        )
    }

    pub fn sum_all(&self) -> Var<E> {
        let out = self.with(|t| Tensor::scalar(t.data.iter().copied().sum()));
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|g, pv, _| {
                let gv = g.as_scalar();
                vec![Tensor::full(pv[0].shape.clone(), gv)]
            })),
        )
    }

    pub fn mean_all(&self) -> Var<E> {
        let n = self.with(|t| t.len());
        self.sum_all().scale(E::from_f64c(1.0 / n as f64))
    }

    /// Mean cross-entropy over rows of a logits matrix.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Var<E> {
        let tgts = targets.to_vec();
        let out = self.with(|t| {
            assert_eq!(t.rows(), targets.len(), "one target per logit row");
            let n = t.cols();
            let mut acc = E::zero();
            for (row, &tg) in t.data.chunks(n).zip(targets) {
                assert!(tg < n, "cross_entropy target out of range");
                acc += kernels::cross_entropy_unchecked(row, tg);
            }
            Tensor::scalar(acc / E::from_f64c(targets.len() as f64))
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, pv, _| {
                let n = pv[0].cols();
                let scale = g.as_scalar() / E::from_f64c(tgts.len() as f64);
                let mut dx = Tensor::zeros(pv[0].shape.clone());
                for ((dxr, xr), &tg) in dx.data.chunks_mut(n).zip(pv[0].data.chunks(n)).zip(&tgts)
                {
                    let sm = kernels::softmax_unchecked(xr);
                    for j in 0..n {
                        let onehot = if j == tg { E::one() } else { E::zero() };
                        dxr[j] = (sm[j] - onehot) * scale;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Mean binary cross-entropy of probabilities against labels. Both p and
    /// 1−p are floored at 1e-12 independently: `1 − floor` rounds to exactly
    /// 1 in f32, so clamping p alone would still send ln(1−p) to −∞ once a
    /// confident head saturates.
    pub fn bce_mean(&self, labels: &[E]) -> Var<E> {
        let floor = E::from_f64c(kernels::PROB_FLOOR);
        let labels_v = labels.to_vec();
        let out = self.with(|t| {
            assert_eq!(t.len(), labels.len(), "one label per probability");
            let mut acc = E::zero();
            for (&p, &y) in t.data.iter().zip(labels) {
                let pc = p.max_s(floor);
                let qc = (E::one() - p).max_s(floor);
                acc += -y * pc.ln() - (E::one() - y) * qc.ln();
            }
            Tensor::scalar(acc / E::from_f64c(labels.len() as f64))
        });
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |g, pv, _| {
                let scale = g.as_scalar() / E::from_f64c(labels_v.len() as f64);
                let mut dx = Tensor::zeros(pv[0].shape.clone());
                for ((d, &p), &y) in dx.data.iter_mut().zip(&pv[0].data).zip(&labels_v) {
                    let pc = p.max_s(floor);
                    let qc = (E::one() - p).max_s(floor);
                    *d = scale * (-y / pc + (E::one() - y) / qc);
                }
                vec![dx]
            })),
        )
    }

    /// D_KL(p ‖ q) between two probability vectors on the tape.
    pub fn kl_div(&self, q: &Var<E>) -> Var<E> {
        let floor = E::from_f64c(kernels::PROB_FLOOR);
        let out = self.with2(q, |p, qv| {
            assert_eq!(p.shape, qv.shape, "kl_div shape mismatch");
            Tensor::scalar(kernels::kl_divergence_unchecked(&p.data, &qv.data))
        });
        self.tape.push(
            out,
            vec![self.idx, q.idx],
            Some(Box::new(move |g, pv, _| {
                let gv = g.as_scalar();
                let dp = pv[0].zip_map(pv[1], |p, q| {
                    gv * ((p.max_s(floor) / q.max_s(floor)).ln() + E::one())
                });
                let dq = pv[0].zip_map(pv[1], |p, q| -gv * p / q.max_s(floor));
                vec![dp, dq]
            })),
        )
    }

    /// Mean squared error between two same-shape vars.
    pub fn mse_loss(&self, other: &Var<E>) -> Var<E> {
        let out = self.with2(other, |a, b| {
            assert_eq!(a.shape, b.shape, "mse shape mismatch");
            Tensor::scalar(kernels::mse_unchecked(&a.data, &b.data))
        });
        self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(|g, pv, _| {
                let n = E::from_f64c(pv[0].len() as f64);
                let gv = g.as_scalar();
                let two = E::from_f64c(2.0);
                let da = pv[0].zip_map(pv[1], |a, b| gv * two * (a - b) / n);
                let db = pv[0].zip_map(pv[1], |a, b| -gv * two * (a - b) / n);
                vec![da, db]
            })),
        )
    }
}
