//! Reverse sweep over the tape.
//!
//! Every vector-Jacobian product is written once against the [`Algebra`] trait.
//! Instantiated on plain tensors it gives an ordinary backward pass; instantiated
//! on [`Var`] it records the backward pass onto the tape itself, which is what
//! makes gradients of gradients available in [`Order::Exact`] mode.

use std::collections::BTreeSet;
use std::rc::Rc;
use std::sync::Arc;

use super::tape::{Op, Tape, Var};
use super::{AdError, Order, Tensor};
use crate::graph::SparseMatrix;

pub(crate) trait Algebra: Clone {
    fn val(&self) -> Rc<Tensor>;
    fn lift(&self, t: Tensor) -> Self;
    fn add(&self, o: &Self) -> Result<Self, AdError>;
    fn sub(&self, o: &Self) -> Result<Self, AdError>;
    fn mul(&self, o: &Self) -> Result<Self, AdError>;
    fn div(&self, o: &Self) -> Result<Self, AdError>;
    fn scale(&self, c: f64) -> Result<Self, AdError>;
    fn add_scalar(&self, c: f64) -> Result<Self, AdError>;
    fn matmul(&self, o: &Self) -> Result<Self, AdError>;
    fn transpose(&self) -> Result<Self, AdError>;
    fn spmm(&self, mat: &Arc<SparseMatrix>, mat_t: &Arc<SparseMatrix>) -> Result<Self, AdError>;
    fn exp(&self) -> Result<Self, AdError>;
    fn sqrt(&self) -> Result<Self, AdError>;
    fn square(&self) -> Result<Self, AdError>;
    fn sum_all(&self) -> Result<Self, AdError>;
    fn sum_rows(&self) -> Result<Self, AdError>;
    fn sum_cols(&self) -> Result<Self, AdError>;
    fn reshape(&self, shape: &[usize]) -> Result<Self, AdError>;
    fn concat_cols(parts: &[Self]) -> Result<Self, AdError>;
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError>;
    fn gather_rows(&self, idx: &[usize]) -> Result<Self, AdError>;
    fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Result<Self, AdError>;
    fn custom(vjp: &super::tape::CustomVjp, name: &'static str, x: &Self, out: &Self, g: &Self) -> Result<Self, AdError>;
}

impl Algebra for Rc<Tensor> {
    fn val(&self) -> Rc<Tensor> {
        Rc::clone(self)
    }
    fn lift(&self, t: Tensor) -> Self {
        Rc::new(t)
    }
    fn add(&self, o: &Self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::add(self, o)?))
    }
    fn sub(&self, o: &Self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::sub(self, o)?))
    }
    fn mul(&self, o: &Self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::mul(self, o)?))
    }
    fn div(&self, o: &Self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::div(self, o)?))
    }
    fn scale(&self, c: f64) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::scale(self, c)))
    }
    fn add_scalar(&self, c: f64) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::add_scalar(self, c)))
    }
    fn matmul(&self, o: &Self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::matmul(self, o)?))
    }
    fn transpose(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::transpose(self)?))
    }
    fn spmm(&self, mat: &Arc<SparseMatrix>, _mat_t: &Arc<SparseMatrix>) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::spmm(mat, self)?))
    }
    fn exp(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::exp(self)))
    }
    fn sqrt(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::sqrt(self)?))
    }
    fn square(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::square(self)))
    }
    fn sum_all(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::sum_all(self)))
    }
    fn sum_rows(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::sum_rows(self)?))
    }
    fn sum_cols(&self) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::sum_cols(self)?))
    }
    fn reshape(&self, shape: &[usize]) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::reshape(self, shape)?))
    }
    fn concat_cols(parts: &[Self]) -> Result<Self, AdError> {
        let refs: Vec<&Tensor> = parts.iter().map(Rc::as_ref).collect();
        Ok(Rc::new(Tensor::concat_cols(&refs)?))
    }
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::slice_cols(self, start, end)?))
    }
    fn gather_rows(&self, idx: &[usize]) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::gather_rows(self, idx)?))
    }
    fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Result<Self, AdError> {
        Ok(Rc::new(Tensor::scatter_rows(self, idx, n_rows)?))
    }
    fn custom(vjp: &super::tape::CustomVjp, _name: &'static str, x: &Self, out: &Self, g: &Self) -> Result<Self, AdError> {
        Ok(Rc::new(vjp(x, out, g)?))
    }
}

impl<'t> Algebra for Var<'t> {
    fn val(&self) -> Rc<Tensor> {
        self.value()
    }
    fn lift(&self, t: Tensor) -> Self {
        self.tape.constant(t)
    }
    fn add(&self, o: &Self) -> Result<Self, AdError> {
        Var::add(*self, *o)
    }
    fn sub(&self, o: &Self) -> Result<Self, AdError> {
        Var::sub(*self, *o)
    }
    fn mul(&self, o: &Self) -> Result<Self, AdError> {
        Var::mul(*self, *o)
    }
    fn div(&self, o: &Self) -> Result<Self, AdError> {
        Var::div(*self, *o)
    }
    fn scale(&self, c: f64) -> Result<Self, AdError> {
        Var::scale(*self, c)
    }
    fn add_scalar(&self, c: f64) -> Result<Self, AdError> {
        Var::add_scalar(*self, c)
    }
    fn matmul(&self, o: &Self) -> Result<Self, AdError> {
        Var::matmul(*self, *o)
    }
    fn transpose(&self) -> Result<Self, AdError> {
        Var::transpose(*self)
    }
    fn spmm(&self, mat: &Arc<SparseMatrix>, mat_t: &Arc<SparseMatrix>) -> Result<Self, AdError> {
        Var::spmm_with_transpose(*self, mat, mat_t)
    }
    fn exp(&self) -> Result<Self, AdError> {
        Var::exp(*self)
    }
    fn sqrt(&self) -> Result<Self, AdError> {
        Var::sqrt(*self)
    }
    fn square(&self) -> Result<Self, AdError> {
        Var::square(*self)
    }
    fn sum_all(&self) -> Result<Self, AdError> {
        Var::sum_all(*self)
    }
    fn sum_rows(&self) -> Result<Self, AdError> {
        Var::sum_rows(*self)
    }
    fn sum_cols(&self) -> Result<Self, AdError> {
        Var::sum_cols(*self)
    }
    fn reshape(&self, shape: &[usize]) -> Result<Self, AdError> {
        Var::reshape(*self, shape)
    }
    fn concat_cols(parts: &[Self]) -> Result<Self, AdError> {
        Var::concat_cols(parts)
    }
    fn slice_cols(&self, start: usize, end: usize) -> Result<Self, AdError> {
        Var::slice_cols(*self, start, end)
    }
    fn gather_rows(&self, idx: &[usize]) -> Result<Self, AdError> {
        Var::gather_rows(*self, idx)
    }
    fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Result<Self, AdError> {
        Var::scatter_rows(*self, idx, n_rows)
    }
    fn custom(_vjp: &super::tape::CustomVjp, name: &'static str, _x: &Self, _out: &Self, _g: &Self) -> Result<Self, AdError> {
        Err(AdError::SecondOrderUnsupported { ops: vec![name.to_string()] })
    }
}

fn reduce_to<T: Algebra>(g: &T, shape: &[usize]) -> Result<T, AdError> {
    use super::tensor::Broadcast;
    match Tensor::broadcast_kind("reduce", g.val().shape(), shape)? {
        Broadcast::Same => Ok(g.clone()),
        Broadcast::Scalar => g.sum_all()?.reshape(shape),
        Broadcast::Column => g.sum_rows(),
        Broadcast::Row => g.sum_cols(),
    }
}

/// Gradients of one op's inputs given the upstream gradient `g`.
/// `needs[k]` says whether input `k` wants a gradient at all.
fn vjp<T: Algebra>(op: &Op, xs: &[T], out: &T, g: &T, needs: &[bool]) -> Result<Vec<Option<T>>, AdError> {
    let want = |k: usize| needs.get(k).copied().unwrap_or(false);
    let single = |r: Result<T, AdError>| -> Result<Vec<Option<T>>, AdError> { Ok(vec![Some(r?)]) };
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::MatMul(..) => {
            let da = if want(0) { Some(g.matmul(&xs[1].transpose()?)?) } else { None };
            let db = if want(1) { Some(xs[0].transpose()?.matmul(g)?) } else { None };
            Ok(vec![da, db])
        }
        Op::Transpose(_) => single(g.transpose()),
        Op::SpMM { mat, mat_t, .. } => single(g.spmm(mat_t, mat)),
        Op::Add(..) => {
            let db = if want(1) { Some(reduce_to(g, xs[1].val().shape())?) } else { None };
            Ok(vec![want(0).then(|| g.clone()), db])
        }
        Op::Sub(..) => {
            let db = if want(1) { Some(reduce_to(g, xs[1].val().shape())?.scale(-1.0)?) } else { None };
            Ok(vec![want(0).then(|| g.clone()), db])
        }
        Op::Mul(..) => {
            let da = if want(0) { Some(g.mul(&xs[1])?) } else { None };
            let db = if want(1) { Some(reduce_to(&g.mul(&xs[0])?, xs[1].val().shape())?) } else { None };
            Ok(vec![da, db])
        }
        Op::Div(..) => {
            let da = if want(0) { Some(g.div(&xs[1])?) } else { None };
            let db = if want(1) {
                let t = g.mul(out)?.div(&xs[1])?.scale(-1.0)?;
                Some(reduce_to(&t, xs[1].val().shape())?)
            } else {
                None
            };
            Ok(vec![da, db])
        }
        Op::Scale(_, c) => single(g.scale(*c)),
        Op::AddScalar(..) => Ok(vec![Some(g.clone())]),
        Op::Relu(_) => {
            // The step function's own derivative is zero almost everywhere, so
            // the mask enters as a constant.
            let mask = xs[0].val().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            single(g.mul(&g.lift(mask)))
        }
        Op::Exp(_) => single(g.mul(out)),
        Op::Log(_) => single(g.div(&xs[0])),
        Op::Square(_) => single(g.mul(&xs[0])?.scale(2.0)),
        Op::Sqrt(_) => single(g.div(&out.scale(2.0)?)),
        Op::Tanh(_) => single(g.mul(&out.square()?.scale(-1.0)?.add_scalar(1.0)?)),
        Op::SoftmaxRows(_) => {
            let inner = g.mul(out)?.sum_rows()?;
            single(g.sub(&inner)?.mul(out))
        }
        Op::LogSoftmaxRows(_) => {
            let soft = out.exp()?;
            single(g.sub(&soft.mul(&g.sum_rows()?)?))
        }
        Op::L2NormalizeRows(_) => {
            let norm = xs[0].square()?.sum_rows()?.sqrt()?;
            let proj = g.mul(out)?.sum_rows()?;
            single(g.sub(&out.mul(&proj)?)?.div(&norm))
        }
        Op::SumAll(x) | Op::SumRows(x) | Op::SumCols(x) => {
            let _ = x;
            let ones = g.lift(Tensor::ones(xs[0].val().shape()));
            single(ones.mul(g))
        }
        Op::Reshape(_) => single(g.reshape(xs[0].val().shape())),
        Op::ConcatCols(_) => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(xs.len());
            for (k, x) in xs.iter().enumerate() {
                let w = x.val().cols();
                grads.push(if want(k) { Some(g.slice_cols(start, start + w)?) } else { None });
                start += w;
            }
            Ok(grads)
        }
        Op::SliceCols { start, end, .. } => {
            let x = xs[0].val();
            let (n, w) = (x.rows(), x.cols());
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                parts.push(g.lift(Tensor::zeros(&[n, *start])));
            }
            parts.push(g.clone());
            if *end < w {
                parts.push(g.lift(Tensor::zeros(&[n, w - end])));
            }
            single(T::concat_cols(&parts))
        }
        Op::GatherRows { idx, .. } => single(g.scatter_rows(idx, xs[0].val().rows())),
        Op::ScatterRows { idx, .. } => single(g.gather_rows(idx)),
        Op::Custom { name, vjp, .. } => single(T::custom(vjp, name, &xs[0], out, g)),
    }
}

impl Tape {
    /// Shared reverse sweep. `fetch` turns a node id into the algebra element
    /// standing for that node's value.
    fn sweep<T: Algebra>(&self, seeds: Vec<(usize, T)>, fetch: impl Fn(usize) -> T) -> Result<Vec<Option<T>>, AdError> {
        let Some(top) = seeds.iter().map(|s| s.0).max() else {
            return Ok(Vec::new());
        };
        let mut grads: Vec<Option<T>> = vec![None; top + 1];
        for (id, seed) in seeds {
            grads[id] = Some(match grads[id].take() {
                Some(acc) => acc.add(&seed)?,
                None => seed,
            });
        }
        for id in (0..=top).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let (op, inputs, needs) = {
                let nodes = self.nodes.borrow();
                let op = nodes[id].op.clone();
                let inputs = op.inputs();
                let needs: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                (op, inputs, needs)
            };
            if inputs.is_empty() || !needs.iter().any(|&n| n) {
                continue;
            }
            let xs: Vec<T> = inputs.iter().map(|&i| fetch(i)).collect();
            let out = fetch(id);
            let input_grads = vjp(&op, &xs, &out, &g, &needs)?;
            for ((&i, gi), need) in inputs.iter().zip(input_grads).zip(needs) {
                if let (Some(gi), true) = (gi, need) {
                    grads[i] = Some(match grads[i].take() {
                        Some(acc) => acc.add(&gi)?,
                        None => gi,
                    });
                }
            }
        }
        Ok(grads)
    }

    fn check_scalar(&self, loss: Var<'_>) -> Result<(), AdError> {
        let v = loss.value();
        if v.rank() != 0 {
            return Err(AdError::NotScalar { shape: v.shape().to_vec() });
        }
        Ok(())
    }

    /// Plain reverse-mode gradients of a scalar `loss`. Entries of `wrt` that
    /// the loss does not depend on get zeros.
    pub fn gradients(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>, AdError> {
        self.check_scalar(loss)?;
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))], wrt)
    }

    /// Vector-Jacobian product: propagates `seed_k` from each `output_k` back to `wrt`.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Tensor)], wrt: &[Var<'_>]) -> Result<Vec<Tensor>, AdError> {
        for (v, seed) in seeds {
            if v.value().shape() != seed.shape() {
                return Err(AdError::shape("seed", v.value().shape(), seed.shape()));
            }
        }
        let seeds = seeds.iter().map(|(v, s)| (v.id, Rc::new(s.clone()))).collect();
        let grads = self.sweep(seeds, |id| self.value_of(id))?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).and_then(Option::as_ref) {
                Some(g) => (**g).clone(),
                None => Tensor::zeros(w.value().shape()),
            })
            .collect())
    }

    /// Gradients as tape nodes, honouring the tape's [`Order`]: in exact mode
    /// the returned nodes are differentiable functions of the inputs, in
    /// first-order mode they are constants.
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>, AdError> {
        self.check_scalar(loss)?;
        match self.order() {
            Order::First => {
                let raw = self.gradients(loss, wrt)?;
                Ok(raw.into_iter().map(|g| self.constant(g)).collect())
            }
            Order::Exact => {
                self.ensure_second_order(loss.id)?;
                let seed = self.constant(Tensor::scalar(1.0));
                let grads = self.sweep(vec![(loss.id, seed)], |id| Var { tape: self, id })?;
                Ok(wrt
                    .iter()
                    .map(|w| match grads.get(w.id).and_then(|g| *g) {
                        Some(g) => g,
                        None => self.constant(Tensor::zeros(w.value().shape())),
                    })
                    .collect())
            }
        }
    }

    /// Fails if any differentiable node feeding `top` lacks a second derivative.
    fn ensure_second_order(&self, top: usize) -> Result<(), AdError> {
        let nodes = self.nodes.borrow();
        let mut reach = vec![false; top + 1];
        reach[top] = true;
        let mut missing = BTreeSet::new();
        for id in (0..=top).rev() {
            if !reach[id] || !nodes[id].requires_grad {
                continue;
            }
            if let Op::Custom { name, .. } = &nodes[id].op {
                missing.insert(name.to_string());
            }
            for i in nodes[id].op.inputs() {
                reach[i] = true;
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(AdError::SecondOrderUnsupported { ops: missing.into_iter().collect() })
        }
    }
}
