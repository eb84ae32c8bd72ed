use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AdError, Tensor};
use crate::graph::SparseMatrix;

/// How `Tape::grad` treats gradients that later feed an outer loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Inner gradients enter the tape as constants; adapted parameters pass the
    /// outer gradient straight through.
    #[default]
    First,
    /// Inner gradients are recorded as tape nodes, so outer gradients include
    /// the Hessian-vector terms.
    Exact,
}

pub(crate) type CustomVjp = Rc<dyn Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor, AdError>>;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    SpMM { mat: Arc<SparseMatrix>, mat_t: Arc<SparseMatrix>, x: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    L2NormalizeRows(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, end: usize },
    GatherRows { x: usize, idx: Arc<[usize]> },
    ScatterRows { x: usize, idx: Arc<[usize]> },
    Custom { x: usize, name: &'static str, vjp: CustomVjp },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Transpose(x) | Scale(x, _) | AddScalar(x) | Relu(x) | Exp(x) | Log(x) | Square(x)
            | Sqrt(x) | Tanh(x) | SoftmaxRows(x) | LogSoftmaxRows(x) | L2NormalizeRows(x)
            | SumAll(x) | SumRows(x) | SumCols(x) | Reshape(x) => vec![*x],
            SpMM { x, .. } | SliceCols { x, .. } | GatherRows { x, .. } | ScatterRows { x, .. }
            | Custom { x, .. } => vec![*x],
            ConcatCols(xs) => xs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order, so
/// every node's inputs precede it.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    order: Order,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).field("order", &self.order).finish()
    }
}

impl Tape {
    pub fn new(order: Order) -> Self {
        Self { nodes: RefCell::new(Vec::new()), order }
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients are taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value: Rc::new(value), requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { op, value: Rc::new(value), requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    #[cfg(test)]
    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Registers a unary primitive with a caller-supplied first-order VJP
    /// `(input, output, upstream) -> input gradient`. Such primitives have no
    /// second derivative, so exact-order gradients through them fail.
    pub fn custom_unary<'t>(
        &'t self,
        x: Var<'t>,
        name: &'static str,
        forward: impl Fn(&Tensor) -> Result<Tensor, AdError>,
        vjp: impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor, AdError> + 'static,
    ) -> Result<Var<'t>, AdError> {
        let value = forward(&x.value())?;
        Ok(self.push(Op::Custom { x: x.id, name, vjp: Rc::new(vjp) }, value))
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

macro_rules! unary {
    ($(#[$doc:meta])* $name:ident, $variant:ident, |$t:ident| $body:expr) => {
        $(#[$doc])*
        pub fn $name(self) -> Result<Var<'t>, AdError> {
            let $t = self.value();
            let value = $body;
            Ok(self.tape.push(Op::$variant(self.id), value))
        }
    };
}

macro_rules! binary {
    ($name:ident, $variant:ident, $kernel:ident) => {
        pub fn $name(self, other: Var<'t>) -> Result<Var<'t>, AdError> {
            self.same_tape(other)?;
            let value = self.value().$kernel(&other.value())?;
            Ok(self.tape.push(Op::$variant(self.id, other.id), value))
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> Result<f64, AdError> {
        self.value().item()
    }

    fn same_tape(&self, other: Var<'t>) -> Result<(), AdError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AdError::Invalid("operands live on different tapes".into()))
        }
    }

    binary!(add, Add, add);
    binary!(sub, Sub, sub);
    binary!(mul, Mul, mul);
    binary!(div, Div, div);
    binary!(matmul, MatMul, matmul);

    pub fn scale(self, c: f64) -> Result<Var<'t>, AdError> {
        let value = self.value().scale(c);
        Ok(self.tape.push(Op::Scale(self.id, c), value))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, AdError> {
        let value = self.value().add_scalar(c);
        Ok(self.tape.push(Op::AddScalar(self.id), value))
    }

    pub fn neg(self) -> Result<Var<'t>, AdError> {
        self.scale(-1.0)
    }

    unary!(transpose, Transpose, |t| t.transpose()?);
    unary!(relu, Relu, |t| t.relu());
    unary!(exp, Exp, |t| t.exp());
    unary!(
        /// Natural log; non-positive inputs are a domain error.
        ln, Log, |t| t.ln()?
    );
    unary!(square, Square, |t| t.square());
    unary!(sqrt, Sqrt, |t| t.sqrt()?);
    unary!(tanh, Tanh, |t| t.tanh());
    unary!(softmax_rows, SoftmaxRows, |t| t.softmax_rows()?);
    unary!(log_softmax_rows, LogSoftmaxRows, |t| t.log_softmax_rows()?);
    unary!(
        /// Divides each row by its Euclidean norm; a zero row is an error.
        l2_normalize_rows, L2NormalizeRows, |t| t.l2_normalize_rows()?
    );
    unary!(sum_all, SumAll, |t| t.sum_all());
    unary!(sum_rows, SumRows, |t| t.sum_rows()?);
    unary!(sum_cols, SumCols, |t| t.sum_cols()?);

    pub fn mean_all(self) -> Result<Var<'t>, AdError> {
        let n = self.value().len();
        if n == 0 {
            return Err(AdError::Invalid("mean of an empty tensor".into()));
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// `mat · self` for a constant sparse matrix.
    pub fn spmm(self, mat: &Arc<SparseMatrix>) -> Result<Var<'t>, AdError> {
        let value = Tensor::spmm(mat, &self.value())?;
        let mat_t = Arc::new(mat.transpose());
        Ok(self.tape.push(Op::SpMM { mat: Arc::clone(mat), mat_t, x: self.id }, value))
    }

    /// Like [`Var::spmm`] with a precomputed transpose.
    pub fn spmm_with_transpose(self, mat: &Arc<SparseMatrix>, mat_t: &Arc<SparseMatrix>) -> Result<Var<'t>, AdError> {
        let value = Tensor::spmm(mat, &self.value())?;
        Ok(self.tape.push(Op::SpMM { mat: Arc::clone(mat), mat_t: Arc::clone(mat_t), x: self.id }, value))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, AdError> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(Op::Reshape(self.id), value))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        let first = parts.first().ok_or(AdError::Invalid("concat of zero tensors".into()))?;
        for p in parts {
            first.same_tape(*p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(Rc::as_ref).collect();
        let value = Tensor::concat_cols(&refs)?;
        Ok(first.tape.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), value))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, AdError> {
        let value = self.value().slice_cols(start, end)?;
        Ok(self.tape.push(Op::SliceCols { x: self.id, start, end }, value))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>, AdError> {
        let value = self.value().gather_rows(idx)?;
        Ok(self.tape.push(Op::GatherRows { x: self.id, idx: idx.into() }, value))
    }

    pub fn scatter_rows(self, idx: &[usize], n_rows: usize) -> Result<Var<'t>, AdError> {
        let value = self.value().scatter_rows(idx, n_rows)?;
        Ok(self.tape.push(Op::ScatterRows { x: self.id, idx: idx.into() }, value))
    }

    /// Elementwise product with a constant tensor (broadcast like `mul`).
    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>, AdError> {
        let c = self.tape.constant(c);
        self.mul(c)
    }

    pub fn add_const(self, c: Tensor) -> Result<Var<'t>, AdError> {
        let c = self.tape.constant(c);
        self.add(c)
    }
}
