use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    SumAll { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Elu { a: Var },
    Pos { a: Var },
    Sqrt { a: Var, eps: T },
    Square { a: Var },
    Exp { a: Var },
    Log { a: Var, eps: T },
    L2Normalize { a: Var, axis: usize, norms: Vec<T> },
    GatherRows { a: Var, index: Vec<usize> },
    Pick { a: Var, cols: Vec<usize> },
    Reshape { a: Var },
    MaskedFill { a: Var, mask: Vec<bool> },
    PairwiseSqDist { a: Var, b: Var },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll { .. } => "sum_all",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Elu { .. } => "elu",
            Op::Pos { .. } => "pos",
            Op::Sqrt { .. } => "sqrt",
            Op::Square { .. } => "square",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::Reshape { .. } => "reshape",
            Op::MaskedFill { .. } => "masked_fill",
            Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::AddRow { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::PairwiseSqDist { a, b } => vec![*a, *b],
            Op::LayerNorm { a, gain, bias, .. } => vec![*a, *gain, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Slice { a, .. }
            | Op::Sum { a, .. }
            | Op::Mean { a, .. }
            | Op::SumAll { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Elu { a }
            | Op::Pos { a }
            | Op::Sqrt { a, .. }
            | Op::Square { a }
            | Op::Exp { a }
            | Op::Log { a, .. }
            | Op::L2Normalize { a, .. }
            | Op::GatherRows { a, .. }
            | Op::Pick { a, .. }
            | Op::Reshape { a }
            | Op::MaskedFill { a, .. } => vec![*a],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Inputs always precede the nodes that
/// consume them, so the node list is already in topological order.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape. Finiteness of every op output is checked when debug
    /// assertions are enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }
}
