use super::kernels::Im2col;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

pub(super) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
        row: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Im2col,
        cout: usize,
    },
    AvgPool {
        x: Var,
        n: usize,
        hw: usize,
        c: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Softmax {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

impl Op {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Gather { .. } => "gather",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "spatial_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::AvgPool { x, .. }
            | Op::Softmax { x }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows { parts } => parts.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

pub(super) struct Node {
    pub value: Tensor,
    pub op: Op,
    retain: bool,
}

/// Gradient contributions from one node to its inputs.
pub(super) type Contributions = Vec<(Var, Vec<f32>)>;

/// Read-only view of recorded nodes handed to backward rules.
pub(super) struct Nodes<'a>(&'a [Node]);

impl Nodes<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.0[v.0].value.data()
    }

    pub fn needs(&self, v: Var) -> bool {
        self.0[v.0].value.requires_grad()
    }
}

/// Recorded computation, differentiated in reverse insertion order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    trace: Option<Vec<usize>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let retain = tensor.requires_grad();
        self.nodes.push(Node {
            value: Tensor {
                grad: None,
                ..tensor
            },
            op: Op::Leaf,
            retain,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last backward pass with respect to `v`. Available for
    /// leaves and for values marked with [`Tape::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].value.grad.take()
    }

    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Record the order in which backward visits nodes.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[usize]> {
        self.trace.as_deref()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Maximum absolute value of every non-leaf node, in recording order.
    pub fn activation_report(&self) -> Vec<(usize, &'static str, f32)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| (i, n.op.name(), n.value.max_abs()))
            .collect()
    }

    pub(super) fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let name = op.name();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            retain: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode pass from a scalar `loss`. Leaves (and retained values)
    /// receive their gradients; a tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Tape(format!("loss {loss:?} is not on this tape")))?;
        if root.value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.requires_grad() {
            return Err(Error::Tape("loss is detached from every differentiable input".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Some(trace) = self.trace.as_mut() {
                trace.push(i);
            }
            let contributions = {
                let nodes = Nodes(&self.nodes);
                backward_rule(&nodes, &self.nodes[i], &g)
            };
            for (input, delta) in contributions {
                debug_assert!(input.0 < i, "tape order violated");
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    slot => *slot = Some(delta),
                }
            }
            if self.nodes[i].retain {
                self.nodes[i].value.grad = Some(g);
            }
        }
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

fn backward_rule(nodes: &Nodes, node: &Node, g: &[f32]) -> Contributions {
    use super::{conv, loss, norm, ops};
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, m, k, n } => ops::matmul_backward(nodes, *a, *b, *m, *k, *n, g),
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => ops::bmm_backward(nodes, *a, *b, *batch, *m, *k, *n, *trans_b, g),
        Op::Add { a, b } => ops::add_backward(nodes, *a, *b, g),
        Op::AddBias { x, bias } => ops::add_bias_backward(nodes, *x, *bias, g),
        Op::Mul { a, b } => ops::mul_backward(nodes, *a, *b, g),
        Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
        Op::Relu { x } => ops::relu_backward(nodes, *x, g),
        Op::Gelu { x } => ops::gelu_backward(nodes, *x, g),
        Op::Reshape { x } => vec![(*x, g.to_vec())],
        Op::Permute { x, perm } => ops::permute_backward(nodes, *x, perm, g),
        Op::Gather { table, index, row } => ops::gather_backward(nodes, *table, index, *row, g),
        Op::ConcatRows { parts } => ops::concat_backward(nodes, parts, g),
        Op::Sum { x } => vec![(*x, vec![g[0]; nodes.value(*x).len()])],
        Op::Mean { x } => {
            let len = nodes.value(*x).len();
            vec![(*x, vec![g[0] / len as f32; len])]
        }
        Op::Conv2d { x, w, geom, cout } => conv::conv2d_backward(nodes, *x, *w, geom, *cout, g),
        Op::AvgPool { x, n, hw, c } => conv::avg_pool_backward(*x, *n, *hw, *c, g),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => norm::batch_norm_backward(nodes, *x, *gamma, *beta, xhat, inv_std, *train, g),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm::layer_norm_backward(nodes, *x, *gamma, *beta, xhat, inv_std, g),
        Op::Softmax { x } => loss::softmax_backward(*x, out, g),
        Op::SoftmaxXent {
            logits,
            targets,
            probs,
        } => loss::softmax_xent_backward(*logits, targets, probs, g),
        Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())],
    }
}
