use crate::parallel::Execution;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Transpose(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        index: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        cols: Option<Vec<Vec<f64>>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    MeanAxis {
        x: Var,
        len: usize,
        inner: usize,
    },
    RowNorm(Var),
    Nll {
        p: Var,
        labels: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Append-only tape of tensor operations supporting one reverse sweep.
///
/// Leaves created with [`Graph::param`] receive gradients; leaves created with
/// [`Graph::constant`] do not, and neither does anything computed only from
/// constants.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) exec: Execution,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_execution(Execution::default())
    }

    pub fn with_execution(exec: Execution) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            crate::ops::backward_node(self, node, &g, &mut grads);
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Adds into the gradient slot of `v`, allocating zeros on first touch.
/// Constant subgraphs are skipped.
pub(crate) fn accumulate(
    graph: &Graph,
    grads: &mut [Option<Tensor>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    let node = &graph.nodes[v.0];
    if !node.needs_grad {
        return;
    }
    let slot = &mut grads[v.0];
    let t = slot.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
    f(t.data_mut());
}
