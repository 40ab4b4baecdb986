pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod shape;

use crate::graph::{Graph, Node, Op};
use crate::tensor::Tensor;

pub(crate) fn backward_node(graph: &Graph, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match &node.op {
        Op::Leaf => {}
        op @ (Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Scale(..)
        | Op::AddBias { .. }
        | Op::ScaleRows { .. }
        | Op::Relu(_)
        | Op::Sigmoid(_)
        | Op::RowNorm(_)
        | Op::Nll { .. }) => elementwise::backward(graph, op, &node.value, g, grads),
        op @ (Op::Reshape(_)
        | Op::Transpose(_)
        | Op::Narrow { .. }
        | Op::Concat { .. }
        | Op::IndexSelect { .. }
        | Op::MeanAxis { .. }) => shape::backward(graph, op, g, grads),
        op @ (Op::MatMul { .. } | Op::Softmax(_) | Op::LayerNorm { .. }) => {
            linalg::backward(graph, op, &node.value, g, grads)
        }
        op @ (Op::Conv2d { .. }
        | Op::MaxPool2 { .. }
        | Op::ChannelMax { .. }
        | Op::BatchNorm { .. }
        | Op::ChannelAffine { .. }) => conv::backward(graph, op, g, grads),
    }
}
