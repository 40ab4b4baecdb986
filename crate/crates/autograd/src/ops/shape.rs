use crate::graph::{accumulate, Graph, Op, Var};
use crate::ops::elementwise::add_into;
use crate::tensor::Tensor;

/// `(outer, dim, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let nd = vx.ndim();
        assert!(nd >= 2, "transpose needs at least 2 axes");
        let (m, n) = (vx.shape()[nd - 2], vx.shape()[nd - 1]);
        let batch = vx.len() / (m * n).max(1);
        let mut out = vec![0.0; vx.len()];
        let src = vx.data();
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Transpose(x), ng)
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (outer, dim, inner) = split_axis(vx.shape(), axis);
        assert!(start + len <= dim, "narrow out of range");
        let src = vx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Narrow { x, axis, start }, ng)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]).shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat: shape mismatch off-axis");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let vt = self.value(v);
                let d = vt.shape()[axis];
                out.extend_from_slice(&vt.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(xs);
        self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Gathers samples along the leading axis; indices may repeat.
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Var {
        let vx = self.value(x);
        let rows = vx.shape()[0];
        let inner = vx.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            assert!(i < rows, "index_select: {i} out of range {rows}");
            out.extend_from_slice(&vx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(&[x]);
        self.push(
            t,
            Op::IndexSelect {
                x,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let vx = self.value(x);
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        assert!(len > 0, "mean over empty axis");
        let src = vx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::MeanAxis { x, len, inner }, ng)
    }
}

pub(crate) fn backward(graph: &Graph, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Reshape(x) => accumulate(graph, grads, *x, |d| add_into(d, gd)),
        Op::Transpose(x) => {
            let s = g.shape();
            let nd = s.len();
            // g has the transposed shape [.., n, m]
            let (n, m) = (s[nd - 2], s[nd - 1]);
            let batch = gd.len() / (m * n).max(1);
            accumulate(graph, grads, *x, |d| {
                for b in 0..batch {
                    let base = b * m * n;
                    for j in 0..n {
                        for i in 0..m {
                            d[base + i * n + j] += gd[base + j * m + i];
                        }
                    }
                }
            });
        }
        Op::Narrow { x, axis, start } => {
            let (outer, dim, inner) = split_axis(graph.value(*x).shape(), *axis);
            let len = g.shape()[*axis];
            accumulate(graph, grads, *x, |d| {
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    add_into(&mut d[dst..dst + len * inner], &gd[src..src + len * inner]);
                }
            });
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let dim = graph.value(v).shape()[*axis];
                accumulate(graph, grads, v, |d| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        add_into(
                            &mut d[o * dim * inner..(o + 1) * dim * inner],
                            &gd[src..src + dim * inner],
                        );
                    }
                });
                offset += dim;
            }
        }
        Op::IndexSelect { x, index } => {
            let inner = gd.len() / index.len().max(1);
            accumulate(graph, grads, *x, |d| {
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut d[i * inner..(i + 1) * inner], &gd[r * inner..(r + 1) * inner]);
                }
            });
        }
        Op::MeanAxis { x, len, inner } => {
            let outer = gd.len() / inner.max(&1);
            let inv = 1.0 / *len as f64;
            accumulate(graph, grads, *x, |d| {
                for o in 0..outer {
                    for l in 0..*len {
                        let dst = (o * len + l) * inner;
                        for k in 0..*inner {
                            d[dst + k] += gd[o * inner + k] * inv;
                        }
                    }
                }
            });
        }
        _ => unreachable!("not a shape op"),
    }
}
