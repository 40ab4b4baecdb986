use crate::graph::{accumulate, Graph, Op, Var};
use crate::tensor::Tensor;

/// Probabilities below this are clamped inside the log of [`Graph::nll`].
pub const NLL_CLAMP: f64 = 1e-12;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.any_grad(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape(), vx.data().iter().map(|v| v * c).collect());
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// `x + bias`, with `bias` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().expect("add_bias on scalar");
        assert_eq!(vb.shape(), &[n], "add_bias: bias must have shape [{n}]");
        let b = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let t = Tensor::new(vx.shape(), data);
        let ng = self.any_grad(&[x, bias]);
        self.push(t, Op::AddBias { x, bias }, ng)
    }

    /// Multiplies sample `b` of `x` (leading axis) by the scalar `s[b]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.value(x), self.value(s));
        let batch = vx.shape()[0];
        assert_eq!(vs.shape(), &[batch], "scale_rows: scale must have shape [{batch}]");
        let inner = vx.len() / batch.max(1);
        let sd = vs.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sd[i / inner])
            .collect();
        let t = Tensor::new(vx.shape(), data);
        let ng = self.any_grad(&[x, s]);
        self.push(t, Op::ScaleRows { x, s }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape(), vx.data().iter().map(|v| v.max(0.0)).collect());
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape(), vx.data().iter().map(|&v| sigmoid(v)).collect());
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Euclidean norm of each sample along the leading axis: `[B, ...] -> [B]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let batch = vx.shape()[0];
        let inner = vx.len() / batch.max(1);
        let data = (0..batch)
            .map(|b| {
                vx.data()[b * inner..(b + 1) * inner]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let t = Tensor::new(&[batch], data);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::RowNorm(x), ng)
    }

    /// Mean negative log-likelihood of `labels` under row-stochastic `p: [B, N]`.
    /// The log argument is clamped at [`NLL_CLAMP`].
    pub fn nll(&mut self, p: Var, labels: &[usize]) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.ndim(), 2, "nll expects [B, N] probabilities");
        let (b, n) = (vp.shape()[0], vp.shape()[1]);
        assert_eq!(labels.len(), b, "nll: one label per row");
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < n, "nll: label {l} out of range for {n} classes");
            total -= vp.data()[i * n + l].max(NLL_CLAMP).ln();
        }
        let t = Tensor::scalar(total / b as f64);
        let ng = self.any_grad(&[p]);
        self.push(
            t,
            Op::Nll {
                p,
                labels: labels.to_vec(),
            },
            ng,
        )
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn backward(graph: &Graph, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Add(a, b) => {
            accumulate(graph, grads, *a, |d| add_into(d, gd));
            accumulate(graph, grads, *b, |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            accumulate(graph, grads, *a, |d| add_into(d, gd));
            accumulate(graph, grads, *b, |d| {
                d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y)
            });
        }
        Op::Mul(a, b) => {
            let vb = graph.value(*b).data();
            accumulate(graph, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * vb[i];
                }
            });
            let va = graph.value(*a).data();
            accumulate(graph, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * va[i];
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(graph, grads, *x, |d| {
                d.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y)
            });
        }
        Op::AddBias { x, bias } => {
            accumulate(graph, grads, *x, |d| add_into(d, gd));
            let n = graph.value(*bias).len();
            accumulate(graph, grads, *bias, |d| {
                for (i, v) in gd.iter().enumerate() {
                    d[i % n] += v;
                }
            });
        }
        Op::ScaleRows { x, s } => {
            let batch = graph.value(*s).len();
            let inner = gd.len() / batch.max(1);
            let sd = graph.value(*s).data();
            accumulate(graph, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * sd[i / inner];
                }
            });
            let xd = graph.value(*x).data();
            accumulate(graph, grads, *s, |d| {
                for (bi, db) in d.iter_mut().enumerate() {
                    let r = bi * inner..(bi + 1) * inner;
                    *db += gd[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
        Op::Relu(x) => {
            let od = out.data();
            accumulate(graph, grads, *x, |d| {
                for i in 0..d.len() {
                    if od[i] > 0.0 {
                        d[i] += gd[i];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let od = out.data();
            accumulate(graph, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * od[i] * (1.0 - od[i]);
                }
            });
        }
        Op::RowNorm(x) => {
            let xd = graph.value(*x).data();
            let od = out.data();
            let inner = xd.len() / od.len().max(1);
            accumulate(graph, grads, *x, |d| {
                for (b, (&norm, &gb)) in od.iter().zip(gd).enumerate() {
                    // subgradient 0 at the origin
                    if norm > 0.0 {
                        let k = gb / norm;
                        for i in b * inner..(b + 1) * inner {
                            d[i] += k * xd[i];
                        }
                    }
                }
            });
        }
        Op::Nll { p, labels } => {
            let pd = graph.value(*p).data();
            let n = graph.value(*p).shape()[1];
            let scale = gd[0] / labels.len() as f64;
            accumulate(graph, grads, *p, |d| {
                for (i, &l) in labels.iter().enumerate() {
                    let v = pd[i * n + l];
                    if v > NLL_CLAMP {
                        d[i * n + l] -= scale / v;
                    }
                }
            });
        }
        _ => unreachable!("not an elementwise op"),
    }
}

#[inline]
pub(crate) fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
}
