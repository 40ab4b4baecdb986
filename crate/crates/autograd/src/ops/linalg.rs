use crate::gemm::{gemm, Mat};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `(batch, rows, cols)` of a stored 2-D or 3-D operand.
fn dims(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        ref s => panic!("matmul operand must be 2-D or 3-D, got {s:?}"),
    }
}

/// Strides of `op(X)` where `X` is stored row-major with `cols` columns.
fn op_strides(cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, cols)
    } else {
        (cols, 1)
    }
}

struct MatMulPlan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    a_size: usize,
    b_size: usize,
    a_strides: (usize, usize),
    b_strides: (usize, usize),
}

fn plan(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> MatMulPlan {
    let (ba, ar, ac) = dims(a);
    let (bb, br, bc) = dims(b);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
    let batch = ba.max(bb);
    assert!(
        (ba == batch || ba == 1) && (bb == batch || bb == 1),
        "matmul: incompatible batch sizes {ba} and {bb}"
    );
    MatMulPlan {
        batch,
        a_batched: ba == batch,
        b_batched: bb == batch,
        m,
        k,
        n,
        a_size: ar * ac,
        b_size: br * bc,
        a_strides: op_strides(ac, ta),
        b_strides: op_strides(bc, tb),
    }
}

impl MatMulPlan {
    fn a_mat<'a>(&self, data: &'a [f64], i: usize) -> Mat<'a> {
        let off = if self.a_batched { i * self.a_size } else { 0 };
        Mat {
            data: &data[off..off + self.a_size],
            rs: self.a_strides.0,
            cs: self.a_strides.1,
        }
    }

    fn b_mat<'a>(&self, data: &'a [f64], i: usize) -> Mat<'a> {
        let off = if self.b_batched { i * self.b_size } else { 0 };
        Mat {
            data: &data[off..off + self.b_size],
            rs: self.b_strides.0,
            cs: self.b_strides.1,
        }
    }
}

impl Graph {
    /// Batched `op(a) · op(b)` where `op` optionally transposes the last two
    /// axes. Either operand may be 2-D, in which case it is shared by every
    /// batch entry of the other.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let p = plan(va, vb, ta, tb);
        let mut out = vec![0.0; p.batch * p.m * p.n];
        let (ad, bd) = (va.data(), vb.data());
        for_each_chunk_mut(self.exec, &mut out, p.m * p.n, |i, c| {
            gemm(p.m, p.k, p.n, p.a_mat(ad, i), p.b_mat(bd, i), 0.0, c, p.n, 1);
        });
        let shape: Vec<usize> = if va.ndim() == 2 && vb.ndim() == 2 {
            vec![p.m, p.n]
        } else {
            vec![p.batch, p.m, p.n]
        };
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(&[a, b]);
        self.push(t, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Softmax along the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().expect("softmax on scalar");
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(vx.shape(), out);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("layer_norm on scalar");
        assert_eq!(self.value(gamma).shape(), &[d]);
        assert_eq!(self.value(beta).shape(), &[d]);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(vx.shape(), out);
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn backward(graph: &Graph, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (graph.value(*a), graph.value(*b));
            let p = plan(va, vb, *ta, *tb);
            let (ad, bd) = (va.data(), vb.data());
            let g_mat = |i: usize| Mat::row_major(&gd[i * p.m * p.n..(i + 1) * p.m * p.n], p.n);
            let exec = graph.exec;
            // d op(A) = G · op(B)^T, stored with op(A)'s strides
            accumulate(graph, grads, *a, |d| {
                if p.a_batched {
                    for_each_chunk_mut(exec, d, p.a_size, |i, c| {
                        gemm(p.m, p.n, p.k, g_mat(i), p.b_mat(bd, i).t(), 1.0, c, p.a_strides.0, p.a_strides.1);
                    });
                } else {
                    for i in 0..p.batch {
                        gemm(p.m, p.n, p.k, g_mat(i), p.b_mat(bd, i).t(), 1.0, d, p.a_strides.0, p.a_strides.1);
                    }
                }
            });
            // d op(B) = op(A)^T · G, stored with op(B)'s strides
            accumulate(graph, grads, *b, |d| {
                if p.b_batched {
                    for_each_chunk_mut(exec, d, p.b_size, |i, c| {
                        gemm(p.k, p.m, p.n, p.a_mat(ad, i).t(), g_mat(i), 1.0, c, p.b_strides.0, p.b_strides.1);
                    });
                } else {
                    for i in 0..p.batch {
                        gemm(p.k, p.m, p.n, p.a_mat(ad, i).t(), g_mat(i), 1.0, d, p.b_strides.0, p.b_strides.1);
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let n = *out.shape().last().unwrap();
            let od = out.data();
            accumulate(graph, grads, *x, |d| {
                for r in 0..od.len() / n {
                    let range = r * n..(r + 1) * n;
                    let y = &od[range.clone()];
                    let gr = &gd[range.clone()];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, dv) in d[range].iter_mut().enumerate() {
                        *dv += y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = graph.value(*gamma).data();
            let dim = gam.len();
            accumulate(graph, grads, *x, |d| {
                for (r, &is) in inv_std.iter().enumerate() {
                    let range = r * dim..(r + 1) * dim;
                    let h = &xhat[range.clone()];
                    let gr = &gd[range.clone()];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..dim {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= dim as f64;
                    mean_dh_h /= dim as f64;
                    for (j, dv) in d[range].iter_mut().enumerate() {
                        *dv += is * (gr[j] * gam[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
            });
            accumulate(graph, grads, *gamma, |d| {
                for (i, v) in gd.iter().enumerate() {
                    d[i % dim] += v * xhat[i];
                }
            });
            accumulate(graph, grads, *beta, |d| {
                for (i, v) in gd.iter().enumerate() {
                    d[i % dim] += v;
                }
            });
        }
        _ => unreachable!("not a linalg op"),
    }
}
