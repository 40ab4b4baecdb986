use crate::gemm::{gemm, Mat};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::parallel::{for_each_chunk_mut, map_indexed};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Geometry of a stride-1 2-D convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(w.len(), 4, "conv2d weight must be [O, C, kh, kw]");
        assert_eq!(x[1], w[1], "conv2d: input has {} channels, weight expects {}", x[1], w[1]);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        Self {
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: wd + 2 * pad - kw + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ol, p) = (self.out_len(), self.pad as isize);
        let mut cols = vec![0.0; self.patch() * ol];
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * ol;
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (ol, p) = (self.out_len(), self.pad as isize);
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * ol;
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(batch, channels, spatial)` for `[B, C, ...]` tensors.
fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [B, C, ...]");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Graph {
    /// Stride-1 2-D convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeom::new(vx.shape(), vw.shape(), pad);
        let batch = vx.shape()[0];
        let in_len = geo.c * geo.h * geo.w;
        let xd = vx.data();
        let cols: Option<Vec<Vec<f64>>> = if geo.is_pointwise() {
            None
        } else {
            Some(map_indexed(self.exec, batch, |b| geo.im2col(&xd[b * in_len..(b + 1) * in_len])))
        };
        let wd = vw.data();
        let bd = bias.map(|b| {
            let vb = self.value(b);
            assert_eq!(vb.shape(), &[geo.o], "conv2d: bias shape");
            vb.data()
        });
        let mut out = vec![0.0; batch * geo.o * geo.out_len()];
        let ol = geo.out_len();
        for_each_chunk_mut(self.exec, &mut out, geo.o * ol, |b, c| {
            if let Some(bd) = bd {
                for (o, row) in c.chunks_mut(ol).enumerate() {
                    row.iter_mut().for_each(|v| *v = bd[o]);
                }
            }
            let cm = match &cols {
                Some(cols) => Mat::row_major(&cols[b], ol),
                None => Mat::row_major(&xd[b * in_len..(b + 1) * in_len], ol),
            };
            let beta = if bd.is_some() { 1.0 } else { 0.0 };
            gemm(geo.o, geo.patch(), ol, Mat::row_major(wd, geo.patch()), cm, beta, c, ol, 1);
        });
        let t = Tensor::new(&[batch, geo.o, geo.oh, geo.ow], out);
        let ng = match bias {
            Some(b) => self.any_grad(&[x, w, b]),
            None => self.any_grad(&[x, w]),
        };
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b: bias,
                pad,
                cols,
            },
            ng,
        )
    }

    /// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.ndim(), 4, "max_pool2 expects [B, C, H, W]");
        let s = vx.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "max_pool2 on {h}x{w} map");
        assert!(vx.len() < u32::MAX as usize);
        let xd = vx.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], oh, ow], out);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::MaxPool2 { x, argmax }, ng)
    }

    /// Max over the channel axis: `[B, C, H, W] -> [B, 1, H, W]`.
    /// Ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (batch, ch, sp) = bcs(vx.shape());
        let xd = vx.data();
        let mut out = Vec::with_capacity(batch * sp);
        let mut argmax = Vec::with_capacity(batch * sp);
        for b in 0..batch {
            for s in 0..sp {
                let mut best = b * ch * sp + s;
                for c in 1..ch {
                    let idx = (b * ch + c) * sp + s;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best as u32);
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[1] = 1;
        let t = Tensor::new(&shape, out);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::ChannelMax { x, argmax }, ng)
    }

    /// Training-mode batch normalization over `(B, spatial)` per channel.
    /// Returns the output and the batch mean and biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let vx = self.value(x);
        let (batch, ch, sp) = bcs(vx.shape());
        let n = (batch * sp) as f64;
        let xd = vx.data();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for c in 0..ch {
            let mut s = 0.0;
            for b in 0..batch {
                s += xd[(b * ch + c) * sp..(b * ch + c + 1) * sp].iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for b in 0..batch {
                v += xd[(b * ch + c) * sp..(b * ch + c + 1) * sp]
                    .iter()
                    .map(|x| (x - m) * (x - m))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let t = Tensor::new(self.value(x).shape(), out);
        let ng = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (v, mean, var)
    }

    /// Per-channel affine normalization with fixed statistics (inference-mode
    /// batch normalization).
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, mean, &inv_std);
        let t = Tensor::new(self.value(x).shape(), out);
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            t,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let vx = self.value(x);
        let (batch, ch, sp) = bcs(vx.shape());
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gd.len(), ch, "normalization affine must have one entry per channel");
        assert_eq!(bd.len(), ch);
        assert_eq!(mean.len(), ch);
        let xd = vx.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                for i in (b * ch + c) * sp..(b * ch + c + 1) * sp {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * gd[c] + bd[c];
                }
            }
        }
        (out, xhat)
    }
}

pub(crate) fn backward(graph: &Graph, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Conv2d { x, w, b, pad, cols } => {
            let (vx, vw) = (graph.value(*x), graph.value(*w));
            let geo = ConvGeom::new(vx.shape(), vw.shape(), *pad);
            let batch = vx.shape()[0];
            let (in_len, ol) = (geo.c * geo.h * geo.w, geo.out_len());
            let out_len = geo.o * ol;
            let xd = vx.data();
            let wd = vw.data();
            let exec = graph.exec;
            let col_mat = |bi: usize| match cols {
                Some(cols) => Mat::row_major(&cols[bi], ol),
                None => Mat::row_major(&xd[bi * in_len..(bi + 1) * in_len], ol),
            };
            accumulate(graph, grads, *x, |d| {
                for_each_chunk_mut(exec, d, in_len, |bi, dx| {
                    let gy = Mat::row_major(&gd[bi * out_len..(bi + 1) * out_len], ol);
                    let wt = Mat::row_major(wd, geo.patch()).t();
                    if geo.is_pointwise() {
                        gemm(geo.patch(), geo.o, ol, wt, gy, 1.0, dx, ol, 1);
                    } else {
                        let mut dcols = vec![0.0; geo.patch() * ol];
                        gemm(geo.patch(), geo.o, ol, wt, gy, 0.0, &mut dcols, ol, 1);
                        geo.col2im_add(&dcols, dx);
                    }
                });
            });
            if graph.needs_grad(*w) {
                // per-sample partials summed in index order: identical in both execution modes
                let partials = map_indexed(exec, batch, |bi| {
                    let mut dw = vec![0.0; geo.o * geo.patch()];
                    let gy = Mat::row_major(&gd[bi * out_len..(bi + 1) * out_len], ol);
                    gemm(geo.o, ol, geo.patch(), gy, col_mat(bi).t(), 0.0, &mut dw, geo.patch(), 1);
                    dw
                });
                accumulate(graph, grads, *w, |d| {
                    for p in &partials {
                        d.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                    }
                });
            }
            if let Some(b) = b {
                accumulate(graph, grads, *b, |d| {
                    for bi in 0..batch {
                        for (o, dv) in d.iter_mut().enumerate() {
                            let start = bi * out_len + o * ol;
                            *dv += gd[start..start + ol].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
        Op::MaxPool2 { x, argmax } | Op::ChannelMax { x, argmax } => {
            accumulate(graph, grads, *x, |d| {
                for (i, &src) in argmax.iter().enumerate() {
                    d[src as usize] += gd[i];
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (batch, ch, sp) = bcs(g.shape());
            let n = (batch * sp) as f64;
            let gam = graph.value(*gamma).data();
            let mut sum_g = vec![0.0; ch];
            let mut sum_gh = vec![0.0; ch];
            for bi in 0..batch {
                for c in 0..ch {
                    for i in (bi * ch + c) * sp..(bi * ch + c + 1) * sp {
                        sum_g[c] += gd[i];
                        sum_gh[c] += gd[i] * xhat[i];
                    }
                }
            }
            accumulate(graph, grads, *x, |d| {
                for bi in 0..batch {
                    for c in 0..ch {
                        let k = gam[c] * inv_std[c];
                        let (mg, mgh) = (sum_g[c] / n, sum_gh[c] / n);
                        for i in (bi * ch + c) * sp..(bi * ch + c + 1) * sp {
                            d[i] += k * (gd[i] - mg - xhat[i] * mgh);
                        }
                    }
                }
            });
            accumulate(graph, grads, *gamma, |d| {
                d.iter_mut().zip(&sum_gh).for_each(|(a, b)| *a += b)
            });
            accumulate(graph, grads, *beta, |d| {
                d.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b)
            });
        }
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (batch, ch, sp) = bcs(g.shape());
            let gam = graph.value(*gamma).data();
            accumulate(graph, grads, *x, |d| {
                for bi in 0..batch {
                    for c in 0..ch {
                        let k = gam[c] * inv_std[c];
                        for i in (bi * ch + c) * sp..(bi * ch + c + 1) * sp {
                            d[i] += k * gd[i];
                        }
                    }
                }
            });
            let channel_sum = |f: &dyn Fn(usize) -> f64| {
                let mut s = vec![0.0; ch];
                for bi in 0..batch {
                    for (c, sc) in s.iter_mut().enumerate() {
                        for i in (bi * ch + c) * sp..(bi * ch + c + 1) * sp {
                            *sc += f(i);
                        }
                    }
                }
                s
            };
            let sgh = channel_sum(&|i| gd[i] * xhat[i]);
            let sg = channel_sum(&|i| gd[i]);
            accumulate(graph, grads, *gamma, |d| d.iter_mut().zip(&sgh).for_each(|(a, b)| *a += b));
            accumulate(graph, grads, *beta, |d| d.iter_mut().zip(&sg).for_each(|(a, b)| *a += b));
        }
        _ => unreachable!("not a convolutional op"),
    }
}
