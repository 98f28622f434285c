//! Convolution, pooling and resampling kernels (im2col + GEMM).

use super::{Graph, Op, Var};
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView3, Axis, IxDyn};

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = x.index_axis(Axis(0), ci);
                    let src = src.index_axis(Axis(0), ii as usize);
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = dcols.row(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dx[[ci, ii as usize, jj as usize]] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    /// 2-d convolution, square kernel, zero padding.
    /// `x: (N, Ci, H, W)`, `w: (Co, Ci, k, k)`, `b: (Co,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: x must be (N,C,H,W)");
        assert_eq!(ws.len(), 4, "conv2d: w must be (Co,Ci,k,k)");
        assert_eq!(ws[1], xs[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d: bias shape");
        let (n, ci, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(w_in, k, stride, pad);

        let wmat = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order((co, ci * k * k))
            .unwrap()
            .to_owned();
        let bias = self.nodes[b.0].value.clone();
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();

        let mut y = Array4::<f64>::zeros((n, co, ho, wo));
        for ni in 0..n {
            let cols = im2col(&xv.index_axis(Axis(0), ni), k, stride, pad, ho, wo);
            let yn = wmat.dot(&cols); // (Co, Ho*Wo)
            let mut dst = y.index_axis_mut(Axis(0), ni);
            for c_out in 0..co {
                let bval = bias[[c_out]];
                let src = yn.row(c_out);
                let mut d = dst.index_axis_mut(Axis(0), c_out);
                for oi in 0..ho {
                    for oj in 0..wo {
                        d[[oi, oj]] = src[oi * wo + oj] + bval;
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[x, w, b]);
        self.push(y.into_dyn(), ng, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Non-overlapping average pooling by factor `k` (spatial dims must divide).
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert!(s[2] % k == 0 && s[3] % k == 0, "avg_pool: size not divisible");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((n, c, ho, wo));
        let inv = 1.0 / (k * k) as f64;
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                acc += xv[[ni, ci, oi * k + di, oj * k + dj]];
                            }
                        }
                        y[[ni, ci, oi, oj]] = acc * inv;
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        self.push(y.into_dyn(), ng, Op::AvgPool(x, k))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[[ni, ci, i, j]];
                        y[[ni, ci, 2 * i, 2 * j]] = v;
                        y[[ni, ci, 2 * i, 2 * j + 1]] = v;
                        y[[ni, ci, 2 * i + 1, 2 * j]] = v;
                        y[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        self.push(y.into_dyn(), ng, Op::UpsampleNearest2(x))
    }

    /// Bilinear resize to `(out_h, out_w)` with the half-pixel convention and
    /// edge clamping. Works on any `(N, C, H, W)` tensor, including coordinate
    /// fields stored channels-first.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h == out_h && w == out_w {
            // Still record a node so downstream code need not special-case.
            let v = self.nodes[x.0].value.clone();
            let ng = self.needs_grad(x);
            return self.push(v, ng, Op::Reshape(x));
        }
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((n, c, out_h, out_w));
        for oi in 0..out_h {
            let (i0, i1, wi) = resize_taps(oi, out_h, h);
            for oj in 0..out_w {
                let (j0, j1, wj) = resize_taps(oj, out_w, w);
                for ni in 0..n {
                    for ci in 0..c {
                        let v00 = xv[[ni, ci, i0, j0]];
                        let v01 = xv[[ni, ci, i0, j1]];
                        let v10 = xv[[ni, ci, i1, j0]];
                        let v11 = xv[[ni, ci, i1, j1]];
                        y[[ni, ci, oi, oj]] = (1.0 - wi) * ((1.0 - wj) * v00 + wj * v01)
                            + wi * ((1.0 - wj) * v10 + wj * v11);
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        self.push(y.into_dyn(), ng, Op::ResizeBilinear { x, out_h, out_w })
    }

    /// Bilinear resize of an `(N, H, W, 2)` normalized coordinate field.
    /// Values are resolution-independent, so plain bilinear interpolation of
    /// the coordinates is the correct rescaling.
    pub fn resize_field(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(s[3], 2, "resize_field: expects (N,H,W,2)");
        let (n, h, w) = (s[0], s[1], s[2]);
        if h == out_h && w == out_w {
            let v = self.nodes[x.0].value.clone();
            let ng = self.needs_grad(x);
            return self.push(v, ng, Op::Reshape(x));
        }
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::<f64>::zeros((n, out_h, out_w, 2));
        for oi in 0..out_h {
            let (i0, i1, wi) = resize_taps(oi, out_h, h);
            for oj in 0..out_w {
                let (j0, j1, wj) = resize_taps(oj, out_w, w);
                for ni in 0..n {
                    for c in 0..2 {
                        let v00 = xv[[ni, i0, j0, c]];
                        let v01 = xv[[ni, i0, j1, c]];
                        let v10 = xv[[ni, i1, j0, c]];
                        let v11 = xv[[ni, i1, j1, c]];
                        y[[ni, oi, oj, c]] = (1.0 - wi) * ((1.0 - wj) * v00 + wj * v01)
                            + wi * ((1.0 - wj) * v10 + wj * v11);
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        self.push(y.into_dyn(), ng, Op::ResizeField { x, out_h, out_w })
    }

    pub(super) fn backward_conv_family(&self, i: usize) -> Vec<(usize, ArrayD<f64>)> {
        let g = self.nodes[i].grad.as_ref().unwrap();
        let mut deltas: Vec<(usize, ArrayD<f64>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (n, ci, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
                let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                let want_b = self.nodes[b.0].needs_grad;

                let mut dw = Array2::<f64>::zeros((co, ci * k * k));
                let mut dx = Array4::<f64>::zeros((n, ci, h, w_in));
                let wmat = self.nodes[w.0]
                    .value
                    .view()
                    .into_shape_with_order((co, ci * k * k))
                    .unwrap()
                    .to_owned();
                for ni in 0..n {
                    let gn = g4
                        .index_axis(Axis(0), ni)
                        .to_owned()
                        .into_shape_with_order((co, ho * wo))
                        .unwrap();
                    if want_w {
                        let cols = im2col(&xv.index_axis(Axis(0), ni), k, *stride, *pad, ho, wo);
                        dw = dw + gn.dot(&cols.t());
                    }
                    if want_x {
                        let dcols = wmat.t().dot(&gn); // (Ci*k*k, Ho*Wo)
                        let dxn = col2im(&dcols, ci, h, w_in, k, *stride, *pad, ho, wo);
                        dx.index_axis_mut(Axis(0), ni).assign(&dxn);
                    }
                }
                if want_x {
                    deltas.push((x.0, dx.into_dyn()));
                }
                if want_w {
                    deltas.push((
                        w.0,
                        dw.into_shape_with_order(IxDyn(&[co, ci, k, k])).unwrap(),
                    ));
                }
                if want_b {
                    let mut db = ArrayD::zeros(IxDyn(&[co]));
                    for c_out in 0..co {
                        db[[c_out]] = g4.index_axis(Axis(1), c_out).sum();
                    }
                    deltas.push((b.0, db));
                }
            }
            Op::AvgPool(x, k) => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let inv = 1.0 / (*k * *k) as f64;
                    let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                    for ni in 0..xs[0] {
                        for ci in 0..xs[1] {
                            for oi in 0..xs[2] / k {
                                for oj in 0..xs[3] / k {
                                    let gv = g4[[ni, ci, oi, oj]] * inv;
                                    for di in 0..*k {
                                        for dj in 0..*k {
                                            dx[[ni, ci, oi * k + di, oj * k + dj]] = gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    deltas.push((x.0, dx.into_dyn()));
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut dx = Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                    for ni in 0..xs[0] {
                        for ci in 0..xs[1] {
                            for i in 0..xs[2] {
                                for j in 0..xs[3] {
                                    dx[[ni, ci, i, j]] = g4[[ni, ci, 2 * i, 2 * j]]
                                        + g4[[ni, ci, 2 * i, 2 * j + 1]]
                                        + g4[[ni, ci, 2 * i + 1, 2 * j]]
                                        + g4[[ni, ci, 2 * i + 1, 2 * j + 1]];
                                }
                            }
                        }
                    }
                    deltas.push((x.0, dx.into_dyn()));
                }
            }
            Op::ResizeField { x, out_h, out_w } => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (h, w) = (xs[1], xs[2]);
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut dx = Array4::<f64>::zeros((xs[0], h, w, 2));
                    for oi in 0..*out_h {
                        let (i0, i1, wi) = resize_taps(oi, *out_h, h);
                        for oj in 0..*out_w {
                            let (j0, j1, wj) = resize_taps(oj, *out_w, w);
                            for ni in 0..xs[0] {
                                for c in 0..2 {
                                    let gv = g4[[ni, oi, oj, c]];
                                    dx[[ni, i0, j0, c]] += gv * (1.0 - wi) * (1.0 - wj);
                                    dx[[ni, i0, j1, c]] += gv * (1.0 - wi) * wj;
                                    dx[[ni, i1, j0, c]] += gv * wi * (1.0 - wj);
                                    dx[[ni, i1, j1, c]] += gv * wi * wj;
                                }
                            }
                        }
                    }
                    deltas.push((x.0, dx.into_dyn()));
                }
            }
            Op::ResizeBilinear { x, out_h, out_w } => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut dx = Array4::<f64>::zeros((xs[0], xs[1], h, w));
                    for oi in 0..*out_h {
                        let (i0, i1, wi) = resize_taps(oi, *out_h, h);
                        for oj in 0..*out_w {
                            let (j0, j1, wj) = resize_taps(oj, *out_w, w);
                            for ni in 0..xs[0] {
                                for ci in 0..xs[1] {
                                    let gv = g4[[ni, ci, oi, oj]];
                                    dx[[ni, ci, i0, j0]] += gv * (1.0 - wi) * (1.0 - wj);
                                    dx[[ni, ci, i0, j1]] += gv * (1.0 - wi) * wj;
                                    dx[[ni, ci, i1, j0]] += gv * wi * (1.0 - wj);
                                    dx[[ni, ci, i1, j1]] += gv * wi * wj;
                                }
                            }
                        }
                    }
                    deltas.push((x.0, dx.into_dyn()));
                }
            }
            _ => unreachable!("backward_conv_family: wrong op"),
        }
        deltas
    }
}

/// Source taps and weight for half-pixel bilinear resizing with edge clamp.
fn resize_taps(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
    let f = src.floor();
    let w = src - f;
    let i0 = f.max(0.0) as usize;
    let i1 = (f + 1.0).min(in_n as f64 - 1.0).max(0.0) as usize;
    let i0 = i0.min(in_n - 1);
    (i0, i1, w)
}
