//! Geometry ops: differentiable warping, keypoint Gaussians, first-order
//! motion grids, small-matrix algebra and TPS evaluation.

use super::{Graph, Op, Var};
use crate::tps::TpsTransform;
use ndarray::{Array3, Array4, ArrayD, ArrayView3, IxDyn};
use std::rc::Rc;

/// Normalized coordinate of pixel `i` on an `n`-wide axis (half-pixel grid).
pub fn norm_coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

/// Map a normalized coordinate to a (fractional) pixel index.
pub fn to_pixel(x: f64, n: usize) -> f64 {
    (x + 1.0) * n as f64 / 2.0 - 0.5
}

/// `(H, W, 2)` identity sampling grid in normalized coordinates.
pub fn identity_grid(h: usize, w: usize) -> Array3<f64> {
    let mut g = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            g[[i, j, 0]] = norm_coord(j, w);
            g[[i, j, 1]] = norm_coord(i, h);
        }
    }
    g
}

#[inline]
fn taps(p: f64, n: usize) -> (usize, usize, f64, bool) {
    let inside = (0.0..=(n as f64 - 1.0)).contains(&p);
    let pc = p.clamp(0.0, n as f64 - 1.0);
    let f = pc.floor();
    let i0 = f as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, pc - f, inside)
}

#[inline]
fn sample_bilinear(x: &ArrayView3<f64>, c: usize, px: f64, py: f64) -> f64 {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (x0, x1, wx, _) = taps(px, w);
    let (y0, y1, wy, _) = taps(py, h);
    let v00 = x[[c, y0, x0]];
    let v01 = x[[c, y0, x1]];
    let v10 = x[[c, y1, x0]];
    let v11 = x[[c, y1, x1]];
    (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11)
}

/// Plain (non-taped) backward warp used by inference paths and tests.
/// `x: (C, H, W)`, `grid: (Hg, Wg, 2)` normalized, border clamped.
pub fn grid_sample_forward(x: &ArrayView3<f64>, grid: &ArrayView3<f64>) -> Array3<f64> {
    let c = x.shape()[0];
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (hg, wg) = (grid.shape()[0], grid.shape()[1]);
    let mut out = Array3::zeros((c, hg, wg));
    for i in 0..hg {
        for j in 0..wg {
            let px = to_pixel(grid[[i, j, 0]], w);
            let py = to_pixel(grid[[i, j, 1]], h);
            for ci in 0..c {
                out[[ci, i, j]] = sample_bilinear(x, ci, px, py);
            }
        }
    }
    out
}

impl Graph {
    /// Backward warp: `out[n,c,i,j] = x[n,c]` sampled at `grid[n,i,j]`.
    /// Differentiable w.r.t. both the image and the grid.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(grid).to_vec();
        assert_eq!(xs.len(), 4, "grid_sample: x must be (N,C,H,W)");
        assert_eq!(gs.len(), 4, "grid_sample: grid must be (N,H,W,2)");
        assert_eq!(gs[0], xs[0], "grid_sample: batch mismatch");
        assert_eq!(gs[3], 2);
        let (n, c) = (xs[0], xs[1]);
        let (hg, wg) = (gs[1], gs[2]);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let gv = self.nodes[grid.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, c, hg, wg));
        for ni in 0..n {
            let xn = xv.index_axis(ndarray::Axis(0), ni);
            for i in 0..hg {
                for j in 0..wg {
                    let px = to_pixel(gv[[ni, i, j, 0]], xs[3]);
                    let py = to_pixel(gv[[ni, i, j, 1]], xs[2]);
                    for ci in 0..c {
                        out[[ni, ci, i, j]] = sample_bilinear(&xn, ci, px, py);
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[x, grid]);
        self.push(out.into_dyn(), ng, Op::GridSample { x, grid })
    }

    /// Unnormalized Gaussians `exp(-|z - p|^2 / 2 sigma^2)` on an `(h, w)` grid.
    pub fn kp_gaussian(&mut self, points: Var, h: usize, w: usize, sigma: f64) -> Var {
        let ps = self.shape(points).to_vec();
        assert_eq!(ps.len(), 3, "kp_gaussian: points must be (N,K,2)");
        assert_eq!(ps[2], 2);
        let (n, k) = (ps[0], ps[1]);
        let pv = self.nodes[points.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut out = Array4::<f64>::zeros((n, k, h, w));
        for ni in 0..n {
            for ki in 0..k {
                let (px, py) = (pv[[ni, ki, 0]], pv[[ni, ki, 1]]);
                for i in 0..h {
                    let dy = norm_coord(i, h) - py;
                    for j in 0..w {
                        let dx = norm_coord(j, w) - px;
                        out[[ni, ki, i, j]] = (-(dx * dx + dy * dy) * inv2s2).exp();
                    }
                }
            }
        }
        let ng = self.needs_grad(points);
        self.push(out.into_dyn(), ng, Op::KpGaussian { points, h, w, sigma })
    }

    /// Expectation of grid coordinates under heatmaps that sum to one.
    pub fn spatial_expectation(&mut self, heat: Var) -> Var {
        let hs = self.shape(heat).to_vec();
        assert_eq!(hs.len(), 4);
        let (n, k, h, w) = (hs[0], hs[1], hs[2], hs[3]);
        let hv = self.nodes[heat.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array3::<f64>::zeros((n, k, 2));
        for ni in 0..n {
            for ki in 0..k {
                let mut ex = 0.0;
                let mut ey = 0.0;
                for i in 0..h {
                    let gy = norm_coord(i, h);
                    for j in 0..w {
                        let v = hv[[ni, ki, i, j]];
                        ex += v * norm_coord(j, w);
                        ey += v * gy;
                    }
                }
                out[[ni, ki, 0]] = ex;
                out[[ni, ki, 1]] = ey;
            }
        }
        let ng = self.needs_grad(heat);
        self.push(out.into_dyn(), ng, Op::SpatialExpectation(heat))
    }

    /// Per-keypoint 2x2 matrix: spatial sum of `heat[k] * jmap[4k + 2r + c]`.
    pub fn heatmap_weighted_jacobian(&mut self, heat: Var, jmap: Var) -> Var {
        let hs = self.shape(heat).to_vec();
        let js = self.shape(jmap).to_vec();
        assert_eq!(hs.len(), 4);
        assert_eq!(js.len(), 4);
        assert_eq!(js[1], 4 * hs[1], "jmap must have 4 channels per keypoint");
        assert_eq!(&js[2..], &hs[2..]);
        let (n, k, h, w) = (hs[0], hs[1], hs[2], hs[3]);
        let hv = self.nodes[heat.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let jv = self.nodes[jmap.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array4::<f64>::zeros((n, k, 2, 2));
        for ni in 0..n {
            for ki in 0..k {
                for r in 0..2 {
                    for c in 0..2 {
                        let ch = 4 * ki + 2 * r + c;
                        let mut acc = 0.0;
                        for i in 0..h {
                            for j in 0..w {
                                acc += hv[[ni, ki, i, j]] * jv[[ni, ch, i, j]];
                            }
                        }
                        out[[ni, ki, r, c]] = acc;
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[heat, jmap]);
        self.push(out.into_dyn(), ng, Op::HeatmapWeightedJacobian { heat, jmap })
    }

    /// First-order motion grids: slot k maps `z -> u_src_k + J_k (z - u_drv_k)`.
    /// Output `(N, K, h, w, 2)`.
    pub fn sparse_grid(&mut self, u_src: Var, u_drv: Var, jac: Var, h: usize, w: usize) -> Var {
        let ss = self.shape(u_src).to_vec();
        assert_eq!(ss.len(), 3);
        assert_eq!(self.shape(u_drv), &ss[..]);
        assert_eq!(self.shape(jac), &[ss[0], ss[1], 2, 2]);
        let (n, k) = (ss[0], ss[1]);
        let sv = self.nodes[u_src.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let dv = self.nodes[u_drv.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let jv = self.nodes[jac.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, k, h, w, 2]));
        for ni in 0..n {
            for ki in 0..k {
                let (usx, usy) = (sv[[ni, ki, 0]], sv[[ni, ki, 1]]);
                let (udx, udy) = (dv[[ni, ki, 0]], dv[[ni, ki, 1]]);
                let (a, b) = (jv[[ni, ki, 0, 0]], jv[[ni, ki, 0, 1]]);
                let (c, d) = (jv[[ni, ki, 1, 0]], jv[[ni, ki, 1, 1]]);
                for i in 0..h {
                    let zy = norm_coord(i, h) - udy;
                    for j in 0..w {
                        let zx = norm_coord(j, w) - udx;
                        out[[ni, ki, i, j, 0]] = usx + a * zx + b * zy;
                        out[[ni, ki, i, j, 1]] = usy + c * zx + d * zy;
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[u_src, u_drv, jac]);
        self.push(out, ng, Op::SparseGrid { u_src, u_drv, jac, h, w })
    }

    /// Batched 2x2 inverse; caller must guard against singular inputs.
    pub fn inv2x2(&mut self, m: Var) -> Var {
        let ms = self.shape(m).to_vec();
        assert_eq!(&ms[ms.len() - 2..], &[2, 2]);
        let mv = &self.nodes[m.0].value;
        let mut out = mv.clone();
        let count: usize = ms[..ms.len() - 2].iter().product();
        {
            let flat_in = mv.view().into_shape_with_order((count, 2, 2)).unwrap();
            let mut flat = out.view_mut().into_shape_with_order((count, 2, 2)).unwrap();
            for t in 0..count {
                let (a, b, c, d) = (
                    flat_in[[t, 0, 0]],
                    flat_in[[t, 0, 1]],
                    flat_in[[t, 1, 0]],
                    flat_in[[t, 1, 1]],
                );
                let det = a * d - b * c;
                let inv = 1.0 / det;
                flat[[t, 0, 0]] = d * inv;
                flat[[t, 0, 1]] = -b * inv;
                flat[[t, 1, 0]] = -c * inv;
                flat[[t, 1, 1]] = a * inv;
            }
        }
        let ng = self.needs_grad(m);
        self.push(out, ng, Op::Inv2x2(m))
    }

    /// Batched 2x2 matrix product over matching leading axes.
    pub fn matmul2x2(&mut self, a: Var, b: Var) -> Var {
        let as_ = self.shape(a).to_vec();
        assert_eq!(self.shape(b), &as_[..]);
        assert_eq!(&as_[as_.len() - 2..], &[2, 2]);
        let count: usize = as_[..as_.len() - 2].iter().product();
        let av = self.nodes[a.0].value.view().into_shape_with_order((count, 2, 2)).unwrap().to_owned();
        let bv = self.nodes[b.0].value.view().into_shape_with_order((count, 2, 2)).unwrap().to_owned();
        let mut out = Array3::<f64>::zeros((count, 2, 2));
        for t in 0..count {
            for r in 0..2 {
                for c in 0..2 {
                    out[[t, r, c]] = av[[t, r, 0]] * bv[[t, 0, c]] + av[[t, r, 1]] * bv[[t, 1, c]];
                }
            }
        }
        let out = out.into_shape_with_order(IxDyn(&as_)).unwrap();
        let ng = self.any_needs_grad(&[a, b]);
        self.push(out, ng, Op::MatMul2x2(a, b))
    }

    /// Evaluate per-sample TPS transforms at `(N, K, 2)` points.
    pub fn tps_eval(&mut self, points: Var, tps: Rc<Vec<TpsTransform>>) -> Var {
        let ps = self.shape(points).to_vec();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps[0], tps.len(), "tps_eval: one transform per sample");
        let pv = self.nodes[points.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = Array3::<f64>::zeros((ps[0], ps[1], 2));
        for ni in 0..ps[0] {
            for ki in 0..ps[1] {
                let q = tps[ni].eval([pv[[ni, ki, 0]], pv[[ni, ki, 1]]]);
                out[[ni, ki, 0]] = q[0];
                out[[ni, ki, 1]] = q[1];
            }
        }
        let ng = self.needs_grad(points);
        self.push(out.into_dyn(), ng, Op::TpsEval { points, tps })
    }

    /// Analytic spatial derivative of per-sample TPS transforms: `(N, K, 2, 2)`.
    pub fn tps_jacobian(&mut self, points: Var, tps: Rc<Vec<TpsTransform>>) -> Var {
        let ps = self.shape(points).to_vec();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps[0], tps.len());
        let pv = self.nodes[points.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = Array4::<f64>::zeros((ps[0], ps[1], 2, 2));
        for ni in 0..ps[0] {
            for ki in 0..ps[1] {
                let j = tps[ni].jacobian([pv[[ni, ki, 0]], pv[[ni, ki, 1]]]);
                for r in 0..2 {
                    for c in 0..2 {
                        out[[ni, ki, r, c]] = j[r][c];
                    }
                }
            }
        }
        let ng = self.needs_grad(points);
        self.push(out.into_dyn(), ng, Op::TpsJacobian { points, tps })
    }

    /// Pointwise convex combination of sparse motions by attention weights.
    pub fn attention_combine(&mut self, attn: Var, sparse: Var) -> Var {
        let asx = self.shape(attn).to_vec();
        let ss = self.shape(sparse).to_vec();
        assert_eq!(asx.len(), 4);
        assert_eq!(ss.len(), 5);
        assert_eq!(&ss[..4], &asx[..]);
        assert_eq!(ss[4], 2);
        let (n, m, h, w) = (asx[0], asx[1], asx[2], asx[3]);
        let av = self.nodes[attn.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let sv = &self.nodes[sparse.0].value;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, h, w, 2]));
        for ni in 0..n {
            for mi in 0..m {
                for i in 0..h {
                    for j in 0..w {
                        let wgt = av[[ni, mi, i, j]];
                        out[[ni, i, j, 0]] += wgt * sv[[ni, mi, i, j, 0]];
                        out[[ni, i, j, 1]] += wgt * sv[[ni, mi, i, j, 1]];
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[attn, sparse]);
        self.push(out, ng, Op::AttentionCombine { attn, sparse })
    }

    pub(super) fn backward_geom_family(&self, i: usize) -> Vec<(usize, ArrayD<f64>)> {
        let g = self.nodes[i].grad.as_ref().unwrap();
        let out = &self.nodes[i].value;
        let mut deltas: Vec<(usize, ArrayD<f64>)> = Vec::new();
        match &self.nodes[i].op {
            Op::GridSample { x, grid } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gv = self.nodes[grid.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (hg, wg) = (gv.shape()[1], gv.shape()[2]);
                let want_x = self.nodes[x.0].needs_grad;
                let want_g = self.nodes[grid.0].needs_grad;
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut dg = Array4::<f64>::zeros((n, hg, wg, 2));
                for ni in 0..n {
                    for gi in 0..hg {
                        for gj in 0..wg {
                            let px = to_pixel(gv[[ni, gi, gj, 0]], w);
                            let py = to_pixel(gv[[ni, gi, gj, 1]], h);
                            let (x0, x1, wx, in_x) = taps(px, w);
                            let (y0, y1, wy, in_y) = taps(py, h);
                            let mut dpx = 0.0;
                            let mut dpy = 0.0;
                            for ci in 0..c {
                                let go = g4[[ni, ci, gi, gj]];
                                if go == 0.0 {
                                    continue;
                                }
                                if want_x {
                                    dx[[ni, ci, y0, x0]] += go * (1.0 - wy) * (1.0 - wx);
                                    dx[[ni, ci, y0, x1]] += go * (1.0 - wy) * wx;
                                    dx[[ni, ci, y1, x0]] += go * wy * (1.0 - wx);
                                    dx[[ni, ci, y1, x1]] += go * wy * wx;
                                }
                                if want_g {
                                    let v00 = xv[[ni, ci, y0, x0]];
                                    let v01 = xv[[ni, ci, y0, x1]];
                                    let v10 = xv[[ni, ci, y1, x0]];
                                    let v11 = xv[[ni, ci, y1, x1]];
                                    dpx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                                    dpy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                                }
                            }
                            if want_g {
                                if in_x {
                                    dg[[ni, gi, gj, 0]] = dpx * w as f64 / 2.0;
                                }
                                if in_y {
                                    dg[[ni, gi, gj, 1]] = dpy * h as f64 / 2.0;
                                }
                            }
                        }
                    }
                }
                if want_x {
                    deltas.push((x.0, dx.into_dyn()));
                }
                if want_g {
                    deltas.push((grid.0, dg.into_dyn()));
                }
            }
            Op::KpGaussian { points, h, w, sigma } => {
                if self.nodes[points.0].needs_grad {
                    let ps = self.nodes[points.0].value.shape().to_vec();
                    let pv = self.nodes[points.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let ov = out.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let inv_s2 = 1.0 / (sigma * sigma);
                    let mut dp = Array3::<f64>::zeros((ps[0], ps[1], 2));
                    for ni in 0..ps[0] {
                        for ki in 0..ps[1] {
                            let (px, py) = (pv[[ni, ki, 0]], pv[[ni, ki, 1]]);
                            let mut ax = 0.0;
                            let mut ay = 0.0;
                            for ii in 0..*h {
                                let dyv = norm_coord(ii, *h) - py;
                                for jj in 0..*w {
                                    let dxv = norm_coord(jj, *w) - px;
                                    let e = ov[[ni, ki, ii, jj]] * g4[[ni, ki, ii, jj]] * inv_s2;
                                    ax += e * dxv;
                                    ay += e * dyv;
                                }
                            }
                            dp[[ni, ki, 0]] = ax;
                            dp[[ni, ki, 1]] = ay;
                        }
                    }
                    deltas.push((points.0, dp.into_dyn()));
                }
            }
            Op::SpatialExpectation(heat) => {
                if self.nodes[heat.0].needs_grad {
                    let hs = self.nodes[heat.0].value.shape().to_vec();
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let mut dh = Array4::<f64>::zeros((hs[0], hs[1], hs[2], hs[3]));
                    for ni in 0..hs[0] {
                        for ki in 0..hs[1] {
                            let (gx, gy) = (g3[[ni, ki, 0]], g3[[ni, ki, 1]]);
                            for ii in 0..hs[2] {
                                let cy = norm_coord(ii, hs[2]);
                                for jj in 0..hs[3] {
                                    dh[[ni, ki, ii, jj]] = gx * norm_coord(jj, hs[3]) + gy * cy;
                                }
                            }
                        }
                    }
                    deltas.push((heat.0, dh.into_dyn()));
                }
            }
            Op::HeatmapWeightedJacobian { heat, jmap } => {
                let hs = self.nodes[heat.0].value.shape().to_vec();
                let hv = self.nodes[heat.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let jv = self.nodes[jmap.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (n, k, h, w) = (hs[0], hs[1], hs[2], hs[3]);
                if self.nodes[heat.0].needs_grad {
                    let mut dh = Array4::<f64>::zeros((n, k, h, w));
                    for ni in 0..n {
                        for ki in 0..k {
                            for r in 0..2 {
                                for c in 0..2 {
                                    let go = g4[[ni, ki, r, c]];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let ch = 4 * ki + 2 * r + c;
                                    for ii in 0..h {
                                        for jj in 0..w {
                                            dh[[ni, ki, ii, jj]] += go * jv[[ni, ch, ii, jj]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    deltas.push((heat.0, dh.into_dyn()));
                }
                if self.nodes[jmap.0].needs_grad {
                    let mut dj = Array4::<f64>::zeros((n, 4 * k, h, w));
                    for ni in 0..n {
                        for ki in 0..k {
                            for r in 0..2 {
                                for c in 0..2 {
                                    let go = g4[[ni, ki, r, c]];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let ch = 4 * ki + 2 * r + c;
                                    for ii in 0..h {
                                        for jj in 0..w {
                                            dj[[ni, ch, ii, jj]] += go * hv[[ni, ki, ii, jj]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    deltas.push((jmap.0, dj.into_dyn()));
                }
            }
            Op::SparseGrid { u_src, u_drv, jac, h, w } => {
                let ss = self.nodes[u_src.0].value.shape().to_vec();
                let (n, k) = (ss[0], ss[1]);
                let dv = self.nodes[u_drv.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let jv = self.nodes[jac.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let want_s = self.nodes[u_src.0].needs_grad;
                let want_d = self.nodes[u_drv.0].needs_grad;
                let want_j = self.nodes[jac.0].needs_grad;
                let mut dus = Array3::<f64>::zeros((n, k, 2));
                let mut dud = Array3::<f64>::zeros((n, k, 2));
                let mut djac = Array4::<f64>::zeros((n, k, 2, 2));
                for ni in 0..n {
                    for ki in 0..k {
                        let (udx, udy) = (dv[[ni, ki, 0]], dv[[ni, ki, 1]]);
                        let jm = [
                            [jv[[ni, ki, 0, 0]], jv[[ni, ki, 0, 1]]],
                            [jv[[ni, ki, 1, 0]], jv[[ni, ki, 1, 1]]],
                        ];
                        let mut sum_g = [0.0; 2];
                        let mut sum_gz = [[0.0; 2]; 2]; // [r][c]: sum g_r * (z_c - ud_c)
                        for ii in 0..*h {
                            let zy = norm_coord(ii, *h) - udy;
                            for jj in 0..*w {
                                let zx = norm_coord(jj, *w) - udx;
                                for r in 0..2 {
                                    let go = g[[ni, ki, ii, jj, r]];
                                    sum_g[r] += go;
                                    sum_gz[r][0] += go * zx;
                                    sum_gz[r][1] += go * zy;
                                }
                            }
                        }
                        for r in 0..2 {
                            dus[[ni, ki, r]] = sum_g[r];
                            for c in 0..2 {
                                djac[[ni, ki, r, c]] = sum_gz[r][c];
                            }
                        }
                        for c in 0..2 {
                            dud[[ni, ki, c]] = -(sum_g[0] * jm[0][c] + sum_g[1] * jm[1][c]);
                        }
                    }
                }
                if want_s {
                    deltas.push((u_src.0, dus.into_dyn()));
                }
                if want_d {
                    deltas.push((u_drv.0, dud.into_dyn()));
                }
                if want_j {
                    deltas.push((jac.0, djac.into_dyn()));
                }
            }
            Op::Inv2x2(m) => {
                if self.nodes[m.0].needs_grad {
                    let ms = self.nodes[m.0].value.shape().to_vec();
                    let count: usize = ms[..ms.len() - 2].iter().product();
                    let y = out.view().into_shape_with_order((count, 2, 2)).unwrap();
                    let gm = g.view().into_shape_with_order((count, 2, 2)).unwrap();
                    let mut dm = Array3::<f64>::zeros((count, 2, 2));
                    for t in 0..count {
                        // dM = -Y^T G Y^T
                        let yt = [[y[[t, 0, 0]], y[[t, 1, 0]]], [y[[t, 0, 1]], y[[t, 1, 1]]]];
                        let gt = [[gm[[t, 0, 0]], gm[[t, 0, 1]]], [gm[[t, 1, 0]], gm[[t, 1, 1]]]];
                        let mut tmp = [[0.0; 2]; 2];
                        for r in 0..2 {
                            for c in 0..2 {
                                tmp[r][c] = yt[r][0] * gt[0][c] + yt[r][1] * gt[1][c];
                            }
                        }
                        for r in 0..2 {
                            for c in 0..2 {
                                dm[[t, r, c]] = -(tmp[r][0] * yt[0][c] + tmp[r][1] * yt[1][c]);
                            }
                        }
                    }
                    deltas.push((
                        m.0,
                        dm.into_shape_with_order(IxDyn(&ms)).unwrap(),
                    ));
                }
            }
            Op::MatMul2x2(a, b) => {
                let as_ = self.nodes[a.0].value.shape().to_vec();
                let count: usize = as_[..as_.len() - 2].iter().product();
                let av = self.nodes[a.0].value.view().into_shape_with_order((count, 2, 2)).unwrap();
                let bv = self.nodes[b.0].value.view().into_shape_with_order((count, 2, 2)).unwrap();
                let gm = g.view().into_shape_with_order((count, 2, 2)).unwrap();
                if self.nodes[a.0].needs_grad {
                    let mut da = Array3::<f64>::zeros((count, 2, 2));
                    for t in 0..count {
                        for r in 0..2 {
                            for c in 0..2 {
                                da[[t, r, c]] =
                                    gm[[t, r, 0]] * bv[[t, c, 0]] + gm[[t, r, 1]] * bv[[t, c, 1]];
                            }
                        }
                    }
                    deltas.push((a.0, da.into_shape_with_order(IxDyn(&as_)).unwrap()));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = Array3::<f64>::zeros((count, 2, 2));
                    for t in 0..count {
                        for r in 0..2 {
                            for c in 0..2 {
                                db[[t, r, c]] =
                                    av[[t, 0, r]] * gm[[t, 0, c]] + av[[t, 1, r]] * gm[[t, 1, c]];
                            }
                        }
                    }
                    deltas.push((b.0, db.into_shape_with_order(IxDyn(&as_)).unwrap()));
                }
            }
            Op::TpsEval { points, tps } => {
                if self.nodes[points.0].needs_grad {
                    let ps = self.nodes[points.0].value.shape().to_vec();
                    let pv = self.nodes[points.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let mut dp = Array3::<f64>::zeros((ps[0], ps[1], 2));
                    for ni in 0..ps[0] {
                        for ki in 0..ps[1] {
                            let j = tps[ni].jacobian([pv[[ni, ki, 0]], pv[[ni, ki, 1]]]);
                            for c in 0..2 {
                                dp[[ni, ki, c]] =
                                    g3[[ni, ki, 0]] * j[0][c] + g3[[ni, ki, 1]] * j[1][c];
                            }
                        }
                    }
                    deltas.push((points.0, dp.into_dyn()));
                }
            }
            Op::TpsJacobian { points, tps } => {
                if self.nodes[points.0].needs_grad {
                    let ps = self.nodes[points.0].value.shape().to_vec();
                    let pv = self.nodes[points.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut dp = Array3::<f64>::zeros((ps[0], ps[1], 2));
                    for ni in 0..ps[0] {
                        for ki in 0..ps[1] {
                            let hh = tps[ni].jacobian_derivative([pv[[ni, ki, 0]], pv[[ni, ki, 1]]]);
                            for c in 0..2 {
                                let mut acc = 0.0;
                                for r in 0..2 {
                                    for c2 in 0..2 {
                                        acc += g4[[ni, ki, r, c2]] * hh[r][c2][c];
                                    }
                                }
                                dp[[ni, ki, c]] = acc;
                            }
                        }
                    }
                    deltas.push((points.0, dp.into_dyn()));
                }
            }
            Op::AttentionCombine { attn, sparse } => {
                let asx = self.nodes[attn.0].value.shape().to_vec();
                let (n, m, h, w) = (asx[0], asx[1], asx[2], asx[3]);
                let av = self.nodes[attn.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let sv = &self.nodes[sparse.0].value;
                if self.nodes[attn.0].needs_grad {
                    let mut da = Array4::<f64>::zeros((n, m, h, w));
                    for ni in 0..n {
                        for mi in 0..m {
                            for ii in 0..h {
                                for jj in 0..w {
                                    da[[ni, mi, ii, jj]] = g[[ni, ii, jj, 0]]
                                        * sv[[ni, mi, ii, jj, 0]]
                                        + g[[ni, ii, jj, 1]] * sv[[ni, mi, ii, jj, 1]];
                                }
                            }
                        }
                    }
                    deltas.push((attn.0, da.into_dyn()));
                }
                if self.nodes[sparse.0].needs_grad {
                    let mut ds = ArrayD::<f64>::zeros(IxDyn(&[n, m, h, w, 2]));
                    for ni in 0..n {
                        for mi in 0..m {
                            for ii in 0..h {
                                for jj in 0..w {
                                    let wgt = av[[ni, mi, ii, jj]];
                                    ds[[ni, mi, ii, jj, 0]] = wgt * g[[ni, ii, jj, 0]];
                                    ds[[ni, mi, ii, jj, 1]] = wgt * g[[ni, ii, jj, 1]];
                                }
                            }
                        }
                    }
                    deltas.push((sparse.0, ds));
                }
            }
            _ => unreachable!("backward_geom_family: wrong op"),
        }
        deltas
    }
}
