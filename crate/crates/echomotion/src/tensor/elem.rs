//! Elementwise ops, reductions, softmax, instance norm, and the backward
//! dispatcher for the tape.

use super::{Graph, Op, Var};
use ndarray::{ArrayD, Axis, IxDyn};

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::MulScalar(a, s))
    }

    /// `(N, C, H, W) + (C,)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "add_bias: x must be 4-d");
        assert_eq!(self.shape(b), &[xs[1]], "add_bias: bias must be (C,)");
        let bias = self.nodes[b.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        {
            let mut v4 = v.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for c in 0..xs[1] {
                let bc = bias[[c]];
                v4.index_axis_mut(Axis(1), c).mapv_inplace(|t| t + bc);
            }
        }
        let ng = self.any_needs_grad(&[x, b]);
        self.push(v, ng, Op::AddBias(x, b))
    }

    /// `(N, C, H, W) * (N, 1, H, W)`, broadcasting the mask over channels.
    pub fn mul_channel_bcast(&mut self, x: Var, s: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ss, vec![xs[0], 1, xs[2], xs[3]], "mul_channel_bcast: mask shape");
        let mask = self.nodes[s.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        {
            let mut v4 = v.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            let m4 = mask.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            for n in 0..xs[0] {
                for c in 0..xs[1] {
                    for i in 0..xs[2] {
                        for j in 0..xs[3] {
                            v4[[n, c, i, j]] *= m4[[n, 0, i, j]];
                        }
                    }
                }
            }
        }
        let ng = self.any_needs_grad(&[x, s]);
        self.push(v, ng, Op::MulChannelBcast(x, s))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.needs_grad(a);
        self.push(v, ng, Op::LeakyRelu(a, slope))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        let ng = self.needs_grad(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), ng, Op::MeanAll(a))
    }

    /// Softmax over the trailing two axes of `(N, K, H, W)`.
    pub fn softmax_spatial(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let x = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = x.to_owned();
        for n in 0..s[0] {
            for k in 0..s[1] {
                let mut map = y.index_axis_mut(Axis(0), n);
                let mut map = map.index_axis_mut(Axis(0), k);
                let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                map.mapv_inplace(|t| (t - mx).exp());
                let sum: f64 = map.iter().sum();
                map.mapv_inplace(|t| t / sum);
            }
        }
        let ng = self.needs_grad(a);
        self.push(y.into_dyn(), ng, Op::SoftmaxSpatial(a))
    }

    /// Softmax over axis 1 of `(N, M, H, W)`.
    pub fn softmax_channel(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 4);
        let x = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = x.to_owned();
        for n in 0..s[0] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let mut mx = f64::NEG_INFINITY;
                    for m in 0..s[1] {
                        mx = mx.max(y[[n, m, i, j]]);
                    }
                    let mut sum = 0.0;
                    for m in 0..s[1] {
                        let e = (y[[n, m, i, j]] - mx).exp();
                        y[[n, m, i, j]] = e;
                        sum += e;
                    }
                    for m in 0..s[1] {
                        y[[n, m, i, j]] /= sum;
                    }
                }
            }
        }
        let ng = self.needs_grad(a);
        self.push(y.into_dyn(), ng, Op::SoftmaxChannel(a))
    }

    /// Per-sample, per-channel normalization with learned affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(self.shape(gamma), &[s[1]]);
        assert_eq!(self.shape(beta), &[s[1]]);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let g = self.nodes[gamma.0].value.clone();
        let b = self.nodes[beta.0].value.clone();
        let mut y = xv.to_owned();
        let m = (s[2] * s[3]) as f64;
        let mut cache = Vec::with_capacity(s[0] * s[1]);
        for n in 0..s[0] {
            for c in 0..s[1] {
                let mut mean = 0.0;
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        mean += y[[n, c, i, j]];
                    }
                }
                mean /= m;
                let mut var = 0.0;
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        let d = y[[n, c, i, j]] - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let istd = 1.0 / (var + eps).sqrt();
                let (gc, bc) = (g[[c]], b[[c]]);
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        y[[n, c, i, j]] = gc * (y[[n, c, i, j]] - mean) * istd + bc;
                    }
                }
                cache.push((mean, istd));
            }
        }
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        self.push(
            y.into_dyn(),
            ng,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                eps,
                cache,
            },
        )
    }

    pub fn concat_ch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        assert_eq!(s0.len(), 4);
        let mut c_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert_eq!(sp.len(), 4);
            assert_eq!(&sp[0..1], &s0[0..1]);
            assert_eq!(&sp[2..], &s0[2..], "concat_ch: spatial mismatch");
            c_total += sp[1];
        }
        let mut out = ArrayD::zeros(IxDyn(&[s0[0], c_total, s0[2], s0[3]]));
        {
            let mut o4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut at = 0;
            for &p in parts {
                let pv = self.nodes[p.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let c = pv.shape()[1];
                o4.slice_mut(ndarray::s![.., at..at + c, .., ..]).assign(&pv);
                at += c;
            }
        }
        let ng = self.any_needs_grad(parts);
        self.push(out, ng, Op::ConcatCh(parts.to_vec()))
    }

    pub fn slice_ch(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert!(start < end && end <= s[1]);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let v = xv.slice(ndarray::s![.., start..end, .., ..]).to_owned().into_dyn();
        let ng = self.needs_grad(x);
        self.push(v, ng, Op::SliceCh { x, start, end })
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(v, false, Op::Detach(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs_grad(x);
        self.push(v, ng, Op::Reshape(x))
    }

    /// Fold a list of scalars into their sum.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub(super) fn backward_node(&self, i: usize) -> Vec<(usize, ArrayD<f64>)> {
        let g = self.nodes[i].grad.as_ref().unwrap();
        let out = &self.nodes[i].value;
        let mut deltas: Vec<(usize, ArrayD<f64>)> = Vec::new();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    deltas.push((a.0, g.clone()));
                }
                if want(*b) {
                    deltas.push((b.0, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    deltas.push((a.0, g.clone()));
                }
                if want(*b) {
                    deltas.push((b.0, g.mapv(|t| -t)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    deltas.push((a.0, g * &self.nodes[b.0].value));
                }
                if want(*b) {
                    deltas.push((b.0, g * &self.nodes[a.0].value));
                }
            }
            Op::Neg(a) => {
                if want(*a) {
                    deltas.push((a.0, g.mapv(|t| -t)));
                }
            }
            Op::AddScalar(a, _) => {
                if want(*a) {
                    deltas.push((a.0, g.clone()));
                }
            }
            Op::MulScalar(a, s) => {
                if want(*a) {
                    deltas.push((a.0, g.mapv(|t| t * s)));
                }
            }
            Op::AddBias(x, b) => {
                if want(*x) {
                    deltas.push((x.0, g.clone()));
                }
                if want(*b) {
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let c = g4.shape()[1];
                    let mut db = ArrayD::zeros(IxDyn(&[c]));
                    for ci in 0..c {
                        db[[ci]] = g4.index_axis(Axis(1), ci).sum();
                    }
                    deltas.push((b.0, db));
                }
            }
            Op::MulChannelBcast(x, s) => {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let (n, c, h, w) = {
                    let sh = g4.shape();
                    (sh[0], sh[1], sh[2], sh[3])
                };
                if want(*x) {
                    let m4 = self.nodes[s.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut dx = g4.to_owned();
                    for ni in 0..n {
                        for ci in 0..c {
                            for ii in 0..h {
                                for ji in 0..w {
                                    dx[[ni, ci, ii, ji]] *= m4[[ni, 0, ii, ji]];
                                }
                            }
                        }
                    }
                    deltas.push((x.0, dx.into_dyn()));
                }
                if want(*s) {
                    let x4 = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut ds = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
                    for ni in 0..n {
                        for ci in 0..c {
                            for ii in 0..h {
                                for ji in 0..w {
                                    ds[[ni, 0, ii, ji]] += g4[[ni, ci, ii, ji]] * x4[[ni, ci, ii, ji]];
                                }
                            }
                        }
                    }
                    deltas.push((s.0, ds));
                }
            }
            Op::Abs(a) => {
                if want(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |gi, xi| {
                        *gi *= if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    deltas.push((a.0, d));
                }
            }
            Op::Square(a) => {
                if want(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |gi, xi| *gi *= 2.0 * *xi);
                    deltas.push((a.0, d));
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(out, |gi, yi| *gi *= *yi * (1.0 - *yi));
                    deltas.push((a.0, d));
                }
            }
            Op::Tanh(a) => {
                if want(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(out, |gi, yi| *gi *= 1.0 - *yi * *yi);
                    deltas.push((a.0, d));
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let x = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |gi, xi| *gi *= if *xi > 0.0 { 1.0 } else { 0.0 });
                    deltas.push((a.0, d));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if want(*a) {
                    let x = &self.nodes[a.0].value;
                    let sl = *slope;
                    let mut d = g.clone();
                    d.zip_mut_with(x, |gi, xi| *gi *= if *xi > 0.0 { 1.0 } else { sl });
                    deltas.push((a.0, d));
                }
            }
            Op::MeanAll(a) => {
                if want(*a) {
                    let n = self.nodes[a.0].value.len() as f64;
                    let gs = *g.iter().next().unwrap();
                    deltas.push((
                        a.0,
                        ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs / n),
                    ));
                }
            }
            Op::SoftmaxSpatial(a) => {
                if want(*a) {
                    let y = out.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let sh = y.shape().to_vec();
                    let mut d = g4.to_owned();
                    for n in 0..sh[0] {
                        for k in 0..sh[1] {
                            let mut dot = 0.0;
                            for ii in 0..sh[2] {
                                for jj in 0..sh[3] {
                                    dot += g4[[n, k, ii, jj]] * y[[n, k, ii, jj]];
                                }
                            }
                            for ii in 0..sh[2] {
                                for jj in 0..sh[3] {
                                    d[[n, k, ii, jj]] =
                                        y[[n, k, ii, jj]] * (g4[[n, k, ii, jj]] - dot);
                                }
                            }
                        }
                    }
                    deltas.push((a.0, d.into_dyn()));
                }
            }
            Op::SoftmaxChannel(a) => {
                if want(*a) {
                    let y = out.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let sh = y.shape().to_vec();
                    let mut d = g4.to_owned();
                    for n in 0..sh[0] {
                        for ii in 0..sh[2] {
                            for jj in 0..sh[3] {
                                let mut dot = 0.0;
                                for m in 0..sh[1] {
                                    dot += g4[[n, m, ii, jj]] * y[[n, m, ii, jj]];
                                }
                                for m in 0..sh[1] {
                                    d[[n, m, ii, jj]] =
                                        y[[n, m, ii, jj]] * (g4[[n, m, ii, jj]] - dot);
                                }
                            }
                        }
                    }
                    deltas.push((a.0, d.into_dyn()));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                eps: _,
                cache,
            } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let gv = &self.nodes[gamma.0].value;
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let sh = xv.shape().to_vec();
                let m = (sh[2] * sh[3]) as f64;
                let mut dx = ndarray::Array4::<f64>::zeros((sh[0], sh[1], sh[2], sh[3]));
                let mut dgamma = ArrayD::zeros(IxDyn(&[sh[1]]));
                let mut dbeta = ArrayD::zeros(IxDyn(&[sh[1]]));
                for n in 0..sh[0] {
                    for c in 0..sh[1] {
                        let (mean, istd) = cache[n * sh[1] + c];
                        let gc = gv[[c]];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for ii in 0..sh[2] {
                            for jj in 0..sh[3] {
                                let xhat = (xv[[n, c, ii, jj]] - mean) * istd;
                                let go = g4[[n, c, ii, jj]];
                                dgamma[[c]] += go * xhat;
                                dbeta[[c]] += go;
                                sum_g += go;
                                sum_gx += go * xhat;
                            }
                        }
                        if want(*x) {
                            for ii in 0..sh[2] {
                                for jj in 0..sh[3] {
                                    let xhat = (xv[[n, c, ii, jj]] - mean) * istd;
                                    let go = g4[[n, c, ii, jj]];
                                    dx[[n, c, ii, jj]] =
                                        gc * istd * (go - sum_g / m - xhat * sum_gx / m);
                                }
                            }
                        }
                    }
                }
                if want(*x) {
                    deltas.push((x.0, dx.into_dyn()));
                }
                if want(*gamma) {
                    deltas.push((gamma.0, dgamma));
                }
                if want(*beta) {
                    deltas.push((beta.0, dbeta));
                }
            }
            Op::ConcatCh(parts) => {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut at = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let dp = g4.slice(ndarray::s![.., at..at + c, .., ..]).to_owned();
                        deltas.push((p.0, dp.into_dyn()));
                    }
                    at += c;
                }
            }
            Op::SliceCh { x, start, end } => {
                if want(*x) {
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let xs = self.nodes[x.0].value.shape();
                    let mut dx = ndarray::Array4::<f64>::zeros((xs[0], xs[1], xs[2], xs[3]));
                    dx.slice_mut(ndarray::s![.., *start..*end, .., ..]).assign(&g4);
                    deltas.push((x.0, dx.into_dyn()));
                }
            }
            Op::Detach(_) => {}
            Op::Reshape(x) => {
                if want(*x) {
                    let d = g
                        .clone()
                        .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                        .unwrap();
                    deltas.push((x.0, d));
                }
            }
            // Heavier kernels live in sibling modules.
            Op::Conv2d { .. }
            | Op::AvgPool(..)
            | Op::UpsampleNearest2(..)
            | Op::ResizeBilinear { .. }
            | Op::ResizeField { .. } => return self.backward_conv_family(i),
            Op::GridSample { .. }
            | Op::KpGaussian { .. }
            | Op::SpatialExpectation(..)
            | Op::HeatmapWeightedJacobian { .. }
            | Op::SparseGrid { .. }
            | Op::Inv2x2(..)
            | Op::MatMul2x2(..)
            | Op::TpsEval { .. }
            | Op::TpsJacobian { .. }
            | Op::AttentionCombine { .. } => return self.backward_geom_family(i),
        }
        deltas
    }
}
