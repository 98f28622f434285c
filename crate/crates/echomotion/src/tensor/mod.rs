//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The engine is a flat tape: every operation eagerly computes its value and
//! records an [`Op`] describing how to push gradients back to its inputs.
//! Everything is `f64`; determinism is by construction (single-threaded,
//! fixed accumulation order), which the training loop relies on for
//! bit-reproducible runs.
//!
//! Layout conventions used throughout the crate:
//! - images / feature maps: `(N, C, H, W)`
//! - heatmaps / attention:  `(N, K, H, W)`
//! - points:                `(N, K, 2)` with the last axis `[x, y]`
//! - 2x2 matrices:          `(N, K, 2, 2)` row-major, row = output coord
//! - coordinate grids:      `(N, H, W, 2)` in normalized `[-1, 1]` coords
//!
//! Normalized coordinates follow the half-pixel (cell-center) convention:
//! pixel `j` of a width-`W` axis sits at `(2*j + 1)/W - 1`, so `(-1, -1)` is
//! the top-left image corner and the top-left pixel center of an 8-wide map
//! is `-0.875`.

mod conv;
mod elem;
mod geom;

pub mod check;

#[cfg(test)]
mod tests;

pub use geom::{grid_sample_forward, identity_grid, norm_coord, to_pixel};

use crate::tps::TpsTransform;
use ndarray::{ArrayD, IxDyn};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    /// `(N, C, H, W) + (C,)` broadcast over batch and space.
    AddBias(Var, Var),
    /// `(N, C, H, W) * (N, 1, H, W)` broadcast over channels.
    MulChannelBcast(Var, Var),
    Abs(Var),
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    MeanAll(Var),
    /// Softmax over the two trailing spatial axes of `(N, K, H, W)`.
    SoftmaxSpatial(Var),
    /// Softmax over axis 1 of `(N, M, H, W)`.
    SoftmaxChannel(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        /// `(mean, inv_std)` per `(n, c)`, cached at forward time.
        cache: Vec<(f64, f64)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool(Var, usize),
    UpsampleNearest2(Var),
    ResizeBilinear {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    /// Bilinear resize of an `(N, H, W, 2)` coordinate field.
    ResizeField {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    /// Backward-warp `x` by sampling at `grid` (normalized coords, border clamp).
    GridSample {
        x: Var,
        grid: Var,
    },
    /// Unnormalized Gaussian bumps centered at `points`, on an `(h, w)` grid.
    KpGaussian {
        points: Var,
        h: usize,
        w: usize,
        sigma: f64,
    },
    /// Expectation of grid coordinates under normalized heatmaps.
    SpatialExpectation(Var),
    /// Per-keypoint 2x2 matrices: spatial sum of `heat * jmap` (4 channels/kp).
    HeatmapWeightedJacobian {
        heat: Var,
        jmap: Var,
    },
    /// First-order motion grids: `z -> u_src + J (z - u_drv)` per keypoint.
    SparseGrid {
        u_src: Var,
        u_drv: Var,
        jac: Var,
        h: usize,
        w: usize,
    },
    Inv2x2(Var),
    MatMul2x2(Var, Var),
    TpsEval {
        points: Var,
        tps: Rc<Vec<TpsTransform>>,
    },
    TpsJacobian {
        points: Var,
        tps: Rc<Vec<TpsTransform>>,
    },
    /// Convex combination of sparse motions: `(N,M,H,W) x (N,M,H,W,2) -> (N,H,W,2)`.
    AttentionCombine {
        attn: Var,
        sparse: Var,
    },
    ConcatCh(Vec<Var>),
    SliceCh {
        x: Var,
        start: usize,
        end: usize,
    },
    Detach(Var),
    Reshape(Var),
}

pub(crate) struct Node {
    pub(crate) value: ArrayD<f64>,
    pub(crate) grad: Option<ArrayD<f64>>,
    pub(crate) needs_grad: bool,
    pub(crate) op: Op,
}

/// A single forward pass: values plus the tape needed to differentiate it.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    /// `(param slot index, leaf var)` for every trainable parameter leaf.
    pub(crate) param_vars: Vec<(usize, Var)>,
    /// Deduplication for parameters materialized while frozen.
    frozen_vars: Vec<(usize, Var)>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// While set, parameter leaves are created without gradient tracking.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: participates in forward values only.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Parameter leaf tied to a `ParamStore` slot (see `nn`). Repeated
    /// requests for the same slot return the same leaf, so gradients from
    /// every use aggregate in one place.
    pub fn param_leaf(&mut self, slot: usize, value: ArrayD<f64>) -> Var {
        if self.frozen {
            if let Some(&(_, v)) = self.frozen_vars.iter().find(|(s, _)| *s == slot) {
                return v;
            }
            let v = self.constant(value);
            self.frozen_vars.push((slot, v));
            v
        } else {
            if let Some(&(_, v)) = self.param_vars.iter().find(|(s, _)| *s == slot) {
                return v;
            }
            let v = self.push(value, true, Op::Leaf);
            self.param_vars.push((slot, v));
            v
        }
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every node
    /// with `needs_grad`; leaves keep theirs for inspection.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() requires a scalar loss"
        );
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        let seed = ArrayD::ones(self.nodes[loss.0].value.raw_dim());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let deltas = self.backward_node(i);
            for (j, d) in deltas {
                self.accumulate(j, d);
            }
        }
    }

    fn accumulate(&mut self, j: usize, delta: ArrayD<f64>) {
        let node = &mut self.nodes[j];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), delta.shape());
        match &mut node.grad {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta),
        }
    }

    /// Gradients for every recorded parameter leaf, in creation order.
    pub fn param_grads(&self) -> Vec<(usize, Option<&ArrayD<f64>>)> {
        self.param_vars
            .iter()
            .map(|&(slot, v)| (slot, self.nodes[v.0].grad.as_ref()))
            .collect()
    }

    pub fn zeros_like(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }
}
