//! Parameter storage, layers, blocks and the Adam optimizer.

use crate::tensor::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Handle to a slot in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct Slot {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Adam first/second moment estimates.
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Owns every trainable array in the model, keyed by hierarchical names like
/// `generator.downs.0.conv.weight`. Checkpointing serializes these slots.
#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.slots.iter().any(|s| s.name == name),
            "duplicate parameter name {name}"
        );
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.slots.push(Slot { name, value, m, v });
        ParamId(self.slots.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.slots[id.0].value
    }

    pub fn slot(&self, idx: usize) -> &Slot {
        &self.slots[idx]
    }

    pub fn slot_mut(&mut self, idx: usize) -> &mut Slot {
        &mut self.slots[idx]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Materialize a parameter as a graph leaf (deduplicated per graph).
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param_leaf(id.0, self.value(id).clone())
    }
}

/// Adam with bias correction; parameters without gradients are skipped.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Apply one update from `(slot index, grad)` pairs. Gradients for the
    /// same slot coming from multiple graph leaves must be pre-aggregated
    /// (the graph deduplicates leaves, so this holds by construction).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Option<&ArrayD<f64>>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &(idx, grad) in grads {
            let Some(grad) = grad else { continue };
            let slot = store.slot_mut(idx);
            let g = grad.as_slice().unwrap();
            let m = slot.m.as_slice_mut().unwrap();
            let v = slot.v.as_slice_mut().unwrap();
            let p = slot.value.as_slice_mut().unwrap();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Width schedule: doubling from `base`, capped at `max`.
pub fn width(base: usize, max: usize, level: usize) -> usize {
    (base << level).min(max)
}

pub fn kaiming_normal<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

#[derive(Clone, Copy)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    None,
}

pub fn activate(g: &mut Graph, x: Var, act: Act) -> Var {
    match act {
        Act::Relu => g.relu(x),
        Act::LeakyRelu(s) => g.leaky_relu(x, s),
        Act::None => x,
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.create(
            format!("{name}.weight"),
            kaiming_normal(rng, &[cout, cin, k, k], cin * k * k),
        );
        let b = store.create(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized weights and bias (heads that must start neutral).
    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.create(
            format!("{name}.weight"),
            ArrayD::zeros(IxDyn(&[cout, cin, k, k])),
        );
        let b = store.create(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn set_bias(&self, store: &mut ParamStore, bias: ArrayD<f64>) {
        store.slot_mut(self.b.0).value = bias;
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.var(g, self.w);
        let b = store.var(g, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct InstanceNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.create(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])));
        let beta = store.create(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
        InstanceNorm2d { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.instance_norm(x, gamma, beta, 1e-5)
    }
}

/// conv -> instance norm -> activation.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm2d,
    pub act: Act,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Act,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, k, stride, k / 2),
            norm: InstanceNorm2d::new(store, &format!("{name}.norm"), cout),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.norm.forward(g, store, y);
        activate(g, y, self.act)
    }
}

/// Pre-activation residual block with two convolutions.
pub struct ResBlock {
    norm1: InstanceNorm2d,
    conv1: Conv2d,
    norm2: InstanceNorm2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c: usize,
    ) -> Self {
        ResBlock {
            norm1: InstanceNorm2d::new(store, &format!("{name}.norm1"), c),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c, c, 3, 1, 1),
            norm2: InstanceNorm2d::new(store, &format!("{name}.norm2"), c),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3, 1, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.norm1.forward(g, store, x);
        let y = g.relu(y);
        let y = self.conv1.forward(g, store, y);
        let y = self.norm2.forward(g, store, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y);
        g.add(x, y)
    }
}

/// U-Net with stride-2 down convolutions, nearest-neighbour upsampling and
/// skip concatenations; returns features at input resolution with `base`
/// channels.
pub struct UNet {
    first: ConvBlock,
    downs: Vec<ConvBlock>,
    ups: Vec<ConvBlock>,
    pub base: usize,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        base: usize,
        max: usize,
        num_blocks: usize,
    ) -> Self {
        let first = ConvBlock::new(store, rng, &format!("{name}.first"), cin, base, 3, 1, Act::Relu);
        let mut downs = Vec::new();
        for i in 0..num_blocks {
            downs.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.down{i}"),
                width(base, max, i),
                width(base, max, i + 1),
                3,
                2,
                Act::Relu,
            ));
        }
        let mut ups = Vec::new();
        for i in (0..num_blocks).rev() {
            ups.push(ConvBlock::new(
                store,
                rng,
                &format!("{name}.up{i}"),
                width(base, max, i + 1) + width(base, max, i),
                width(base, max, i),
                3,
                1,
                Act::Relu,
            ));
        }
        UNet {
            first,
            downs,
            ups,
            base,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut feats = vec![self.first.forward(g, store, x)];
        for d in &self.downs {
            let last = *feats.last().unwrap();
            feats.push(d.forward(g, store, last));
        }
        let mut cur = feats.pop().unwrap();
        for u in &self.ups {
            let up = g.upsample_nearest2(cur);
            let skip = feats.pop().unwrap();
            let cat = g.concat_ch(&[up, skip]);
            cur = u.forward(g, store, cat);
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.create("p", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Adam::new(0.1, 0.5, 0.999);
        let grad = ArrayD::from_elem(IxDyn(&[1]), 2.0);
        opt.step(&mut store, &[(id.0, Some(&grad))]);
        // t=1: m=1.0, v=0.004, mhat=2.0, vhat=4.0; p = 1 - 0.1*2/(2+1e-8)
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.value(id)[[0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn unet_round_trips_resolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let unet = UNet::new(&mut store, &mut rng, "u", 3, 8, 32, 3);
        let mut g = Graph::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 3, 16, 16])));
        let y = unet.forward(&mut g, &store, x);
        assert_eq!(g.shape(y), &[2, 8, 16, 16]);
    }

    #[test]
    fn param_leaves_deduplicate_within_graph() {
        let mut store = ParamStore::new();
        let id = store.create("p", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut g = Graph::new();
        let a = store.var(&mut g, id);
        let b = store.var(&mut g, id);
        assert_eq!(a, b);
        assert_eq!(g.param_grads().len(), 1);
    }
}
