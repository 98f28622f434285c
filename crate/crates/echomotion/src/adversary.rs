//! PatchGAN discriminator: four stride-configured 4x4 convolutions produce a
//! spatial map of real/fake scores over overlapping patches plus the
//! intermediate features used by the feature-matching loss. No final sigmoid;
//! the least-squares objective operates on raw outputs.

use crate::error::{Error, Result};
use crate::nn::{width, Conv2d, InstanceNorm2d, ParamStore};
use crate::tensor::{Graph, Var};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;

pub const NUM_FEATURE_LAYERS: usize = 4;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
}

/// Graph-level discriminator output.
pub struct DiscVars {
    /// `(N, 1, H'', W'')` raw patch scores.
    pub patch_map: Var,
    /// Post-activation features of the four convolution blocks.
    pub features: Vec<Var>,
}

/// Plain discriminator output.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// `(H'', W'')` raw patch scores.
    pub patch_map: Array2<f64>,
    /// Exactly four intermediate activations.
    pub features: Vec<Array3<f64>>,
}

pub struct PatchDiscriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    norms: Vec<Option<InstanceNorm2d>>,
    final_conv: Conv2d,
}

impl PatchDiscriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: DiscriminatorConfig,
    ) -> Self {
        let name = "discriminator";
        // 70x70-receptive-field layout: strides 2,2,2,1, widths doubling.
        let strides = [2usize, 2, 2, 1];
        let mut convs = Vec::new();
        let mut norms: Vec<Option<InstanceNorm2d>> = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &stride) in strides.iter().enumerate() {
            let cout = width(cfg.base_width, cfg.max_width, i);
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.conv{i}"),
                cin,
                cout,
                4,
                stride,
                1,
            ));
            // No normalization on the first block, matching the PatchGAN default.
            norms.push(if i == 0 {
                None
            } else {
                Some(InstanceNorm2d::new(store, &format!("{name}.norm{i}"), cout))
            });
            cin = cout;
        }
        let final_conv = Conv2d::new(store, rng, &format!("{name}.final"), cin, 1, 4, 1, 1);
        PatchDiscriminator {
            cfg,
            convs,
            norms,
            final_conv,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: Var) -> DiscVars {
        let mut features = Vec::with_capacity(NUM_FEATURE_LAYERS);
        let mut x = frame;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(g, store, x);
            if let Some(n) = norm {
                x = n.forward(g, store, x);
            }
            x = g.leaky_relu(x, 0.2);
            features.push(x);
        }
        let patch_map = self.final_conv.forward(g, store, x);
        DiscVars {
            patch_map,
            features,
        }
    }

    /// Score a single `(C, H, W)` frame.
    pub fn discriminate(&self, store: &ParamStore, frame: &Array3<f64>) -> Result<DiscriminatorOutput> {
        let (c, h, w) = frame.dim();
        if h != w {
            return Err(Error::Contract("discriminate: frame must be square".into()));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Contract(format!(
                "discriminate: expected {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if frame.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "discriminate: frame values must lie in [0, 1]".into(),
            ));
        }
        let mut g = Graph::new();
        g.set_frozen(true);
        let mut b = ArrayD::zeros(IxDyn(&[1, c, h, w]));
        b.view_mut()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis_mut(Axis(0), 0)
            .assign(frame);
        let fv = g.constant(b);
        let out = self.forward(&mut g, store, fv);
        let pm = g.value(out.patch_map);
        let s = pm.shape();
        let mut patch_map = Array2::zeros((s[2], s[3]));
        for i in 0..s[2] {
            for j in 0..s[3] {
                patch_map[[i, j]] = pm[[0, 0, i, j]];
            }
        }
        let features = out
            .features
            .iter()
            .map(|&f| {
                let v = g.value(f);
                let fs = v.shape();
                let mut arr = Array3::zeros((fs[1], fs[2], fs[3]));
                for c in 0..fs[1] {
                    for i in 0..fs[2] {
                        for j in 0..fs[3] {
                            arr[[c, i, j]] = v[[0, c, i, j]];
                        }
                    }
                }
                arr
            })
            .collect();
        Ok(DiscriminatorOutput {
            patch_map,
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(base: usize, max: usize) -> (ParamStore, PatchDiscriminator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = PatchDiscriminator::new(
            &mut store,
            &mut rng,
            DiscriminatorConfig {
                in_channels: 1,
                base_width: base,
                max_width: max,
            },
        );
        (store, d)
    }

    /// Stride/receptive-field arithmetic oracle for the patch-map size.
    fn patch_size_oracle(mut n: usize) -> usize {
        for stride in [2usize, 2, 2, 1] {
            n = (n + 2 - 4) / stride + 1;
        }
        n + 2 - 4 + 1 // final k4 s1 p1
    }

    #[test]
    fn patch_map_is_30x30_for_256_input() {
        assert_eq!(patch_size_oracle(256), 30);
        let (store, d) = build(2, 4);
        let frame = Array3::from_elem((1, 256, 256), 0.5);
        let out = d.discriminate(&store, &frame).unwrap();
        assert_eq!(out.patch_map.dim(), (30, 30));
    }

    #[test]
    fn four_feature_layers_and_determinism() {
        let (store, d) = build(4, 16);
        let frame = Array3::from_shape_fn((1, 64, 64), |(_, i, j)| {
            0.5 + 0.4 * ((i * 13 + j * 7) as f64 / 101.0).sin()
        });
        let a = d.discriminate(&store, &frame).unwrap();
        let b = d.discriminate(&store, &frame).unwrap();
        assert_eq!(a.features.len(), NUM_FEATURE_LAYERS);
        let ps = patch_size_oracle(64);
        assert_eq!(a.patch_map.dim(), (ps, ps));
        for (x, y) in a.patch_map.iter().zip(b.patch_map.iter()) {
            assert_eq!(*x, *y);
        }
        for (fa, fb) in a.features.iter().zip(b.features.iter()) {
            for (x, y) in fa.iter().zip(fb.iter()) {
                assert_eq!(*x, *y);
            }
        }
    }
}
