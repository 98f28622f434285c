//! Dense motion estimation: per-keypoint first-order motions are combined by
//! a learned attention map into one backward deformation field, together with
//! an occlusion map that down-weights source features the motion cannot
//! explain.

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::nn::{Conv2d, ParamStore, UNet};
use crate::tensor::{grid_sample_forward, identity_grid, Graph, Var};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

/// Determinant threshold below which a driving jacobian is rejected instead
/// of silently regularized.
pub const JACOBIAN_DET_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DenseMotionConfig {
    /// Keypoint count feeding the motion (K + S).
    pub num_keypoints: usize,
    /// Square resolution of sparse/dense motion grids (input / 4).
    pub grid_resolution: usize,
    /// Image channels of the source frame.
    pub in_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub num_blocks: usize,
    /// Gaussian width for the keypoint difference heatmaps.
    pub heat_sigma: f64,
}

impl DenseMotionConfig {
    /// Motion slot count: one per keypoint plus the background identity.
    pub fn num_motions(&self) -> usize {
        self.num_keypoints + 1
    }
}

/// Per-keypoint coordinate maps; slot 0 is the identity (background) motion.
#[derive(Debug, Clone)]
pub struct SparseMotion {
    /// `(K+S+1, H', W', 2)` backward maps in normalized coordinates.
    pub grids: Array4<f64>,
}

/// Dense motion output.
#[derive(Debug, Clone)]
pub struct MotionField {
    /// `(H', W', 2)` backward deformation in normalized coordinates.
    pub deformation: Array3<f64>,
    /// `(H', W')` in `[0, 1]`.
    pub occlusion: Array2<f64>,
    /// `(K+S+1, H', W')` softmax weights (diagnostic).
    pub attention: Array3<f64>,
}

impl MotionField {
    pub fn validate(&self) -> Result<()> {
        if self.occlusion.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("occlusion outside [0, 1]".into()));
        }
        let (m, h, w) = self.attention.dim();
        let _ = m;
        for i in 0..h {
            for j in 0..w {
                let s: f64 = self.attention.slice(ndarray::s![.., i, j]).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(Error::Contract(format!(
                        "attention at ({i},{j}) sums to {s}"
                    )));
                }
            }
        }
        if self.deformation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite deformation".into()));
        }
        Ok(())
    }
}

/// Graph-level motion output.
pub struct MotionVars {
    /// `(N, H', W', 2)`.
    pub deformation: Var,
    /// `(N, 1, H', W')`.
    pub occlusion: Var,
    /// `(N, M, H', W')`.
    pub attention: Var,
    /// `(N, M, H', W', 2)`.
    pub sparse: Var,
}

/// Validate driving jacobians and build the `(N, M, H', W', 2)` sparse motion
/// stack: slot 0 identity, slot m >= 1 maps `z -> u_m^S + J_m^S (J_m^D)^-1 (z - u_m^D)`.
pub fn sparse_motion_vars(
    g: &mut Graph,
    src_coords: Var,
    src_jac: Var,
    drv_coords: Var,
    drv_jac: Var,
    resolution: usize,
) -> Result<Var> {
    let shape = g.shape(src_coords).to_vec();
    let (n, k) = (shape[0], shape[1]);
    {
        let jd = g.value(drv_jac);
        for ni in 0..n {
            for ki in 0..k {
                let det = jd[[ni, ki, 0, 0]] * jd[[ni, ki, 1, 1]]
                    - jd[[ni, ki, 0, 1]] * jd[[ni, ki, 1, 0]];
                if det.abs() <= JACOBIAN_DET_THRESHOLD {
                    return Err(Error::SingularJacobian {
                        keypoint: ki,
                        det,
                    });
                }
            }
        }
    }
    let jd_inv = g.inv2x2(drv_jac);
    let jcomb = g.matmul2x2(src_jac, jd_inv);
    let kp_grids = g.sparse_grid(src_coords, drv_coords, jcomb, resolution, resolution);
    // Stack the identity slot in front via the (h, w*2) flattening trick.
    let kp_flat = g.reshape(kp_grids, &[n, k, resolution, resolution * 2]);
    let ident = identity_grid(resolution, resolution);
    let mut id_arr = ArrayD::zeros(IxDyn(&[n, 1, resolution, resolution * 2]));
    for ni in 0..n {
        for i in 0..resolution {
            for j in 0..resolution {
                id_arr[[ni, 0, i, 2 * j]] = ident[[i, j, 0]];
                id_arr[[ni, 0, i, 2 * j + 1]] = ident[[i, j, 1]];
            }
        }
    }
    let id_var = g.constant(id_arr);
    let all = g.concat_ch(&[id_var, kp_flat]);
    Ok(g.reshape(all, &[n, k + 1, resolution, resolution, 2]))
}

/// Extract motion slot `m` as an `(N, H', W', 2)` sampling grid.
pub fn sparse_slot(g: &mut Graph, sparse: Var, m: usize) -> Var {
    let s = g.shape(sparse).to_vec();
    let (n, slots, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(m < slots);
    let flat = g.reshape(sparse, &[n, slots, h, w * 2]);
    let one = g.slice_ch(flat, m, m + 1);
    g.reshape(one, &[n, h, w, 2])
}

pub struct DenseMotionNet {
    pub cfg: DenseMotionConfig,
    unet: UNet,
    attn_head: Conv2d,
    occl_head: Conv2d,
}

impl DenseMotionNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: DenseMotionConfig,
    ) -> Self {
        let name = "dense_motion";
        let m = cfg.num_motions();
        let unet = UNet::new(
            store,
            rng,
            &format!("{name}.unet"),
            m * (cfg.in_channels + 1),
            cfg.base_width,
            cfg.max_width,
            cfg.num_blocks,
        );
        // Zero-init heads: uniform attention and 0.5 occlusion at start.
        let attn_head = Conv2d::new_zero(store, &format!("{name}.attn_head"), cfg.base_width, m, 3, 1, 1);
        let occl_head = Conv2d::new_zero(store, &format!("{name}.occl_head"), cfg.base_width, 1, 3, 1, 1);
        DenseMotionNet {
            cfg,
            unet,
            attn_head,
            occl_head,
        }
    }

    /// Predict attention, deformation and occlusion from the source frame and
    /// sparse motions. `forced_attention` replaces the learned attention with
    /// a one-hot selection (diagnostic mode).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source: Var,
        sparse: Var,
        src_coords: Var,
        drv_coords: Var,
        forced_attention: Option<usize>,
    ) -> MotionVars {
        let res = self.cfg.grid_resolution;
        let m = self.cfg.num_motions();
        let n = g.shape(source)[0];
        let source_small = g.resize_bilinear(source, res, res);
        // Keypoint heatmap differences; zeros for the background slot.
        let gd = g.kp_gaussian(drv_coords, res, res, self.cfg.heat_sigma);
        let gs = g.kp_gaussian(src_coords, res, res, self.cfg.heat_sigma);
        let diff = g.sub(gd, gs);
        let zeros = g.constant(ArrayD::zeros(IxDyn(&[n, 1, res, res])));
        let heats = g.concat_ch(&[zeros, diff]);
        // Source warped by every candidate motion.
        let mut parts = vec![heats];
        for mi in 0..m {
            let grid = sparse_slot(g, sparse, mi);
            parts.push(g.grid_sample(source_small, grid));
        }
        let input = g.concat_ch(&parts);
        let feat = self.unet.forward(g, store, input);
        let attention = match forced_attention {
            None => {
                let logits = self.attn_head.forward(g, store, feat);
                g.softmax_channel(logits)
            }
            Some(slot) => {
                let mut one = ArrayD::zeros(IxDyn(&[n, m, res, res]));
                for ni in 0..n {
                    for i in 0..res {
                        for j in 0..res {
                            one[[ni, slot, i, j]] = 1.0;
                        }
                    }
                }
                g.constant(one)
            }
        };
        let deformation = g.attention_combine(attention, sparse);
        let occl_logits = self.occl_head.forward(g, store, feat);
        let occlusion = g.sigmoid(occl_logits);
        MotionVars {
            deformation,
            occlusion,
            attention,
            sparse,
        }
    }
}

fn coords_leaf(g: &mut Graph, kp: &KeypointSet) -> (Var, Var) {
    let all = kp.all_coords();
    let k = all.nrows();
    let mut c = ArrayD::zeros(IxDyn(&[1, k, 2]));
    let mut j = ArrayD::zeros(IxDyn(&[1, k, 2, 2]));
    for i in 0..k {
        c[[0, i, 0]] = all[[i, 0]];
        c[[0, i, 1]] = all[[i, 1]];
        for r in 0..2 {
            for cc in 0..2 {
                j[[0, i, r, cc]] = kp.jacobians[[i, r, cc]];
            }
        }
    }
    (g.constant(c), g.constant(j))
}

/// Build per-keypoint first-order motion grids from two keypoint sets.
pub fn sparse_motion(
    src_kp: &KeypointSet,
    drv_kp: &KeypointSet,
    grid_resolution: usize,
) -> Result<SparseMotion> {
    let k_src = src_kp.all_coords().nrows();
    let k_drv = drv_kp.all_coords().nrows();
    if k_src != k_drv {
        return Err(Error::Contract(format!(
            "sparse_motion: keypoint count mismatch ({k_src} vs {k_drv})"
        )));
    }
    let mut g = Graph::new();
    let (sc, sj) = coords_leaf(&mut g, src_kp);
    let (dc, dj) = coords_leaf(&mut g, drv_kp);
    let sparse = sparse_motion_vars(&mut g, sc, sj, dc, dj, grid_resolution)?;
    let v = g.value(sparse);
    let m = k_src + 1;
    let mut grids = Array4::zeros((m, grid_resolution, grid_resolution, 2));
    for mi in 0..m {
        for i in 0..grid_resolution {
            for j in 0..grid_resolution {
                grids[[mi, i, j, 0]] = v[[0, mi, i, j, 0]];
                grids[[mi, i, j, 1]] = v[[0, mi, i, j, 1]];
            }
        }
    }
    Ok(SparseMotion { grids })
}

/// Run the dense motion network on plain inputs (inference path).
pub fn dense_motion(
    net: &DenseMotionNet,
    store: &ParamStore,
    source: &Array3<f64>,
    sparse: &SparseMotion,
    src_kp: &KeypointSet,
    drv_kp: &KeypointSet,
) -> Result<MotionField> {
    let res = net.cfg.grid_resolution;
    let (m, h, w, _) = sparse.grids.dim();
    if h != res || w != res {
        return Err(Error::Contract(format!(
            "dense_motion: sparse motion at {h}x{w}, expected {res}x{res}"
        )));
    }
    if m != net.cfg.num_motions() {
        return Err(Error::Contract(format!(
            "dense_motion: {m} motion slots, expected {}",
            net.cfg.num_motions()
        )));
    }
    let (c, sh, sw) = source.dim();
    if c != net.cfg.in_channels || sh != sw {
        return Err(Error::Contract(
            "dense_motion: source shape does not match the network".into(),
        ));
    }
    let mut g = Graph::new();
    g.set_frozen(true);
    let mut src_b = ArrayD::zeros(IxDyn(&[1, c, sh, sw]));
    src_b
        .view_mut()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .index_axis_mut(Axis(0), 0)
        .assign(source);
    let source_v = g.constant(src_b);
    let mut sp = ArrayD::zeros(IxDyn(&[1, m, res, res, 2]));
    for mi in 0..m {
        for i in 0..res {
            for j in 0..res {
                sp[[0, mi, i, j, 0]] = sparse.grids[[mi, i, j, 0]];
                sp[[0, mi, i, j, 1]] = sparse.grids[[mi, i, j, 1]];
            }
        }
    }
    let sparse_v = g.constant(sp);
    let (sc, _) = coords_leaf(&mut g, src_kp);
    let (dc, _) = coords_leaf(&mut g, drv_kp);
    let out = net.forward(&mut g, store, source_v, sparse_v, sc, dc, None);
    let field = extract_motion_field(&g, &out, 0);
    field.validate()?;
    Ok(field)
}

/// Pull sample `n` of batched [`MotionVars`] into a plain [`MotionField`].
pub fn extract_motion_field(g: &Graph, vars: &MotionVars, n: usize) -> MotionField {
    let def = g.value(vars.deformation);
    let occ = g.value(vars.occlusion);
    let att = g.value(vars.attention);
    let s = g.shape(vars.attention).to_vec();
    let (m, h, w) = (s[1], s[2], s[3]);
    let mut deformation = Array3::zeros((h, w, 2));
    let mut occlusion = Array2::zeros((h, w));
    let mut attention = Array3::zeros((m, h, w));
    for i in 0..h {
        for j in 0..w {
            deformation[[i, j, 0]] = def[[n, i, j, 0]];
            deformation[[i, j, 1]] = def[[n, i, j, 1]];
            occlusion[[i, j]] = occ[[n, 0, i, j]];
            for mi in 0..m {
                attention[[mi, i, j]] = att[[n, mi, i, j]];
            }
        }
    }
    MotionField {
        deformation,
        occlusion,
        attention,
    }
}

/// Backward-warp an image or feature stack by a deformation field.
/// `image: (C, H, W)`, `deformation: (Hg, Wg, 2)` normalized; bilinear with
/// border clamping.
pub fn warp(image: &Array3<f64>, deformation: &Array3<f64>) -> Array3<f64> {
    grid_sample_forward(&image.view(), &deformation.view())
}
