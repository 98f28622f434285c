//! Weakly-supervised keypoint detection: a U-Net predicts per-keypoint
//! heatmaps (self-supervised and supervised banks share one head), coordinates
//! come from the softmax expectation, and a second head regresses a 2x2 local
//! affine transform per keypoint via heatmap-weighted pooling.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, UNet};
use crate::tensor::{norm_coord, Graph, Var};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    /// Self-supervised keypoint count (K).
    pub num_self: usize,
    /// Supervised keypoint count (S); may be zero.
    pub num_supervised: usize,
    /// Square heatmap resolution; must divide the input resolution.
    pub heatmap_resolution: usize,
    /// Temperature applied to raw scores before the spatial softmax.
    pub softmax_temperature: f64,
    /// Gaussian width (normalized units) for supervised heatmap targets.
    pub gt_sigma: f64,
    pub in_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub num_blocks: usize,
}

impl DetectorConfig {
    pub fn total_keypoints(&self) -> usize {
        self.num_self + self.num_supervised
    }
}

/// Graph-level detector output; see [`KeypointSet`] for the plain view.
pub struct Detection {
    /// `(N, K+S, H', W')`, each map sums to one.
    pub heatmaps: Var,
    /// `(N, K+S, 2)` in normalized coordinates.
    pub coords: Var,
    /// `(N, K+S, 2, 2)`.
    pub jacobians: Var,
}

/// Per-frame keypoints with per-keypoint local affine transforms.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    /// `(K, 2)` self-supervised coordinates.
    pub self_coords: Array2<f64>,
    /// `(S, 2)` supervised coordinates.
    pub sup_coords: Array2<f64>,
    /// `(K+S, 2, 2)` jacobians, self bank first.
    pub jacobians: Array3<f64>,
    /// `(K+S, H', W')` normalized heatmaps.
    pub heatmaps: Array3<f64>,
}

impl KeypointSet {
    /// All coordinates, self bank first: `(K+S, 2)`.
    pub fn all_coords(&self) -> Array2<f64> {
        let total = self.self_coords.nrows() + self.sup_coords.nrows();
        let mut out = Array2::zeros((total, 2));
        for (i, row) in self
            .self_coords
            .rows()
            .into_iter()
            .chain(self.sup_coords.rows())
            .enumerate()
        {
            out.row_mut(i).assign(&row);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (k, map) in self.heatmaps.axis_iter(Axis(0)).enumerate() {
            let sum: f64 = map.iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "heatmap {k} sums to {sum}, expected 1"
                )));
            }
            if map.iter().any(|v| *v < 0.0) {
                return Err(Error::Contract(format!("heatmap {k} has negative mass")));
            }
        }
        if self.jacobians.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite jacobian entries".into()));
        }
        Ok(())
    }
}

pub struct KeypointDetector {
    pub cfg: DetectorConfig,
    unet: UNet,
    kp_head: Conv2d,
    jac_head: Conv2d,
}

impl KeypointDetector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: DetectorConfig) -> Self {
        let name = "keypoint_detector";
        let unet = UNet::new(
            store,
            rng,
            &format!("{name}.unet"),
            cfg.in_channels,
            cfg.base_width,
            cfg.max_width,
            cfg.num_blocks,
        );
        let total = cfg.total_keypoints();
        // Zero-centered head weights: uniform heatmaps and centered coords at
        // initialization.
        let kp_head = Conv2d::new_zero(
            store,
            &format!("{name}.kp_head"),
            cfg.base_width,
            total,
            3,
            1,
            1,
        );
        let jac_head = Conv2d::new_zero(
            store,
            &format!("{name}.jac_head"),
            cfg.base_width,
            4 * total,
            3,
            1,
            1,
        );
        // Identity-jacobian bias per keypoint. Combined with normalized
        // heatmaps the pooled jacobian starts exactly at the identity.
        let mut bias = ArrayD::zeros(IxDyn(&[4 * total]));
        for k in 0..total {
            bias[[4 * k]] = 1.0;
            bias[[4 * k + 3]] = 1.0;
        }
        jac_head.set_bias(store, bias);
        KeypointDetector {
            cfg,
            unet,
            kp_head,
            jac_head,
        }
    }

    /// Forward pass on `(N, C, R, R)` frames. The frame is average-pooled to
    /// the heatmap resolution before the U-Net.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: Var) -> Detection {
        let s = g.shape(frame).to_vec();
        assert_eq!(s[2], s[3], "detector expects square frames");
        let factor = s[2] / self.cfg.heatmap_resolution;
        assert_eq!(
            factor * self.cfg.heatmap_resolution,
            s[2],
            "heatmap resolution must divide input resolution"
        );
        let x = if factor > 1 {
            g.avg_pool(frame, factor)
        } else {
            frame
        };
        let feat = self.unet.forward(g, store, x);
        let raw = self.kp_head.forward(g, store, feat);
        let scaled = g.mul_scalar(raw, 1.0 / self.cfg.softmax_temperature);
        let heatmaps = g.softmax_spatial(scaled);
        let coords = g.spatial_expectation(heatmaps);
        let jmap = self.jac_head.forward(g, store, feat);
        let jacobians = g.heatmap_weighted_jacobian(heatmaps, jmap);
        Detection {
            heatmaps,
            coords,
            jacobians,
        }
    }

    /// Detect keypoints on a single `(C, H, W)` frame.
    pub fn detect(&self, store: &ParamStore, frame: &Array3<f64>) -> Result<KeypointSet> {
        let (c, h, w) = frame.dim();
        if h != w {
            return Err(Error::Contract(format!(
                "detect: frame must be square, got {h}x{w}"
            )));
        }
        if c != self.cfg.in_channels {
            return Err(Error::Contract(format!(
                "detect: expected {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if frame.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "detect: frame values must lie in [0, 1]".into(),
            ));
        }
        let mut g = Graph::new();
        let mut batch = ArrayD::zeros(IxDyn(&[1, c, h, w]));
        batch
            .view_mut()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis_mut(Axis(0), 0)
            .assign(frame);
        let fv = g.constant(batch);
        g.set_frozen(true);
        let det = self.forward(&mut g, store, fv);
        let set = self.extract(&g, &det, 0);
        set.validate()?;
        Ok(set)
    }

    /// Pull sample `n` of a batched [`Detection`] into a plain [`KeypointSet`].
    pub fn extract(&self, g: &Graph, det: &Detection, n: usize) -> KeypointSet {
        let k = self.cfg.num_self;
        let s = self.cfg.num_supervised;
        let coords = g.value(det.coords);
        let jac = g.value(det.jacobians);
        let heat = g.value(det.heatmaps);
        let hr = self.cfg.heatmap_resolution;
        let mut self_coords = Array2::zeros((k, 2));
        let mut sup_coords = Array2::zeros((s, 2));
        for i in 0..k {
            self_coords[[i, 0]] = coords[[n, i, 0]];
            self_coords[[i, 1]] = coords[[n, i, 1]];
        }
        for i in 0..s {
            sup_coords[[i, 0]] = coords[[n, k + i, 0]];
            sup_coords[[i, 1]] = coords[[n, k + i, 1]];
        }
        let mut jacobians = Array3::zeros((k + s, 2, 2));
        let mut heatmaps = Array3::zeros((k + s, hr, hr));
        for i in 0..k + s {
            for r in 0..2 {
                for c in 0..2 {
                    jacobians[[i, r, c]] = jac[[n, i, r, c]];
                }
            }
            for y in 0..hr {
                for x in 0..hr {
                    heatmaps[[i, y, x]] = heat[[n, i, y, x]];
                }
            }
        }
        KeypointSet {
            self_coords,
            sup_coords,
            jacobians,
            heatmaps,
        }
    }
}

/// Differentiable coordinate extraction: expectation of the grid coordinate
/// under a normalized heatmap. Errors if the heatmap is not normalized.
pub fn soft_argmax(heatmap: &Array2<f64>) -> Result<[f64; 2]> {
    let sum: f64 = heatmap.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Contract(format!(
            "soft_argmax: heatmap sums to {sum}, expected 1"
        )));
    }
    if heatmap.iter().any(|v| *v < 0.0) {
        return Err(Error::Contract("soft_argmax: negative heatmap mass".into()));
    }
    let (h, w) = heatmap.dim();
    let mut ex = 0.0;
    let mut ey = 0.0;
    for i in 0..h {
        let gy = norm_coord(i, h);
        for j in 0..w {
            ex += heatmap[[i, j]] * norm_coord(j, w);
            ey += heatmap[[i, j]] * gy;
        }
    }
    Ok([ex, ey])
}

/// Normalized Gaussian heatmap target centered at `point`.
pub fn gaussian_heatmap(point: [f64; 2], resolution: usize, sigma: f64) -> Result<Array2<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Contract(format!(
            "gaussian_heatmap: sigma must be positive, got {sigma}"
        )));
    }
    let mut map = Array2::zeros((resolution, resolution));
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for i in 0..resolution {
        let dy = norm_coord(i, resolution) - point[1];
        for j in 0..resolution {
            let dx = norm_coord(j, resolution) - point[0];
            map[[i, j]] = (-(dx * dx + dy * dy) * inv2s2).exp();
        }
    }
    let sum: f64 = map.iter().sum();
    map.mapv_inplace(|v| v / sum);
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> DetectorConfig {
        DetectorConfig {
            num_self: 3,
            num_supervised: 2,
            heatmap_resolution: 16,
            softmax_temperature: 0.1,
            gt_sigma: 0.05,
            in_channels: 1,
            base_width: 8,
            max_width: 32,
            num_blocks: 2,
        }
    }

    #[test]
    fn soft_argmax_delta_top_left_cell() {
        // Delta mass at cell (0,0) of an 8x8 map sits at the first pixel
        // center: (2*0+1)/8 - 1 = -0.875.
        let mut h = Array2::zeros((8, 8));
        h[[0, 0]] = 1.0;
        let p = soft_argmax(&h).unwrap();
        assert!((p[0] - (-0.875)).abs() < 1e-12);
        assert!((p[1] - (-0.875)).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_uniform_is_centered() {
        let h = Array2::from_elem((10, 10), 0.01);
        let p = soft_argmax(&h).unwrap();
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_center_delta() {
        // Odd-sized map has an exact center cell.
        let mut h = Array2::zeros((9, 9));
        h[[4, 4]] = 1.0;
        let p = soft_argmax(&h).unwrap();
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_rejects_unnormalized() {
        let h = Array2::from_elem((4, 4), 1.0);
        assert!(soft_argmax(&h).is_err());
    }

    #[test]
    fn gaussian_heatmap_round_trip() {
        // soft_argmax(gaussian_heatmap(p)) recovers p for interior points.
        for &sigma in &[0.05, 0.1, 0.2] {
            for &px in &[-0.4, -0.2, 0.0, 0.2, 0.4] {
                for &py in &[-0.4, 0.0, 0.4] {
                    let h = gaussian_heatmap([px, py], 64, sigma).unwrap();
                    let p = soft_argmax(&h).unwrap();
                    assert!(
                        (p[0] - px).abs() < 1e-3 && (p[1] - py).abs() < 1e-3,
                        "sigma {sigma} p ({px},{py}) -> ({},{})",
                        p[0],
                        p[1]
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_heatmap_center_symmetry() {
        let h = gaussian_heatmap([0.0, 0.0], 16, 0.1).unwrap();
        // 4-fold symmetry.
        for i in 0..16 {
            for j in 0..16 {
                let a = h[[i, j]];
                assert!((a - h[[15 - i, j]]).abs() < 1e-12);
                assert!((a - h[[i, 15 - j]]).abs() < 1e-12);
            }
        }
        // Argmax at the four center cells (16 is even; they tie).
        let max = h.iter().cloned().fold(0.0, f64::max);
        assert!((h[[7, 7]] - max).abs() < 1e-12);
    }

    #[test]
    fn gaussian_large_sigma_approaches_uniform() {
        let h = gaussian_heatmap([0.0, 0.0], 8, 50.0).unwrap();
        let max = h.iter().cloned().fold(f64::MIN, f64::max);
        let min = h.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.0 + 1e-3);
    }

    #[test]
    fn detector_shapes_and_init_behavior() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = KeypointDetector::new(&mut store, &mut rng, desk_cfg());
        let frame = Array3::from_elem((1, 64, 64), 0.5);
        let set = det.detect(&store, &frame).unwrap();
        assert_eq!(set.self_coords.dim(), (3, 2));
        assert_eq!(set.sup_coords.dim(), (2, 2));
        assert_eq!(set.jacobians.dim(), (5, 2, 2));
        assert_eq!(set.heatmaps.dim(), (5, 16, 16));
        // Zero-centered final layer on a constant frame: near-uniform
        // heatmaps, coords near the origin, identity jacobians.
        for i in 0..5 {
            assert!(set.self_coords.get((i, 0)).map_or(true, |v| v.abs() < 0.1));
            assert!((set.jacobians[[i, 0, 0]] - 1.0).abs() < 1e-9);
            assert!((set.jacobians[[i, 1, 1]] - 1.0).abs() < 1e-9);
            assert!(set.jacobians[[i, 0, 1]].abs() < 1e-9);
        }
        let uniform = 1.0 / (16.0 * 16.0);
        for v in set.heatmaps.iter() {
            assert!((v - uniform).abs() < 1e-6, "heatmap not uniform at init");
        }
    }

    #[test]
    fn detect_rejects_bad_frames() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let det = KeypointDetector::new(&mut store, &mut rng, desk_cfg());
        let nonsquare = Array3::from_elem((1, 64, 32), 0.5);
        assert!(det.detect(&store, &nonsquare).is_err());
        let out_of_range = Array3::from_elem((1, 64, 64), 1.5);
        assert!(det.detect(&store, &out_of_range).is_err());
    }
}
