//! Training objectives: keypoint equivariance, supervised heatmap matching,
//! multi-resolution L1 and perceptual reconstruction, least-squares
//! adversarial terms, feature matching, and the weighted total.
//!
//! Reductions are means over batch, keypoints and spatial positions inside
//! each term; pyramid terms sum over scales. Point/matrix L1 norms sum over
//! the 2 (or 4) components before the keypoint mean.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::tps::TpsTransform;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Loss weights; defaults are the published configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_eq: f64,
    pub w_key: f64,
    pub w_rec_l1: f64,
    pub w_rec_perc: f64,
    pub w_gan_g: f64,
    pub w_gan_d: f64,
    pub w_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_eq: 10.0,
            w_key: 100.0,
            w_rec_l1: 10.0,
            w_rec_perc: 10.0,
            w_gan_g: 1.0,
            w_gan_d: 1.0,
            w_feat: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_eq,
            self.w_key,
            self.w_rec_l1,
            self.w_rec_perc,
            self.w_gan_g,
            self.w_gan_d,
            self.w_feat,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Unweighted scalar loss components of one step.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    pub eq1: f64,
    pub eq2: f64,
    pub key: f64,
    pub rec_l1: f64,
    pub rec_perc: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub feat: f64,
}

/// Named scalars plus weighted totals for one training step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub eq1: f64,
    pub eq2: f64,
    pub key: f64,
    pub rec_l1: f64,
    pub rec_perc: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub feat: f64,
    pub total_g: f64,
    pub total_d: f64,
}

/// Weighted totals per the published recipe. Errors name the first
/// non-finite component.
pub fn total(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let named = [
        ("eq1", terms.eq1),
        ("eq2", terms.eq2),
        ("key", terms.key),
        ("rec_l1", terms.rec_l1),
        ("rec_perc", terms.rec_perc),
        ("gan_g", terms.gan_g),
        ("gan_d", terms.gan_d),
        ("feat", terms.feat),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::non_finite(name));
        }
    }
    let eq = terms.eq1 + terms.eq2;
    let total_g = weights.w_eq * eq
        + weights.w_key * terms.key
        + weights.w_rec_l1 * terms.rec_l1
        + weights.w_rec_perc * terms.rec_perc
        + weights.w_gan_g * terms.gan_g
        + weights.w_feat * terms.feat;
    let total_d = weights.w_gan_d * terms.gan_d;
    Ok(LossReport {
        eq1: terms.eq1,
        eq2: terms.eq2,
        key: terms.key,
        rec_l1: terms.rec_l1,
        rec_perc: terms.rec_perc,
        gan_g: terms.gan_g,
        gan_d: terms.gan_d,
        feat: terms.feat,
        total_g,
        total_d,
    })
}

/// Downsampling pyramid; scales strictly halve.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PyramidSpec {
    pub scales: Vec<usize>,
}

impl PyramidSpec {
    /// Four octaves from the base resolution (256 -> [256,128,64,32]).
    pub fn for_base_resolution(res: usize) -> Self {
        PyramidSpec {
            scales: vec![res, res / 2, res / 4, res / 8],
        }
    }

    pub fn single(res: usize) -> Self {
        PyramidSpec { scales: vec![res] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("pyramid needs at least one scale".into()));
        }
        for w in self.scales.windows(2) {
            if w[1] * 2 != w[0] {
                return Err(Error::Config(format!(
                    "pyramid scales must halve: {} does not follow {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(())
    }
}

/// Keypoint-set slice along axis 1, for separating self/supervised banks.
pub fn slice_bank(g: &mut Graph, x: Var, start: usize, end: usize) -> Var {
    let s = g.shape(x).to_vec();
    let trailing: usize = s[2..].iter().product();
    let flat = g.reshape(x, &[s[0], s[1], trailing, 1]);
    let sl = g.slice_ch(flat, start, end);
    let mut out_shape = s;
    out_shape[1] = end - start;
    g.reshape(sl, &out_shape)
}

/// Equivariance losses over the self-supervised bank.
///
/// `coords_x`/`jac_x` come from the un-augmented frame X, `coords_y`/`jac_y`
/// from Y = warp(X, tps). Returns `(eq1, eq2)`:
/// `eq1 = mean_k |p_k^X - tps(p_k^Y)|_1` and
/// `eq2 = mean_k |I - (J_k^X)^-1 tps'(p_k^Y) J_k^Y|_1`.
pub fn equivariance_loss(
    g: &mut Graph,
    coords_x: Var,
    jac_x: Var,
    coords_y: Var,
    jac_y: Var,
    tps: Rc<Vec<TpsTransform>>,
) -> Result<(Var, Var)> {
    let s = g.shape(coords_x).to_vec();
    let (n, k) = (s[0], s[1]);
    {
        let jx = g.value(jac_x);
        for ni in 0..n {
            for ki in 0..k {
                let det = jx[[ni, ki, 0, 0]] * jx[[ni, ki, 1, 1]]
                    - jx[[ni, ki, 0, 1]] * jx[[ni, ki, 1, 0]];
                if det.abs() <= crate::motion::JACOBIAN_DET_THRESHOLD {
                    return Err(Error::SingularJacobian { keypoint: ki, det });
                }
            }
        }
    }
    let mapped = g.tps_eval(coords_y, tps.clone());
    let diff = g.sub(coords_x, mapped);
    let abs = g.abs(diff);
    let m = g.mean_all(abs);
    let eq1 = g.mul_scalar(m, 2.0); // mean over (n,k) of the 2-component L1

    let jx_inv = g.inv2x2(jac_x);
    let tj = g.tps_jacobian(coords_y, tps);
    let prod1 = g.matmul2x2(jx_inv, tj);
    let prod = g.matmul2x2(prod1, jac_y);
    let mut ident = ArrayD::zeros(IxDyn(&[n, k, 2, 2]));
    for ni in 0..n {
        for ki in 0..k {
            ident[[ni, ki, 0, 0]] = 1.0;
            ident[[ni, ki, 1, 1]] = 1.0;
        }
    }
    let ident = g.constant(ident);
    let mdiff = g.sub(ident, prod);
    let mabs = g.abs(mdiff);
    let mm = g.mean_all(mabs);
    let eq2 = g.mul_scalar(mm, 4.0); // mean over (n,k) of the 4-entry L1
    Ok((eq1, eq2))
}

/// Build `(N, S, res, res)` Gaussian heatmap targets from ground-truth points.
pub fn supervision_targets(
    gt_points: &[Vec<[f64; 2]>],
    res: usize,
    sigma: f64,
) -> Result<ArrayD<f64>> {
    let n = gt_points.len();
    let s = gt_points.first().map_or(0, |p| p.len());
    let mut out = ArrayD::zeros(IxDyn(&[n, s, res, res]));
    for (ni, pts) in gt_points.iter().enumerate() {
        if pts.len() != s {
            return Err(Error::Contract(
                "supervision_targets: ragged ground-truth points".into(),
            ));
        }
        for (si, p) in pts.iter().enumerate() {
            let map = crate::keypoints::gaussian_heatmap(*p, res, sigma)?;
            for i in 0..res {
                for j in 0..res {
                    out[[ni, si, i, j]] = map[[i, j]];
                }
            }
        }
    }
    Ok(out)
}

/// L2 heatmap supervision: mean squared difference between predicted and
/// target heatmaps, averaged over batch, keypoints and space.
pub fn keypoint_supervision_loss(g: &mut Graph, pred_heatmaps: Var, targets: Var) -> Var {
    let d = g.sub(pred_heatmaps, targets);
    let sq = g.square(d);
    g.mean_all(sq)
}

fn downsample_to(g: &mut Graph, image: Var, scale: usize) -> Var {
    let cur = g.shape(image)[2];
    if cur == scale {
        image
    } else {
        g.avg_pool(image, cur / scale)
    }
}

/// Multi-resolution pixel L1 between the driving frame and the content image.
pub fn reconstruction_l1(g: &mut Graph, driving: Var, content: Var, pyramid: &PyramidSpec) -> Var {
    let mut terms = Vec::new();
    for &scale in &pyramid.scales {
        let d = downsample_to(g, driving, scale);
        let c = downsample_to(g, content, scale);
        let diff = g.sub(d, c);
        let a = g.abs(diff);
        terms.push(g.mean_all(a));
    }
    g.sum_scalars(&terms)
}

/// Feature extractor interface for the perceptual loss and metrics.
pub trait FeatureExtractor {
    /// Post-activation features, one per layer, shallow to deep.
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var>;
    fn num_layers(&self) -> usize;
    fn name(&self) -> &str;
}

/// Passes the image through unchanged (reduces the perceptual loss to
/// pixel L1; used by tests).
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _g: &mut Graph, x: Var) -> Vec<Var> {
        vec![x]
    }
    fn num_layers(&self) -> usize {
        1
    }
    fn name(&self) -> &str {
        "identity"
    }
}

/// Fixed-seed random convolutional extractor: four stride-2 conv+relu stages.
/// Weights are derived from the seed and never trained, so results are
/// reproducible without downloaded model weights.
pub struct RandomConvExtractor {
    stages: Vec<(ArrayD<f64>, ArrayD<f64>)>,
    seed: u64,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let widths = [16usize, 32, 64, 64];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for &cout in &widths {
            let w = crate::nn::kaiming_normal(&mut rng, &[cout, cin, 3, 3], cin * 9);
            let b = ArrayD::zeros(IxDyn(&[cout]));
            stages.push((w, b));
            cin = cout;
        }
        RandomConvExtractor { stages, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (w, b) in &self.stages {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            // Stop at 1x1; deeper stages would be degenerate.
            let stride = if g.shape(cur)[2] > 1 { 2 } else { 1 };
            let y = g.conv2d(cur, wv, bv, stride, 1);
            cur = g.relu(y);
            feats.push(cur);
        }
        feats
    }
    fn num_layers(&self) -> usize {
        self.stages.len()
    }
    fn name(&self) -> &str {
        "fixed-seed-conv"
    }
}

/// Which perceptual feature extractor to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Standard pretrained classification backbone (not bundled).
    Pretrained,
    /// Fixed-seed random convolutional extractor.
    Fallback,
}

pub fn make_extractor(
    kind: ExtractorKind,
    seed: u64,
    in_channels: usize,
) -> Result<Box<dyn FeatureExtractor>> {
    match kind {
        ExtractorKind::Pretrained => Err(Error::ExtractorUnavailable("pretrained-vgg".into())),
        ExtractorKind::Fallback => Ok(Box::new(RandomConvExtractor::new(seed, in_channels))),
    }
}

/// Multi-resolution perceptual reconstruction between the driving frame and
/// the final prediction.
pub fn reconstruction_perceptual(
    g: &mut Graph,
    driving: Var,
    final_frame: Var,
    pyramid: &PyramidSpec,
    extractor: &dyn FeatureExtractor,
) -> Var {
    let mut terms = Vec::new();
    for &scale in &pyramid.scales {
        let d = downsample_to(g, driving, scale);
        let f = downsample_to(g, final_frame, scale);
        let df = extractor.features(g, d);
        let ff = extractor.features(g, f);
        for (dj, fj) in df.into_iter().zip(ff) {
            let diff = g.sub(dj, fj);
            let a = g.abs(diff);
            terms.push(g.mean_all(a));
        }
    }
    g.sum_scalars(&terms)
}

/// Least-squares generator objective: `mean (D(fake) - 1)^2`.
pub fn lsgan_generator_loss(g: &mut Graph, fake_map: Var) -> Var {
    let shifted = g.add_scalar(fake_map, -1.0);
    let sq = g.square(shifted);
    g.mean_all(sq)
}

/// Least-squares discriminator objective:
/// `mean (D(real) - 1)^2 + mean D(fake)^2`.
pub fn lsgan_discriminator_loss(g: &mut Graph, real_map: Var, fake_map: Var) -> Var {
    let rs = g.add_scalar(real_map, -1.0);
    let rsq = g.square(rs);
    let r = g.mean_all(rsq);
    let fsq = g.square(fake_map);
    let f = g.mean_all(fsq);
    g.add(r, f)
}

/// Feature matching over discriminator activations; the real branch is
/// detached so no gradient reaches the discriminator through this term.
pub fn feature_matching(g: &mut Graph, real_feats: &[Var], fake_feats: &[Var]) -> Var {
    assert_eq!(real_feats.len(), fake_feats.len(), "feature list mismatch");
    let mut terms = Vec::new();
    for (&r, &f) in real_feats.iter().zip(fake_feats) {
        let rd = g.detach(r);
        let diff = g.sub(rd, f);
        let a = g.abs(diff);
        terms.push(g.mean_all(a));
    }
    g.sum_scalars(&terms)
}
