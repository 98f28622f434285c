//! Evaluation-task drivers: reconstruction (a clip drives its own middle
//! frame) and animation (a clip drives a frame from elsewhere, with absolute
//! or relative motion transfer).

use crate::dataset::VideoClip;
use crate::error::{Error, Result};
use crate::generator::GeneratorOutput;
use crate::keypoints::KeypointSet;
use crate::motion::{dense_motion, sparse_motion, MotionField};
use crate::training::LoadedModels;
use ndarray::{Array2, Array3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnimateMode {
    /// Use driving keypoints directly.
    Absolute,
    /// Transplant per-frame displacement and jacobian ratios relative to the
    /// first driving frame onto the source's own keypoints.
    Relative,
}

/// Per-frame artifacts for diagnostic dumps.
pub struct FrameArtifacts {
    pub output: GeneratorOutput,
    pub motion: MotionField,
}

fn truncate_bank(set: &KeypointSet, bank: usize) -> KeypointSet {
    let all = set.all_coords();
    let mut coords = Array2::zeros((bank, 2));
    for i in 0..bank {
        coords[[i, 0]] = all[[i, 0]];
        coords[[i, 1]] = all[[i, 1]];
    }
    KeypointSet {
        self_coords: coords,
        sup_coords: Array2::zeros((0, 2)),
        jacobians: set.jacobians.slice(ndarray::s![0..bank, .., ..]).to_owned(),
        heatmaps: set.heatmaps.slice(ndarray::s![0..bank, .., ..]).to_owned(),
    }
}

fn render_frame(
    lm: &LoadedModels,
    source: &Array3<f64>,
    src_kp: &KeypointSet,
    drv_kp: &KeypointSet,
) -> Result<FrameArtifacts> {
    let grid_res = lm.cfg.model.heatmap_resolution;
    let sparse = sparse_motion(src_kp, drv_kp, grid_res)?;
    let motion = dense_motion(&lm.models.dense, &lm.store, source, &sparse, src_kp, drv_kp)?;
    let output = lm.models.generator.generate(&lm.store, source, &motion)?;
    Ok(FrameArtifacts { output, motion })
}

fn export_frame(raw: &Array3<f64>) -> Array3<f64> {
    raw.mapv(|v| v.clamp(0.0, 1.0))
}

/// 2x2 matrix helpers for relative-mode jacobian transplanting.
fn mat_of(set: &KeypointSet, k: usize) -> [[f64; 2]; 2] {
    [
        [set.jacobians[[k, 0, 0]], set.jacobians[[k, 0, 1]]],
        [set.jacobians[[k, 1, 0]], set.jacobians[[k, 1, 1]]],
    ]
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

fn mat_inv(m: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() <= crate::motion::JACOBIAN_DET_THRESHOLD {
        return Err(Error::Contract(format!(
            "relative mode: singular anchor jacobian (det {det:.3e})"
        )));
    }
    Ok([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Keypoints for relative transfer: source keypoints moved by the driving
/// displacement since frame 0, jacobians composed with the driving ratio.
fn transplant(
    src: &KeypointSet,
    drv_t: &KeypointSet,
    drv_0: &KeypointSet,
) -> Result<KeypointSet> {
    let k = src.self_coords.nrows();
    let src_all = src.all_coords();
    let t_all = drv_t.all_coords();
    let z_all = drv_0.all_coords();
    let mut coords = Array2::zeros((k, 2));
    let mut jac = ndarray::Array3::zeros((k, 2, 2));
    for i in 0..k {
        coords[[i, 0]] = src_all[[i, 0]] + (t_all[[i, 0]] - z_all[[i, 0]]);
        coords[[i, 1]] = src_all[[i, 1]] + (t_all[[i, 1]] - z_all[[i, 1]]);
        let ratio = mat_mul(mat_of(drv_t, i), mat_inv(mat_of(drv_0, i))?);
        let j = mat_mul(ratio, mat_of(src, i));
        for r in 0..2 {
            for c in 0..2 {
                jac[[i, r, c]] = j[r][c];
            }
        }
    }
    Ok(KeypointSet {
        self_coords: coords,
        sup_coords: Array2::zeros((0, 2)),
        jacobians: jac,
        heatmaps: src.heatmaps.slice(ndarray::s![0..k, .., ..]).to_owned(),
    })
}

/// Reconstruction task: the clip drives its own middle frame.
pub fn reconstruct(lm: &LoadedModels, clip: &VideoClip) -> Result<VideoClip> {
    Ok(reconstruct_detailed(lm, clip, |_, _| {})?.0)
}

pub fn reconstruct_detailed(
    lm: &LoadedModels,
    clip: &VideoClip,
    mut sink: impl FnMut(usize, &FrameArtifacts),
) -> Result<(VideoClip, usize)> {
    if clip.num_frames() < 2 {
        return Err(Error::Data(format!(
            "reconstruct: clip `{}` needs at least 2 frames",
            clip.id
        )));
    }
    let clip = clip.resized(lm.cfg.data.resolution);
    let bank = lm.models.motion_bank_end(&lm.cfg);
    let source_index = clip.num_frames() / 2;
    let source = &clip.frames[source_index];
    let src_kp = truncate_bank(&lm.models.detector.detect(&lm.store, source)?, bank);
    let mut frames = Vec::with_capacity(clip.num_frames());
    for (t, frame) in clip.frames.iter().enumerate() {
        let drv_kp = truncate_bank(&lm.models.detector.detect(&lm.store, frame)?, bank);
        let art = render_frame(lm, source, &src_kp, &drv_kp)?;
        frames.push(export_frame(&art.output.final_frame));
        sink(t, &art);
    }
    let out = VideoClip {
        id: format!("{}_recon", clip.id),
        frames,
        fps: clip.fps,
        landmarks: None,
        landmark_names: Vec::new(),
    };
    out.validate()?;
    Ok((out, source_index))
}

/// Animation/prediction task: `driving`'s motion animates `source`.
pub fn animate(
    lm: &LoadedModels,
    source: &Array3<f64>,
    driving: &VideoClip,
    mode: AnimateMode,
) -> Result<VideoClip> {
    animate_detailed(lm, source, driving, mode, |_, _| {})
}

pub fn animate_detailed(
    lm: &LoadedModels,
    source: &Array3<f64>,
    driving: &VideoClip,
    mode: AnimateMode,
    mut sink: impl FnMut(usize, &FrameArtifacts),
) -> Result<VideoClip> {
    let (c, h, w) = source.dim();
    if h != w {
        return Err(Error::Contract("animate: source must be square".into()));
    }
    if c != lm.cfg.data.channels {
        return Err(Error::Contract(format!(
            "animate: source has {c} channels, model wants {}",
            lm.cfg.data.channels
        )));
    }
    let res = lm.cfg.data.resolution;
    let driving = driving.resized(res);
    let source = if h == res {
        source.clone()
    } else {
        let clip = VideoClip {
            id: "src".into(),
            frames: vec![source.clone()],
            fps: 1.0,
            landmarks: None,
            landmark_names: Vec::new(),
        };
        clip.resized(res).frames[0].clone()
    };
    let bank = lm.models.motion_bank_end(&lm.cfg);
    let src_kp = truncate_bank(&lm.models.detector.detect(&lm.store, &source)?, bank);
    let drv_first = truncate_bank(
        &lm.models.detector.detect(&lm.store, &driving.frames[0])?,
        bank,
    );
    let mut frames = Vec::with_capacity(driving.num_frames());
    for (t, frame) in driving.frames.iter().enumerate() {
        let drv_kp = truncate_bank(&lm.models.detector.detect(&lm.store, frame)?, bank);
        let effective = match mode {
            AnimateMode::Absolute => drv_kp,
            AnimateMode::Relative => transplant(&src_kp, &drv_kp, &drv_first)?,
        };
        let art = render_frame(lm, &source, &src_kp, &effective)?;
        frames.push(export_frame(&art.output.final_frame));
        sink(t, &art);
    }
    let out = VideoClip {
        id: format!("{}_anim", driving.id),
        frames,
        fps: driving.fps,
        landmarks: None,
        landmark_names: Vec::new(),
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::dataset::synth::{generate_clips, SynthParams};
    use crate::training::{LoadedModels, Models};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_models() -> LoadedModels {
        let mut cfg = Config::desk();
        cfg.model.base_width = 8;
        cfg.model.max_width = 24;
        cfg.model.discriminator_base_width = 8;
        cfg.model.discriminator_max_width = 24;
        cfg.model.self_supervised_keypoints = 4;
        cfg.seed = 3;
        let mut store = crate::nn::ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let models = Models::build(&mut store, &cfg, &mut rng);
        LoadedModels { cfg, store, models }
    }

    fn one_clip() -> VideoClip {
        let params = SynthParams {
            n_clips: 1,
            frames_per_clip: 8,
            resolution: 64,
            ..SynthParams::default()
        };
        generate_clips(&params, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()[0]
            .clip
            .clone()
    }

    #[test]
    fn reconstruct_preserves_frame_count_and_is_deterministic() {
        let lm = tiny_models();
        let clip = one_clip();
        let (out1, src_idx) = reconstruct_detailed(&lm, &clip, |_, _| {}).unwrap();
        assert_eq!(out1.num_frames(), clip.num_frames());
        assert_eq!(out1.resolution(), 64);
        assert_eq!(src_idx, clip.num_frames() / 2);
        let out2 = reconstruct(&lm, &clip).unwrap();
        for (a, b) in out1.frames.iter().zip(&out2.frames) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y);
            }
        }
    }

    #[test]
    fn relative_mode_on_static_driving_matches_self_reconstruction() {
        // Driving clip = one frame repeated: zero relative motion, so every
        // output frame equals the source's self-reconstruction.
        let lm = tiny_models();
        let clip = one_clip();
        let source = clip.frames[2].clone();
        let static_driving = VideoClip {
            id: "static".into(),
            frames: vec![clip.frames[5].clone(); 4],
            fps: clip.fps,
            landmarks: None,
            landmark_names: Vec::new(),
        };
        let out = animate(&lm, &source, &static_driving, AnimateMode::Relative).unwrap();
        assert_eq!(out.num_frames(), 4);
        // Self-reconstruction: animate the source by itself in relative mode.
        let self_drive = VideoClip {
            id: "self".into(),
            frames: vec![source.clone()],
            fps: clip.fps,
            landmarks: None,
            landmark_names: Vec::new(),
        };
        let self_recon = animate(&lm, &source, &self_drive, AnimateMode::Relative).unwrap();
        for f in &out.frames {
            for (a, b) in f.iter().zip(self_recon.frames[0].iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relative_first_frame_is_self_reconstruction_of_source() {
        let lm = tiny_models();
        let clip = one_clip();
        let source = clip.frames[1].clone();
        let out = animate(&lm, &source, &clip, AnimateMode::Relative).unwrap();
        let self_drive = VideoClip {
            id: "self".into(),
            frames: vec![source.clone()],
            fps: clip.fps,
            landmarks: None,
            landmark_names: Vec::new(),
        };
        let self_recon = animate(&lm, &source, &self_drive, AnimateMode::Relative).unwrap();
        for (a, b) in out.frames[0].iter().zip(self_recon.frames[0].iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn absolute_mode_runs_and_preserves_shape() {
        let lm = tiny_models();
        let clip = one_clip();
        let source = clip.frames[0].clone();
        let out = animate(&lm, &source, &clip, AnimateMode::Absolute).unwrap();
        assert_eq!(out.num_frames(), clip.num_frames());
        assert_eq!(out.resolution(), clip.resolution());
    }

    #[test]
    fn inference_never_mutates_weights() {
        let lm = tiny_models();
        let before: Vec<_> = lm.store.iter().map(|s| s.value.clone()).collect();
        let clip = one_clip();
        let _ = reconstruct(&lm, &clip).unwrap();
        let _ = animate(&lm, &clip.frames[0], &clip, AnimateMode::Relative).unwrap();
        for (b, s) in before.iter().zip(lm.store.iter()) {
            assert_eq!(*b, s.value);
        }
    }
}
