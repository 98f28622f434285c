//! Synthetic desk-scale dataset: speckle-textured deformable blobs moving on
//! smooth trajectories under a per-frame TPS deformation, with exact
//! ground-truth landmarks at designated blob anchor points.
//!
//! Frames are rendered analytically: the pixel value at `z` is the base scene
//! evaluated at the Newton inverse of the frame's TPS warp, so landmarks
//! (forward-mapped anchors) land exactly on their texture.

use super::{save_clip_with_anchor_values, Split, VideoClip};
use crate::error::{Error, Result};
use crate::tps::{control_grid_5x5, TpsTransform};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    pub resolution: usize,
    /// Scales blob trajectories, rotation/scale wobble and the TPS
    /// deformation; zero yields static clips.
    pub motion_amplitude: f64,
    /// Amplitude of the per-frame TPS control displacements.
    pub tps_strength: f64,
    /// Number of supervised landmarks (anchor points), at most one per blob.
    pub supervised_landmarks: usize,
    pub fps: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_clips: 20,
            frames_per_clip: 24,
            resolution: 64,
            motion_amplitude: 1.0,
            tps_strength: 0.04,
            supervised_landmarks: 2,
            fps: 25.0,
        }
    }
}

/// Bilinearly interpolated grid of Rayleigh draws (mean 1), the multiplicative
/// speckle texture.
#[derive(Debug, Clone)]
struct SpeckleField {
    grid: Vec<f64>,
    n: usize,
}

impl SpeckleField {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        // Rayleigh with sigma = sqrt(2/pi) has unit mean; inverse-CDF sampling.
        let sigma = (2.0 / std::f64::consts::PI).sqrt();
        let grid = (0..n * n)
            .map(|_| {
                let u: f64 = rng.random_range(1e-12..1.0);
                sigma * (-2.0 * u.ln()).sqrt()
            })
            .collect();
        SpeckleField { grid, n }
    }

    /// Sample at local coordinates in [-span, span]^2.
    fn at(&self, x: f64, y: f64, span: f64) -> f64 {
        let n = self.n;
        let u = ((x + span) / (2.0 * span)).clamp(0.0, 1.0) * (n - 1) as f64;
        let v = ((y + span) / (2.0 * span)).clamp(0.0, 1.0) * (n - 1) as f64;
        let (i0, j0) = (v.floor() as usize, u.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(n - 1), (j0 + 1).min(n - 1));
        let (wv, wu) = (v - i0 as f64, u - j0 as f64);
        let g = |i: usize, j: usize| self.grid[i * n + j];
        (1.0 - wv) * ((1.0 - wu) * g(i0, j0) + wu * g(i0, j1))
            + wv * ((1.0 - wu) * g(i1, j0) + wu * g(i1, j1))
    }
}

#[derive(Debug, Clone)]
struct Oscillation {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Oscillation {
    fn sample(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        Oscillation {
            amp: amp * rng.random_range(0.5..1.0),
            freq: rng.random_range(1..3) as f64,
            phase: rng.random_range(0.0..TAU),
        }
    }

    fn at(&self, t01: f64) -> f64 {
        self.amp * (TAU * self.freq * t01 + self.phase).sin()
    }
}

#[derive(Debug, Clone)]
struct Blob {
    center0: [f64; 2],
    radius: f64,
    brightness: f64,
    traj: [Oscillation; 2],
    rot: Oscillation,
    scale: Oscillation,
    speckle: SpeckleField,
    anchor_local: [f64; 2],
}

impl Blob {
    fn center(&self, t01: f64) -> [f64; 2] {
        [
            self.center0[0] + self.traj[0].at(t01),
            self.center0[1] + self.traj[1].at(t01),
        ]
    }

    fn pose(&self, t01: f64) -> (f64, f64) {
        (self.rot.at(t01), 1.0 + self.scale.at(t01))
    }

    /// Blob-local coordinates of a scene point at time `t01`.
    fn local(&self, z: [f64; 2], t01: f64) -> [f64; 2] {
        let c = self.center(t01);
        let (angle, scale) = self.pose(t01);
        let (dx, dy) = (z[0] - c[0], z[1] - c[1]);
        let (cs, sn) = (angle.cos(), angle.sin());
        let r = self.radius * scale;
        [(cs * dx + sn * dy) / r, (-sn * dx + cs * dy) / r]
    }

    /// Scene position of a blob-local point at time `t01`.
    fn to_world(&self, local: [f64; 2], t01: f64) -> [f64; 2] {
        let c = self.center(t01);
        let (angle, scale) = self.pose(t01);
        let (cs, sn) = (angle.cos(), angle.sin());
        let r = self.radius * scale;
        [
            c[0] + r * (cs * local[0] - sn * local[1]),
            c[1] + r * (sn * local[0] + cs * local[1]),
        ]
    }

    fn intensity(&self, z: [f64; 2], t01: f64) -> f64 {
        let l = self.local(z, t01);
        let r2 = l[0] * l[0] + l[1] * l[1];
        if r2 > 2.25 {
            return 0.0;
        }
        let falloff = (-3.0 * r2 * r2).exp();
        let body = self.brightness * falloff * self.speckle.at(l[0], l[1], 1.3);
        let (ax, ay) = (l[0] - self.anchor_local[0], l[1] - self.anchor_local[1]);
        let bump = 0.35 * (-(ax * ax + ay * ay) / (2.0 * 0.22 * 0.22)).exp() * falloff;
        body + bump
    }
}

struct Scene {
    blobs: Vec<Blob>,
    background: SpeckleField,
}

impl Scene {
    fn value(&self, z: [f64; 2], t01: f64) -> f64 {
        let mut v = 0.05 + 0.05 * self.background.at(z[0], z[1], 1.0);
        for b in &self.blobs {
            v += b.intensity(z, t01);
        }
        v.clamp(0.0, 1.0)
    }
}

/// One generated clip plus render-time bookkeeping: the analytic scene value
/// at each landmark (the oracle for landmark/texture alignment checks).
#[derive(Debug, Clone)]
pub struct RenderedClip {
    pub clip: VideoClip,
    /// `anchor_values[t][s]`: scene value at landmark `s` of frame `t`.
    pub anchor_values: Vec<Vec<f64>>,
}

fn build_scene(rng: &mut ChaCha8Rng, params: &SynthParams) -> Result<Scene> {
    let s = params.supervised_landmarks;
    let max_blobs = 3usize;
    if s > max_blobs {
        return Err(Error::Contract(format!(
            "supervised_landmarks = {s} exceeds the blob budget of {max_blobs}"
        )));
    }
    let n_blobs = rng.random_range(s.max(2)..=max_blobs);
    // Spread centers to limit overlap.
    let slots: [[f64; 2]; 3] = [[-0.4, -0.33], [0.42, 0.05], [-0.1, 0.45]];
    let amp = params.motion_amplitude;
    let mut blobs = Vec::with_capacity(n_blobs);
    for b in 0..n_blobs {
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.08..0.08);
        let center0 = [slots[b][0] + jitter(rng), slots[b][1] + jitter(rng)];
        let anchor_angle = rng.random_range(0.0..TAU);
        blobs.push(Blob {
            center0,
            radius: rng.random_range(0.22..0.34),
            brightness: rng.random_range(0.5..0.8),
            traj: [
                Oscillation::sample(rng, 0.16 * amp),
                Oscillation::sample(rng, 0.16 * amp),
            ],
            rot: Oscillation::sample(rng, 0.35 * amp),
            scale: Oscillation::sample(rng, 0.12 * amp),
            speckle: SpeckleField::new(rng, 12),
            anchor_local: [0.3 * anchor_angle.cos(), 0.3 * anchor_angle.sin()],
        });
    }
    Ok(Scene {
        blobs,
        background: SpeckleField::new(rng, 16),
    })
}

/// Generate clips in memory. Deterministic given the RNG state.
pub fn generate_clips(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<Vec<RenderedClip>> {
    if params.resolution < 32 {
        return Err(Error::Contract(format!(
            "synth resolution must be >= 32, got {}",
            params.resolution
        )));
    }
    if params.frames_per_clip < 8 {
        return Err(Error::Contract(format!(
            "synth frames_per_clip must be >= 8, got {}",
            params.frames_per_clip
        )));
    }
    let mut out = Vec::with_capacity(params.n_clips);
    for clip_idx in 0..params.n_clips {
        let scene = build_scene(rng, params)?;
        // Per-control-point oscillating displacements drive the TPS warp.
        let control = control_grid_5x5();
        let warp_osc: Vec<[Oscillation; 2]> = (0..control.len())
            .map(|_| {
                [
                    Oscillation::sample(rng, params.tps_strength * params.motion_amplitude),
                    Oscillation::sample(rng, params.tps_strength * params.motion_amplitude),
                ]
            })
            .collect();
        let res = params.resolution;
        let t_span = params.frames_per_clip as f64;
        let mut frames = Vec::with_capacity(params.frames_per_clip);
        let mut landmarks = Vec::with_capacity(params.frames_per_clip);
        let mut anchor_values = Vec::with_capacity(params.frames_per_clip);
        for t in 0..params.frames_per_clip {
            let t01 = t as f64 / t_span;
            let displacements: Vec<[f64; 2]> = warp_osc
                .iter()
                .map(|o| [o[0].at(t01), o[1].at(t01)])
                .collect();
            let warp = TpsTransform::fit(
                control.clone(),
                displacements,
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            )?;
            let mut frame = Array3::zeros((1, res, res));
            for i in 0..res {
                let zy = crate::tensor::norm_coord(i, res);
                for j in 0..res {
                    let zx = crate::tensor::norm_coord(j, res);
                    let base = warp.invert([zx, zy]);
                    frame[[0, i, j]] = scene.value(base, t01);
                }
            }
            let mut pts = Vec::with_capacity(params.supervised_landmarks);
            let mut vals = Vec::with_capacity(params.supervised_landmarks);
            for s in 0..params.supervised_landmarks {
                let blob = &scene.blobs[s];
                let world = blob.to_world(blob.anchor_local, t01);
                let mapped = warp.eval(world);
                pts.push([mapped[0].clamp(-1.0, 1.0), mapped[1].clamp(-1.0, 1.0)]);
                vals.push(scene.value(world, t01));
            }
            frames.push(frame);
            landmarks.push(pts);
            anchor_values.push(vals);
        }
        let clip = VideoClip {
            id: format!("clip_{clip_idx:04}"),
            frames,
            fps: params.fps,
            landmarks: Some(landmarks),
            landmark_names: (0..params.supervised_landmarks)
                .map(|s| format!("anchor_{s}"))
                .collect(),
        };
        clip.validate()?;
        out.push(RenderedClip {
            clip,
            anchor_values,
        });
    }
    Ok(out)
}

/// Generate a dataset split on disk.
pub fn synth_generate(
    root: &Path,
    split: Split,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RenderedClip>> {
    let rendered = generate_clips(params, rng)?;
    let dir = root.join(split.dir_name());
    for r in &rendered {
        save_clip_with_anchor_values(&dir.join(&r.clip.id), &r.clip, Some(&r.anchor_values))?;
    }
    Ok(rendered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, sample_pair};
    use rand::SeedableRng;
    use tempfile::tempdir;

    fn quick_params() -> SynthParams {
        SynthParams {
            n_clips: 2,
            frames_per_clip: 8,
            resolution: 64,
            ..SynthParams::default()
        }
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SynthParams {
            n_clips: 4,
            frames_per_clip: 8,
            resolution: 64,
            ..SynthParams::default()
        };
        let clips = generate_clips(&params, &mut rng).unwrap();
        assert_eq!(clips.len(), 4);
        for r in &clips {
            assert_eq!(r.clip.num_frames(), 8);
            assert_eq!(r.clip.resolution(), 64);
            assert_eq!(r.clip.channels(), 1);
            let lm = r.clip.landmarks.as_ref().unwrap();
            assert!(lm.iter().all(|pts| pts.len() == 2));
        }
    }

    #[test]
    fn zero_motion_amplitude_freezes_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SynthParams {
            motion_amplitude: 0.0,
            ..quick_params()
        };
        let clips = generate_clips(&params, &mut rng).unwrap();
        let clip = &clips[0].clip;
        let first = &clip.frames[0];
        for f in &clip.frames[1..] {
            for (a, b) in f.iter().zip(first.iter()) {
                assert_eq!(*a, *b, "frames differ despite zero amplitude");
            }
        }
        let lm = clip.landmarks.as_ref().unwrap();
        for pts in &lm[1..] {
            assert_eq!(pts, &lm[0]);
        }
    }

    #[test]
    fn landmark_hits_anchor_texture_value() {
        // Bilinear sampling of the rendered frame at each landmark matches
        // the analytic scene value recorded at render time, within
        // interpolation tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clips = generate_clips(&quick_params(), &mut rng).unwrap();
        let mut worst = 0.0f64;
        for r in &clips {
            let lm = r.clip.landmarks.as_ref().unwrap();
            for (t, frame) in r.clip.frames.iter().enumerate() {
                for (s, p) in lm[t].iter().enumerate() {
                    let sampled = bilinear(frame, *p);
                    let expect = r.anchor_values[t][s];
                    worst = worst.max((sampled - expect).abs());
                }
            }
        }
        assert!(worst < 0.08, "landmark texture mismatch {worst}");
    }

    fn bilinear(frame: &Array3<f64>, p: [f64; 2]) -> f64 {
        let (_, h, w) = frame.dim();
        let px = crate::tensor::to_pixel(p[0], w).clamp(0.0, w as f64 - 1.0);
        let py = crate::tensor::to_pixel(p[1], h).clamp(0.0, h as f64 - 1.0);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (wx, wy) = (px - x0 as f64, py - y0 as f64);
        (1.0 - wy) * ((1.0 - wx) * frame[[0, y0, x0]] + wx * frame[[0, y0, x1]])
            + wy * ((1.0 - wx) * frame[[0, y1, x0]] + wx * frame[[0, y1, x1]])
    }

    #[test]
    fn round_trip_preserves_landmarks_exactly() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = SynthParams {
            n_clips: 3,
            frames_per_clip: 8,
            resolution: 64,
            ..SynthParams::default()
        };
        let rendered = synth_generate(dir.path(), Split::Train, &params, &mut rng).unwrap();
        let loaded = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in rendered.iter().zip(&loaded) {
            assert_eq!(orig.clip.id, back.id);
            let a = orig.clip.landmarks.as_ref().unwrap();
            let b = back.landmarks.as_ref().unwrap();
            for (pa, pb) in a.iter().zip(b) {
                for (qa, qb) in pa.iter().zip(pb) {
                    assert!((qa[0] - qb[0]).abs() < 1e-6);
                    assert!((qa[1] - qb[1]).abs() < 1e-6);
                }
            }
            // Frames survive 8-bit quantization.
            for (fa, fb) in orig.clip.frames.iter().zip(&back.frames) {
                for (va, vb) in fa.iter().zip(fb.iter()) {
                    assert!((va - vb).abs() <= 0.5 / 255.0 + 1e-9);
                }
            }
        }
        // Deterministic ordering and pair sampling on the reloaded data.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_pair(&loaded[0], &mut rng).unwrap();
        assert_ne!(p.source_index, p.driving_index);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_clips(&quick_params(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_clips(&quick_params(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (fa, fb) in ra.clip.frames.iter().zip(&rb.clip.frames) {
                for (x, y) in fa.iter().zip(fb.iter()) {
                    assert_eq!(*x, *y);
                }
            }
        }
    }
}
