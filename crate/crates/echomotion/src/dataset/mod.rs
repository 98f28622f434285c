//! Clip ingestion, training-pair sampling and the on-disk clip format.
//!
//! A dataset root holds `train/` and `test/` directories; each clip is a
//! directory of zero-padded PNG frames (`000000.png`, ...) plus an optional
//! `landmarks.json` (frame index -> S normalized `[x, y]` pairs) and a
//! `meta.json` with fps and landmark names.

pub mod synth;

use crate::error::{Error, Result};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Ordered frames with optional per-frame landmark annotations.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub id: String,
    /// `(C, H, W)` frames with values in `[0, 1]`; H = W after preprocessing.
    pub frames: Vec<Array3<f64>>,
    pub fps: f64,
    /// Per-frame lists of S points in normalized `[-1, 1]^2` coordinates.
    pub landmarks: Option<Vec<Vec<[f64; 2]>>>,
    pub landmark_names: Vec<String>,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn resolution(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim().1)
    }

    pub fn channels(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim().0)
    }

    pub fn validate(&self) -> Result<()> {
        let clip = &self.id;
        let Some(first) = self.frames.first() else {
            return Err(Error::Clip {
                clip: clip.clone(),
                msg: "clip has no frames".into(),
            });
        };
        let dim = first.dim();
        if dim.1 != dim.2 {
            return Err(Error::Clip {
                clip: clip.clone(),
                msg: format!("frames are not square after preprocessing: {}x{}", dim.1, dim.2),
            });
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::Clip {
                    clip: clip.clone(),
                    msg: format!("frame {t} has mismatched shape {:?} vs {:?}", f.dim(), dim),
                });
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Clip {
                    clip: clip.clone(),
                    msg: format!("frame {t} has values outside [0, 1]"),
                });
            }
        }
        if let Some(lm) = &self.landmarks {
            if lm.len() != self.frames.len() {
                return Err(Error::Clip {
                    clip: clip.clone(),
                    msg: format!(
                        "landmarks cover {} frames but clip has {}",
                        lm.len(),
                        self.frames.len()
                    ),
                });
            }
            let s = lm[0].len();
            for (t, pts) in lm.iter().enumerate() {
                if pts.len() != s {
                    return Err(Error::Clip {
                        clip: clip.clone(),
                        msg: format!("frame {t} carries {} landmarks, expected {s}", pts.len()),
                    });
                }
                for p in pts {
                    if !(-1.0..=1.0).contains(&p[0]) || !(-1.0..=1.0).contains(&p[1]) {
                        return Err(Error::Clip {
                            clip: clip.clone(),
                            msg: format!("frame {t} landmark {p:?} outside [-1, 1]^2"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Bilinear-resize every frame to `resolution` (normalized landmark
    /// coordinates are resolution independent).
    pub fn resized(&self, resolution: usize) -> VideoClip {
        if self.resolution() == resolution {
            return self.clone();
        }
        let frames = self
            .frames
            .iter()
            .map(|f| resize_frame(f, resolution))
            .collect();
        VideoClip {
            id: self.id.clone(),
            frames,
            fps: self.fps,
            landmarks: self.landmarks.clone(),
            landmark_names: self.landmark_names.clone(),
        }
    }
}

fn resize_frame(frame: &Array3<f64>, res: usize) -> Array3<f64> {
    let (c, h, w) = frame.dim();
    let mut out = Array3::zeros((c, res, res));
    let taps = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
        let f = src.floor();
        let wgt = src - f;
        let i0 = (f.max(0.0) as usize).min(in_n - 1);
        let i1 = (i0 + 1).min(in_n - 1);
        (i0, i1, wgt)
    };
    for oi in 0..res {
        let (i0, i1, wi) = taps(oi, res, h);
        for oj in 0..res {
            let (j0, j1, wj) = taps(oj, res, w);
            for ci in 0..c {
                let v = (1.0 - wi) * ((1.0 - wj) * frame[[ci, i0, j0]] + wj * frame[[ci, i0, j1]])
                    + wi * ((1.0 - wj) * frame[[ci, i1, j0]] + wj * frame[[ci, i1, j1]]);
                out[[ci, oi, oj]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// A source/driving training pair from one clip.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub source: Array3<f64>,
    pub driving: Array3<f64>,
    pub source_landmarks: Option<Vec<[f64; 2]>>,
    pub driving_landmarks: Option<Vec<[f64; 2]>>,
    pub source_index: usize,
    pub driving_index: usize,
}

/// Draw a uniform ordered pair of distinct frame indices.
pub fn sample_pair<R: Rng + ?Sized>(clip: &VideoClip, rng: &mut R) -> Result<FramePair> {
    let n = clip.num_frames();
    if n < 2 {
        return Err(Error::Data(format!(
            "clip `{}` has {n} frame(s); need at least 2 to sample a pair",
            clip.id
        )));
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok(FramePair {
        source: clip.frames[i].clone(),
        driving: clip.frames[j].clone(),
        source_landmarks: clip.landmarks.as_ref().map(|l| l[i].clone()),
        driving_landmarks: clip.landmarks.as_ref().map(|l| l[j].clone()),
        source_index: i,
        driving_index: j,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    fps: f64,
    #[serde(default)]
    landmark_names: Vec<String>,
    #[serde(default)]
    schema_version: u32,
    /// Diagnostic: analytic texture value at each landmark, per frame
    /// (written by the synthetic generator).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anchor_values: Option<BTreeMap<String, Vec<f64>>>,
}

fn frame_file_name(t: usize) -> String {
    format!("{t:06}.png")
}

/// Load every clip of a split, ordered lexicographically by clip id.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<VideoClip>> {
    let dir = root.join(split.dir_name());
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut clip_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let mut clips = Vec::with_capacity(clip_dirs.len());
    for dir in clip_dirs {
        clips.push(load_clip(&dir)?);
    }
    Ok(clips)
}

/// Load one clip directory; pads frames to square and validates invariants.
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut frame_files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frame_files.sort();
    if frame_files.is_empty() {
        return Err(Error::Clip {
            clip: id,
            msg: "no frames found".into(),
        });
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    let mut pad_scale: Option<(f64, f64)> = None;
    for (t, path) in frame_files.iter().enumerate() {
        let img = image::open(path).map_err(|e| Error::Clip {
            clip: id.clone(),
            msg: format!("frame {t} ({}) failed to decode: {e}", path.display()),
        })?;
        let (frame, scale) = decode_frame(&img);
        match pad_scale {
            None => pad_scale = Some(scale),
            Some(s) if s == scale => {}
            Some(_) => {
                return Err(Error::Clip {
                    clip: id,
                    msg: format!("frame {t} has mismatched resolution"),
                })
            }
        }
        if frames
            .first()
            .is_some_and(|f: &Array3<f64>| f.dim() != frame.dim())
        {
            return Err(Error::Clip {
                clip: id,
                msg: format!("frame {t} has mismatched resolution"),
            });
        }
        frames.push(frame);
    }
    let meta_path = dir.join("meta.json");
    let meta: MetaFile = if meta_path.exists() {
        let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::Clip {
            clip: id.clone(),
            msg: format!("meta.json: {e}"),
        })?
    } else {
        MetaFile {
            fps: 25.0,
            landmark_names: Vec::new(),
            schema_version: 1,
            anchor_values: None,
        }
    };
    let lm_path = dir.join("landmarks.json");
    let landmarks = if lm_path.exists() {
        let raw = fs::read(&lm_path).map_err(|e| Error::io(&lm_path, e))?;
        let map: BTreeMap<String, Vec<[f64; 2]>> =
            serde_json::from_slice(&raw).map_err(|e| Error::Clip {
                clip: id.clone(),
                msg: format!("landmarks.json: {e}"),
            })?;
        let mut per_frame = Vec::with_capacity(frames.len());
        let (sx, sy) = pad_scale.unwrap_or((1.0, 1.0));
        for t in 0..frames.len() {
            let pts = map.get(&t.to_string()).ok_or_else(|| Error::Clip {
                clip: id.clone(),
                msg: format!("landmarks.json missing frame {t}"),
            })?;
            per_frame.push(pts.iter().map(|p| [p[0] * sx, p[1] * sy]).collect());
        }
        Some(per_frame)
    } else {
        None
    };
    let clip = VideoClip {
        id,
        frames,
        fps: meta.fps,
        landmarks,
        landmark_names: meta.landmark_names,
    };
    clip.validate()?;
    Ok(clip)
}

/// Decode to `(C, D, D)` with centered zero padding to square; returns the
/// landmark coordinate scale (old/new per axis) implied by the padding.
fn decode_frame(img: &image::DynamicImage) -> (Array3<f64>, (f64, f64)) {
    use image::GenericImageView;
    let (w, h) = img.dimensions();
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
    );
    let d = w.max(h) as usize;
    let (ox, oy) = ((d - w as usize) / 2, (d - h as usize) / 2);
    let c = if gray { 1 } else { 3 };
    let mut out = Array3::zeros((c, d, d));
    if gray {
        let l = img.to_luma8();
        for (x, y, p) in l.enumerate_pixels() {
            out[[0, oy + y as usize, ox + x as usize]] = p.0[0] as f64 / 255.0;
        }
    } else {
        let rgb = img.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            for ci in 0..3 {
                out[[ci, oy + y as usize, ox + x as usize]] = p.0[ci] as f64 / 255.0;
            }
        }
    }
    (out, (w as f64 / d as f64, h as f64 / d as f64))
}

/// Write a clip in the on-disk format (PNG frames + landmarks + meta).
pub fn save_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    save_clip_with_anchor_values(dir, clip, None)
}

pub(crate) fn save_clip_with_anchor_values(
    dir: &Path,
    clip: &VideoClip,
    anchor_values: Option<&[Vec<f64>]>,
) -> Result<()> {
    clip.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(t));
        write_frame_png(&path, frame)?;
    }
    if let Some(lm) = &clip.landmarks {
        let map: BTreeMap<String, &Vec<[f64; 2]>> = lm
            .iter()
            .enumerate()
            .map(|(t, pts)| (t.to_string(), pts))
            .collect();
        let path = dir.join("landmarks.json");
        let raw = serde_json::to_vec_pretty(&map)
            .map_err(|e| Error::Data(format!("landmarks encode: {e}")))?;
        fs::write(&path, raw).map_err(|e| Error::io(&path, e))?;
    }
    let meta = MetaFile {
        fps: clip.fps,
        landmark_names: clip.landmark_names.clone(),
        schema_version: 1,
        anchor_values: anchor_values.map(|av| {
            av.iter()
                .enumerate()
                .map(|(t, v)| (t.to_string(), v.clone()))
                .collect()
        }),
    };
    let path = dir.join("meta.json");
    let raw =
        serde_json::to_vec_pretty(&meta).map_err(|e| Error::Data(format!("meta encode: {e}")))?;
    fs::write(&path, raw).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// 8-bit PNG export; values are clamped then quantized.
pub fn write_frame_png(path: &Path, frame: &Array3<f64>) -> Result<()> {
    let (c, h, w) = frame.dim();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res: std::result::Result<(), image::ImageError> = if c == 1 {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0[0] = quant(frame[[0, y as usize, x as usize]]);
        }
        img.save(path)
    } else {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for ci in 0..3 {
                p.0[ci] = quant(frame[[ci.min(c - 1), y as usize, x as usize]]);
            }
        }
        img.save(path)
    };
    res.map_err(|e| Error::Data(format!("png write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tiny_clip(n: usize) -> VideoClip {
        VideoClip {
            id: "clip".into(),
            frames: (0..n)
                .map(|t| Array3::from_elem((1, 8, 8), t as f64 / n as f64))
                .collect(),
            fps: 25.0,
            landmarks: None,
            landmark_names: Vec::new(),
        }
    }

    #[test]
    fn sample_pair_rejects_single_frame() {
        let clip = tiny_clip(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_pair(&clip, &mut rng).is_err());
    }

    #[test]
    fn sample_pair_two_frames_both_orders() {
        let clip = tiny_clip(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [0usize; 2];
        for _ in 0..2000 {
            let p = sample_pair(&clip, &mut rng).unwrap();
            assert_ne!(p.source_index, p.driving_index);
            seen[p.source_index] += 1;
        }
        // Each ordered pair with probability 1/2.
        let frac = seen[0] as f64 / 2000.0;
        assert!((frac - 0.5).abs() < 0.05, "order fraction {frac}");
    }

    #[test]
    fn sample_pair_deterministic_under_seed() {
        let clip = tiny_clip(10);
        let draw = |seed: u64| -> Vec<(usize, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| {
                    let p = sample_pair(&clip, &mut rng).unwrap();
                    (p.source_index, p.driving_index)
                })
                .collect()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn sample_pair_uniform_chi_squared() {
        // 50-frame clip, 1e4 draws: chi-squared test over the 2450 ordered
        // pairs accepts uniformity at p > 0.01.
        let n = 50usize;
        let clip = tiny_clip(n);
        let mut rng = ChaCha8Rng::seed_from_u64(1203);
        let draws = 10_000usize;
        let mut counts = vec![0.0f64; n * n];
        for _ in 0..draws {
            let p = sample_pair(&clip, &mut rng).unwrap();
            counts[p.source_index * n + p.driving_index] += 1.0;
        }
        let cells = (n * n - n) as f64;
        let expected = draws as f64 / cells;
        let mut chi2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    assert_eq!(counts[i * n + j], 0.0, "diagonal pair sampled");
                    continue;
                }
                let d = counts[i * n + j] - expected;
                chi2 += d * d / expected;
            }
        }
        let dist = ChiSquared::new(cells - 1.0).unwrap();
        let p_value = 1.0 - dist.cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}");
    }

    #[test]
    fn clip_validation_catches_mismatch() {
        let mut clip = tiny_clip(3);
        clip.frames[1] = Array3::from_elem((1, 4, 4), 0.2);
        let err = clip.validate().unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn resize_preserves_range_and_shape() {
        let clip = tiny_clip(3).resized(16);
        assert_eq!(clip.resolution(), 16);
        clip.validate().unwrap();
    }
}
