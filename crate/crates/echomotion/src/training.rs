//! The weakly-supervised adversarial training loop.
//!
//! One step: detect keypoints on source, driving and TPS-augmented driving;
//! build sparse and dense motion driving -> source; generate; update the
//! generator side (detector, dense motion, generator) on the weighted total;
//! then update the discriminator on real driving vs the detached prediction.

use crate::adversary::{DiscriminatorConfig, PatchDiscriminator};
use crate::checkpoint::{self, TrainerState};
use crate::config::Config;
use crate::dataset::{sample_pair, FramePair, VideoClip};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::keypoints::{DetectorConfig, KeypointDetector};
use crate::losses::{
    self, equivariance_loss, feature_matching, keypoint_supervision_loss, lsgan_discriminator_loss,
    lsgan_generator_loss, make_extractor, reconstruction_l1, reconstruction_perceptual,
    slice_bank, FeatureExtractor, LossReport, LossTerms, PyramidSpec,
};
use crate::motion::{sparse_motion_vars, DenseMotionConfig, DenseMotionNet};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Graph;
use crate::tps::{random_tps, TpsTransform};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// All trainable networks of one system.
pub struct Models {
    pub detector: KeypointDetector,
    pub dense: DenseMotionNet,
    pub generator: Generator,
    pub discriminator: Option<PatchDiscriminator>,
}

impl Models {
    /// Instantiate networks per the config; initialization draws come from
    /// the dedicated init RNG stream so training randomness is independent.
    pub fn build(store: &mut ParamStore, cfg: &Config, rng: &mut ChaCha8Rng) -> Models {
        let k = cfg.model.self_supervised_keypoints;
        let s = cfg.effective_supervised();
        let detector = KeypointDetector::new(
            store,
            rng,
            DetectorConfig {
                num_self: k,
                num_supervised: s,
                heatmap_resolution: cfg.model.heatmap_resolution,
                softmax_temperature: cfg.model.softmax_temperature,
                gt_sigma: cfg.model.gt_sigma,
                in_channels: cfg.data.channels,
                base_width: cfg.model.base_width,
                max_width: cfg.model.max_width,
                num_blocks: cfg.model.num_unet_blocks,
            },
        );
        let motion_keypoints = k + if cfg.model.supervised_in_motion { s } else { 0 };
        let dense = DenseMotionNet::new(
            store,
            rng,
            DenseMotionConfig {
                num_keypoints: motion_keypoints,
                grid_resolution: cfg.model.heatmap_resolution,
                in_channels: cfg.data.channels,
                base_width: cfg.model.base_width,
                max_width: cfg.model.max_width,
                num_blocks: cfg.model.num_unet_blocks,
                heat_sigma: cfg.model.gt_sigma,
            },
        );
        let generator = Generator::new(
            store,
            rng,
            GeneratorConfig {
                in_channels: cfg.data.channels,
                base_width: cfg.model.base_width,
                max_width: cfg.model.max_width,
                num_down_blocks: cfg.model.num_generator_blocks,
                num_bottleneck_blocks: cfg.model.num_bottleneck_blocks,
                first_kernel: cfg.model.generator_first_kernel,
                texture_decoder: cfg.model.texture_decoder,
            },
        );
        let discriminator = cfg.model.adversarial.then(|| {
            PatchDiscriminator::new(
                store,
                rng,
                DiscriminatorConfig {
                    in_channels: cfg.data.channels,
                    base_width: cfg.model.discriminator_base_width,
                    max_width: cfg.model.discriminator_max_width,
                },
            )
        });
        Models {
            detector,
            dense,
            generator,
            discriminator,
        }
    }

    /// Keypoint bank used by the motion pipeline (`0..end`).
    pub fn motion_bank_end(&self, cfg: &Config) -> usize {
        cfg.model.self_supervised_keypoints
            + if cfg.model.supervised_in_motion {
                cfg.effective_supervised()
            } else {
                0
            }
    }
}

#[derive(Serialize)]
struct LogLine {
    epoch: u64,
    step: u64,
    #[serde(flatten)]
    report: LossReport,
}

pub struct FitOutput {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub steps_run: u64,
}

pub struct Trainer {
    pub cfg: Config,
    pub store: ParamStore,
    pub models: Models,
    pub extractor: Box<dyn FeatureExtractor>,
    pub pyramid: PyramidSpec,
    pub opt_g: Adam,
    pub opt_d: Adam,
    rng: ChaCha8Rng,
    pub epoch: u64,
    pub step: u64,
}

/// Seed stream used to derive perceptual-extractor weights in the fallback
/// profile; fixed so metrics and losses are reproducible across runs.
const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(0);
        let models = Models::build(&mut store, &cfg, &mut init_rng);
        let extractor = make_extractor(
            cfg.model.perceptual_extractor,
            EXTRACTOR_SEED,
            cfg.data.channels,
        )?;
        let pyramid = PyramidSpec::for_base_resolution(cfg.data.resolution);
        pyramid.validate()?;
        let lr = cfg.training.learning_rate;
        let (b1, b2) = (cfg.training.adam_beta1, cfg.training.adam_beta2);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            opt_g: Adam::new(lr, b1, b2),
            opt_d: Adam::new(lr, b1, b2),
            cfg,
            store,
            models,
            extractor,
            pyramid,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Rebuild a trainer from a checkpoint archive.
    pub fn resume(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let cfg = loaded.header.config.clone();
        let mut trainer = Trainer::new(cfg)?;
        checkpoint::apply_to_store(&loaded, &mut trainer.store)?;
        let state = &loaded.header.state;
        trainer.opt_g = state.opt_g.clone();
        trainer.opt_d = state.opt_d.clone();
        trainer.epoch = state.epoch;
        trainer.step = state.step;
        trainer.rng.set_word_pos(state.rng_word_pos);
        Ok(trainer)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch,
            step: self.step,
            rng_word_pos: self.rng.get_word_pos(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.cfg, &self.state(), &self.store)
    }

    /// Borrow the training RNG (pair sampling shares the stream with
    /// augmentation so resume reproduces the exact draw sequence).
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn batch_arrays(&self, pairs: &[FramePair]) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let b = pairs.len();
        let c = self.cfg.data.channels;
        let r = self.cfg.data.resolution;
        let mut source = ArrayD::zeros(IxDyn(&[b, c, r, r]));
        let mut driving = ArrayD::zeros(IxDyn(&[b, c, r, r]));
        for (n, p) in pairs.iter().enumerate() {
            let (pc, ph, pw) = p.source.dim();
            if pc != c || ph != r || pw != r {
                return Err(Error::Data(format!(
                    "pair {n} has shape ({pc},{ph},{pw}); config wants ({c},{r},{r})"
                )));
            }
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        source[[n, ci, i, j]] = p.source[[ci, i, j]];
                        driving[[n, ci, i, j]] = p.driving[[ci, i, j]];
                    }
                }
            }
        }
        Ok((source, driving))
    }

    /// One optimization step over a batch of frame pairs.
    pub fn train_step(&mut self, pairs: &[FramePair]) -> Result<LossReport> {
        if pairs.is_empty() {
            return Err(Error::Contract("train_step: empty batch".into()));
        }
        let cfg = self.cfg.clone();
        let b = pairs.len();
        let res = cfg.data.resolution;
        let k = cfg.model.self_supervised_keypoints;
        let s = cfg.effective_supervised();
        let (source_arr, driving_arr) = self.batch_arrays(pairs)?;

        // Per-sample TPS augmentations for the equivariance pass.
        let tps: Vec<TpsTransform> = (0..b)
            .map(|_| random_tps(&mut self.rng, cfg.training.tps_strength))
            .collect::<Result<_>>()?;
        let tps = Rc::new(tps);
        let mut grids = ArrayD::zeros(IxDyn(&[b, res, res, 2]));
        for (n, t) in tps.iter().enumerate() {
            let grid = t.grid(res, res);
            for i in 0..res {
                for j in 0..res {
                    grids[[n, i, j, 0]] = grid[[i, j, 0]];
                    grids[[n, i, j, 1]] = grid[[i, j, 1]];
                }
            }
        }

        let mut g = Graph::new();
        let source = g.constant(source_arr);
        let driving = g.constant(driving_arr);
        let tps_grid = g.constant(grids);
        let augmented = g.grid_sample(driving, tps_grid);

        let det_src = self.models.detector.forward(&mut g, &self.store, source);
        let det_drv = self.models.detector.forward(&mut g, &self.store, driving);
        let det_aug = self.models.detector.forward(&mut g, &self.store, augmented);

        // Equivariance on the self-supervised bank (optionally the full set).
        let eq_end = if cfg.model.supervised_in_equivariance {
            k + s
        } else {
            k
        };
        let cx = slice_bank(&mut g, det_drv.coords, 0, eq_end);
        let jx = slice_bank(&mut g, det_drv.jacobians, 0, eq_end);
        let cy = slice_bank(&mut g, det_aug.coords, 0, eq_end);
        let jy = slice_bank(&mut g, det_aug.jacobians, 0, eq_end);
        let (eq1, eq2) = equivariance_loss(&mut g, cx, jx, cy, jy, tps)?;

        // Supervised heatmap loss on source and driving predictions.
        let key = if s > 0 {
            let gt_src: Vec<Vec<[f64; 2]>> = pairs
                .iter()
                .map(|p| {
                    p.source_landmarks.clone().ok_or_else(|| {
                        Error::Data("keypoint supervision enabled but pair lacks landmarks".into())
                    })
                })
                .collect::<Result<_>>()?;
            let gt_drv: Vec<Vec<[f64; 2]>> = pairs
                .iter()
                .map(|p| p.driving_landmarks.clone().unwrap())
                .collect();
            let hr = cfg.model.heatmap_resolution;
            let t_src = losses::supervision_targets(&gt_src, hr, cfg.model.gt_sigma)?;
            let t_drv = losses::supervision_targets(&gt_drv, hr, cfg.model.gt_sigma)?;
            let pred_src = slice_bank(&mut g, det_src.heatmaps, k, k + s);
            let pred_drv = slice_bank(&mut g, det_drv.heatmaps, k, k + s);
            let ts = g.constant(t_src);
            let td = g.constant(t_drv);
            let l1 = keypoint_supervision_loss(&mut g, pred_src, ts);
            let l2 = keypoint_supervision_loss(&mut g, pred_drv, td);
            let sum = g.add(l1, l2);
            g.mul_scalar(sum, 0.5)
        } else {
            g.constant(ArrayD::zeros(IxDyn(&[])))
        };

        // Motion driving -> source and generation.
        let bank = self.models.motion_bank_end(&cfg);
        let msc = slice_bank(&mut g, det_src.coords, 0, bank);
        let msj = slice_bank(&mut g, det_src.jacobians, 0, bank);
        let mdc = slice_bank(&mut g, det_drv.coords, 0, bank);
        let mdj = slice_bank(&mut g, det_drv.jacobians, 0, bank);
        let sparse = sparse_motion_vars(&mut g, msc, msj, mdc, mdj, cfg.model.heatmap_resolution)?;
        let motion = self
            .models
            .dense
            .forward(&mut g, &self.store, source, sparse, msc, mdc, None);
        let gen = self.models.generator.forward(
            &mut g,
            &self.store,
            source,
            motion.deformation,
            motion.occlusion,
        );

        let rec_l1 = reconstruction_l1(&mut g, driving, gen.content, &self.pyramid);
        let rec_perc = reconstruction_perceptual(
            &mut g,
            driving,
            gen.final_frame,
            &self.pyramid,
            self.extractor.as_ref(),
        );

        let w = cfg.loss_weights.clone();
        let adversarial_g = cfg.model.adversarial && (w.w_gan_g > 0.0 || w.w_feat > 0.0);
        let (gan_g, feat) = if adversarial_g {
            let disc = self.models.discriminator.as_ref().unwrap();
            g.set_frozen(true);
            let real = disc.forward(&mut g, &self.store, driving);
            let fake = disc.forward(&mut g, &self.store, gen.final_frame);
            g.set_frozen(false);
            let gan_g = lsgan_generator_loss(&mut g, fake.patch_map);
            let feat = feature_matching(&mut g, &real.features, &fake.features);
            (gan_g, feat)
        } else {
            let z1 = g.constant(ArrayD::zeros(IxDyn(&[])));
            let z2 = g.constant(ArrayD::zeros(IxDyn(&[])));
            (z1, z2)
        };

        // Weighted generator-side total.
        let mut total_g = {
            let eq = g.add(eq1, eq2);
            g.mul_scalar(eq, w.w_eq)
        };
        for (weight, term) in [
            (w.w_key, key),
            (w.w_rec_l1, rec_l1),
            (w.w_rec_perc, rec_perc),
            (w.w_gan_g, gan_g),
            (w.w_feat, feat),
        ] {
            if weight != 0.0 || g.needs_grad(term) {
                let scaled = g.mul_scalar(term, weight);
                total_g = g.add(total_g, scaled);
            }
        }
        g.backward(total_g);
        let grads = g.param_grads();
        self.opt_g.step(&mut self.store, &grads);

        // Discriminator pass on real driving and the detached prediction.
        let adversarial_d = cfg.model.adversarial && w.w_gan_d > 0.0;
        let gan_d_val = if adversarial_d {
            let disc = self.models.discriminator.as_ref().unwrap();
            let final_detached = g.value(gen.final_frame).clone();
            let driving_arr2 = g.value(driving).clone();
            let mut g2 = Graph::new();
            let real_in = g2.constant(driving_arr2);
            let fake_in = g2.constant(final_detached);
            let real = disc.forward(&mut g2, &self.store, real_in);
            let fake = disc.forward(&mut g2, &self.store, fake_in);
            let gan_d = lsgan_discriminator_loss(&mut g2, real.patch_map, fake.patch_map);
            let total_d = g2.mul_scalar(gan_d, w.w_gan_d);
            g2.backward(total_d);
            let grads_d = g2.param_grads();
            self.opt_d.step(&mut self.store, &grads_d);
            g2.scalar(gan_d)
        } else {
            0.0
        };

        let terms = LossTerms {
            eq1: g.scalar(eq1),
            eq2: g.scalar(eq2),
            key: g.scalar(key),
            rec_l1: g.scalar(rec_l1),
            rec_perc: g.scalar(rec_perc),
            gan_g: g.scalar(gan_g),
            gan_d: gan_d_val,
            feat: g.scalar(feat),
        };
        let report = losses::total(&terms, &w)?;
        self.step += 1;
        Ok(report)
    }

    /// Train for the configured number of epochs; resumable, deterministic,
    /// one JSONL loss report per step.
    pub fn fit(&mut self, clips: &[VideoClip], out_dir: &Path) -> Result<FitOutput> {
        if clips.is_empty() {
            return Err(Error::Data("fit: dataset is empty".into()));
        }
        for c in clips {
            c.validate()?;
            if c.num_frames() < 2 {
                return Err(Error::Data(format!(
                    "clip `{}` has fewer than 2 frames",
                    c.id
                )));
            }
        }
        let clips: Vec<VideoClip> = clips
            .iter()
            .map(|c| c.resized(self.cfg.data.resolution))
            .collect();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let final_path = out_dir.join("checkpoint_final.emck");
        let epochs = self.cfg.training.epochs as u64;
        let batch = self.cfg.training.batch_size;
        let repeats = self.cfg.training.repeats_per_epoch;
        let mut steps_run = 0u64;
        while self.epoch < epochs {
            let mut order: Vec<usize> = (0..clips.len())
                .flat_map(|c| std::iter::repeat_n(c, repeats))
                .collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(batch) {
                let pairs: Vec<FramePair> = chunk
                    .iter()
                    .map(|&ci| sample_pair(&clips[ci], &mut self.rng))
                    .collect::<Result<_>>()?;
                let report = match self.train_step(&pairs) {
                    Ok(r) => r,
                    Err(e) => {
                        self.dump_diagnostic(out_dir, &e);
                        return Err(e);
                    }
                };
                let line = LogLine {
                    epoch: self.epoch,
                    step: self.step,
                    report,
                };
                serde_json::to_writer(&mut log, &line)
                    .map_err(|e| Error::Data(format!("log write: {e}")))?;
                log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
                steps_run += 1;
            }
            self.epoch += 1;
            if self.cfg.training.checkpoint_interval > 0
                && self.epoch % self.cfg.training.checkpoint_interval as u64 == 0
            {
                let path = out_dir.join(format!("checkpoint_epoch_{:04}.emck", self.epoch));
                self.save_checkpoint(&path)?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        self.save_checkpoint(&final_path)?;
        Ok(FitOutput {
            checkpoint_path: final_path,
            log_path,
            steps_run,
        })
    }

    fn dump_diagnostic(&self, out_dir: &Path, err: &Error) {
        #[derive(Serialize)]
        struct Diagnostic<'a> {
            error: String,
            epoch: u64,
            step: u64,
            config: &'a Config,
        }
        let d = Diagnostic {
            error: err.to_string(),
            epoch: self.epoch,
            step: self.step,
            config: &self.cfg,
        };
        if let Ok(raw) = serde_json::to_vec_pretty(&d) {
            let _ = std::fs::write(out_dir.join("diagnostic.json"), raw);
        }
    }

    /// Expected step count for a dataset of `n` clips under this config.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        let total = n * self.cfg.training.repeats_per_epoch;
        total.div_ceil(self.cfg.training.batch_size) as u64
    }
}

/// Models plus weights restored from a checkpoint (inference entry point).
pub struct LoadedModels {
    pub cfg: Config,
    pub store: ParamStore,
    pub models: Models,
}

pub fn load_models(path: &Path) -> Result<LoadedModels> {
    let loaded = checkpoint::load(path)?;
    let cfg = loaded.header.config.clone();
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let models = Models::build(&mut store, &cfg, &mut init_rng);
    checkpoint::apply_to_store(&loaded, &mut store)?;
    Ok(LoadedModels { cfg, store, models })
}

/// Detached-seed RNG for callers that need auxiliary draws (e.g. data
/// generation) without disturbing the training stream.
pub fn aux_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let _ = rng.next_u64();
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{generate_clips, SynthParams};
    use tempfile::tempdir;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::desk();
        // Very small nets keep these unit tests fast; the full desk profile
        // is exercised by the acceptance suite.
        cfg.model.base_width = 8;
        cfg.model.max_width = 24;
        cfg.model.discriminator_base_width = 8;
        cfg.model.discriminator_max_width = 24;
        cfg.model.self_supervised_keypoints = 4;
        cfg.training.batch_size = 2;
        cfg.training.repeats_per_epoch = 1;
        cfg.training.epochs = 1;
        cfg.seed = 11;
        cfg
    }

    fn tiny_clips(n: usize) -> Vec<VideoClip> {
        let params = SynthParams {
            n_clips: n,
            frames_per_clip: 8,
            resolution: 64,
            ..SynthParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        generate_clips(&params, &mut rng)
            .unwrap()
            .into_iter()
            .map(|r| r.clip)
            .collect()
    }

    #[test]
    fn identical_state_gives_identical_reports() {
        let clips = tiny_clips(2);
        let run = || -> LossReport {
            let mut t = Trainer::new(tiny_cfg()).unwrap();
            let pairs: Vec<FramePair> = (0..2)
                .map(|i| sample_pair(&clips[i], t.rng()).unwrap())
                .collect();
            t.train_step(&pairs).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bitwise-identical loss reports expected");
        assert!(a.total_g.is_finite());
    }

    #[test]
    fn zero_gan_weights_leave_discriminator_untouched() {
        let clips = tiny_clips(2);
        let mut cfg = tiny_cfg();
        cfg.loss_weights.w_gan_g = 0.0;
        cfg.loss_weights.w_gan_d = 0.0;
        cfg.loss_weights.w_feat = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before: Vec<ArrayD<f64>> = t
            .store
            .iter()
            .filter(|s| s.name.starts_with("discriminator"))
            .map(|s| s.value.clone())
            .collect();
        assert!(!before.is_empty());
        let pairs: Vec<FramePair> = (0..2)
            .map(|i| sample_pair(&clips[i], t.rng()).unwrap())
            .collect();
        t.train_step(&pairs).unwrap();
        let after: Vec<ArrayD<f64>> = t
            .store
            .iter()
            .filter(|s| s.name.starts_with("discriminator"))
            .map(|s| s.value.clone())
            .collect();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b, a, "discriminator changed despite zero GAN weights");
        }
    }

    #[test]
    fn generator_side_updates_do_not_touch_discriminator_and_vice_versa() {
        let clips = tiny_clips(2);
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let snapshot = |t: &Trainer, prefix: &str| -> Vec<ArrayD<f64>> {
            t.store
                .iter()
                .filter(|s| s.name.starts_with(prefix))
                .map(|s| s.value.clone())
                .collect()
        };
        let gen_before = snapshot(&t, "generator");
        let disc_before = snapshot(&t, "discriminator");
        let pairs: Vec<FramePair> = (0..2)
            .map(|i| sample_pair(&clips[i], t.rng()).unwrap())
            .collect();
        t.train_step(&pairs).unwrap();
        // Both sides moved (their own optimizers ran)...
        assert_ne!(gen_before, snapshot(&t, "generator"));
        assert_ne!(disc_before, snapshot(&t, "discriminator"));
    }

    #[test]
    fn fit_epoch_zero_writes_init_checkpoint_and_empty_log() {
        let clips = tiny_clips(1);
        let mut cfg = tiny_cfg();
        cfg.training.epochs = 0;
        let dir = tempdir().unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let out = t.fit(&clips, dir.path()).unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(out.checkpoint_path.exists());
        let log = std::fs::read_to_string(&out.log_path).unwrap();
        assert!(log.is_empty());
        let header = checkpoint::load_header(&out.checkpoint_path).unwrap();
        assert_eq!(header.state.epoch, 0);
    }

    #[test]
    fn fit_log_line_count_equals_total_steps() {
        let clips = tiny_clips(3);
        let mut cfg = tiny_cfg();
        cfg.training.epochs = 2;
        cfg.training.batch_size = 2;
        cfg.training.repeats_per_epoch = 1;
        let dir = tempdir().unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let expected = t.steps_per_epoch(clips.len()) * 2;
        let out = t.fit(&clips, dir.path()).unwrap();
        assert_eq!(out.steps_run, expected);
        let log = std::fs::read_to_string(&out.log_path).unwrap();
        assert_eq!(log.lines().count() as u64, expected);
        // Every line parses back into a loss report.
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("total_g").is_some());
        }
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let clips = tiny_clips(2);
        let mut cfg = tiny_cfg();
        cfg.training.epochs = 4;
        cfg.training.checkpoint_interval = 2;
        // Uninterrupted run.
        let dir_a = tempdir().unwrap();
        let mut ta = Trainer::new(cfg.clone()).unwrap();
        ta.fit(&clips, dir_a.path()).unwrap();
        // Interrupted at epoch 2, then resumed.
        let dir_b = tempdir().unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.training.epochs = 2;
        let mut tb = Trainer::new(cfg_b).unwrap();
        tb.fit(&clips, dir_b.path()).unwrap();
        let mid = dir_b.path().join("checkpoint_epoch_0002.emck");
        assert!(mid.exists());
        let mut tc = Trainer::resume(&mid).unwrap();
        tc.cfg.training.epochs = 4;
        let dir_c = tempdir().unwrap();
        tc.fit(&clips, dir_c.path()).unwrap();
        // Final weights agree bit-for-bit.
        assert_eq!(ta.store.len(), tc.store.len());
        for idx in 0..ta.store.len() {
            let sa = ta.store.slot(idx);
            let sc = tc.store.slot(idx);
            assert_eq!(sa.name, sc.name);
            assert_eq!(sa.value, sc.value, "weights diverged at {}", sa.name);
        }
    }
}
