//! Run configuration: two built-in profiles (`paper` and `desk`) with a
//! TOML overlay. Unknown keys are hard errors; dump -> load -> dump is
//! byte-identical.

use crate::error::{Error, Result};
use crate::losses::{ExtractorKind, LossWeights};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Published configuration: 256x256, batch 20, 50 epochs, full widths.
    Paper,
    /// Workstation-scale configuration used by tests: 64x64, trimmed widths.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: String,
    pub resolution: usize,
    pub channels: usize,
    pub supervised_landmarks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub self_supervised_keypoints: usize,
    pub heatmap_resolution: usize,
    pub softmax_temperature: f64,
    pub gt_sigma: f64,
    pub num_unet_blocks: usize,
    pub num_generator_blocks: usize,
    pub num_bottleneck_blocks: usize,
    pub num_discriminator_layers: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub discriminator_base_width: usize,
    pub discriminator_max_width: usize,
    pub generator_first_kernel: usize,
    pub keypoint_supervision: bool,
    pub texture_decoder: bool,
    pub adversarial: bool,
    pub supervised_in_equivariance: bool,
    pub supervised_in_motion: bool,
    pub perceptual_extractor: ExtractorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub tps_strength: f64,
    pub repeats_per_epoch: usize,
    pub checkpoint_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub loss_weights: LossWeights,
}

impl Config {
    pub fn paper() -> Self {
        Config {
            schema_version: 1,
            profile: Profile::Paper,
            seed: 0,
            data: DataConfig {
                root: "data".into(),
                resolution: 256,
                channels: 3,
                supervised_landmarks: 2,
            },
            model: ModelConfig {
                self_supervised_keypoints: 10,
                heatmap_resolution: 64,
                softmax_temperature: 0.1,
                gt_sigma: 0.05,
                num_unet_blocks: 5,
                num_generator_blocks: 5,
                num_bottleneck_blocks: 6,
                num_discriminator_layers: 4,
                base_width: 64,
                max_width: 512,
                discriminator_base_width: 64,
                discriminator_max_width: 512,
                generator_first_kernel: 7,
                keypoint_supervision: true,
                texture_decoder: true,
                adversarial: true,
                supervised_in_equivariance: false,
                supervised_in_motion: true,
                perceptual_extractor: ExtractorKind::Pretrained,
            },
            training: TrainingConfig {
                epochs: 50,
                batch_size: 20,
                learning_rate: 0.0002,
                adam_beta1: 0.5,
                adam_beta2: 0.999,
                tps_strength: 0.05,
                repeats_per_epoch: 1,
                checkpoint_interval: 10,
            },
            loss_weights: LossWeights::default(),
        }
    }

    /// Trimmed widths/depths so the desk profile trains in minutes on one
    /// CPU core; objectives, keypoint counts and optimizer settings match
    /// the paper profile.
    pub fn desk() -> Self {
        let mut cfg = Config::paper();
        cfg.profile = Profile::Desk;
        cfg.data.resolution = 64;
        cfg.data.channels = 1;
        cfg.data.root = "data/synth".into();
        cfg.model.heatmap_resolution = 16;
        cfg.model.num_unet_blocks = 3;
        cfg.model.num_generator_blocks = 3;
        cfg.model.num_bottleneck_blocks = 2;
        cfg.model.base_width = 16;
        cfg.model.max_width = 96;
        cfg.model.discriminator_base_width = 16;
        cfg.model.discriminator_max_width = 96;
        cfg.model.generator_first_kernel = 3;
        cfg.model.perceptual_extractor = ExtractorKind::Fallback;
        cfg.training.epochs = 10;
        cfg.training.batch_size = 8;
        cfg.training.repeats_per_epoch = 25;
        cfg.training.checkpoint_interval = 5;
        cfg
    }

    pub fn profile_defaults(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Config::paper(),
            Profile::Desk => Config::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let d = &self.data;
        if d.resolution < 32 {
            return Err(Error::Config(format!(
                "resolution must be >= 32, got {}",
                d.resolution
            )));
        }
        if d.channels != 1 && d.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if m.heatmap_resolution == 0 || d.resolution % m.heatmap_resolution != 0 {
            return Err(Error::Config(format!(
                "heatmap_resolution {} must divide resolution {}",
                m.heatmap_resolution, d.resolution
            )));
        }
        if m.heatmap_resolution >> m.num_unet_blocks == 0 {
            return Err(Error::Config(format!(
                "{} U-Net blocks are too deep for heatmap resolution {}",
                m.num_unet_blocks, m.heatmap_resolution
            )));
        }
        if d.resolution >> m.num_generator_blocks == 0 {
            return Err(Error::Config("generator too deep for the resolution".into()));
        }
        if m.num_discriminator_layers != 4 {
            return Err(Error::Config(
                "the discriminator uses exactly four convolution layers".into(),
            ));
        }
        if d.resolution % 8 != 0 {
            return Err(Error::Config(
                "resolution must be divisible by 8 for the loss pyramid".into(),
            ));
        }
        if m.softmax_temperature <= 0.0 || m.gt_sigma <= 0.0 {
            return Err(Error::Config(
                "softmax_temperature and gt_sigma must be positive".into(),
            ));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.training.repeats_per_epoch == 0 {
            return Err(Error::Config("repeats_per_epoch must be positive".into()));
        }
        if m.keypoint_supervision && d.supervised_landmarks == 0 {
            return Err(Error::Config(
                "keypoint_supervision requires supervised_landmarks > 0".into(),
            ));
        }
        self.loss_weights.validate()?;
        Ok(())
    }

    /// Supervised keypoint bank size actually instantiated in the detector.
    pub fn effective_supervised(&self) -> usize {
        if self.model.keypoint_supervision {
            self.data.supervised_landmarks
        } else {
            0
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }
}

/// TOML overlay: every field optional; unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub schema_version: Option<u32>,
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: PartialData,
    #[serde(default)]
    pub model: PartialModel,
    #[serde(default)]
    pub training: PartialTraining,
    #[serde(default)]
    pub loss_weights: PartialWeights,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialData {
    pub root: Option<String>,
    pub resolution: Option<usize>,
    pub channels: Option<usize>,
    pub supervised_landmarks: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialModel {
    pub self_supervised_keypoints: Option<usize>,
    pub heatmap_resolution: Option<usize>,
    pub softmax_temperature: Option<f64>,
    pub gt_sigma: Option<f64>,
    pub num_unet_blocks: Option<usize>,
    pub num_generator_blocks: Option<usize>,
    pub num_bottleneck_blocks: Option<usize>,
    pub num_discriminator_layers: Option<usize>,
    pub base_width: Option<usize>,
    pub max_width: Option<usize>,
    pub discriminator_base_width: Option<usize>,
    pub discriminator_max_width: Option<usize>,
    pub generator_first_kernel: Option<usize>,
    pub keypoint_supervision: Option<bool>,
    pub texture_decoder: Option<bool>,
    pub adversarial: Option<bool>,
    pub supervised_in_equivariance: Option<bool>,
    pub supervised_in_motion: Option<bool>,
    pub perceptual_extractor: Option<ExtractorKind>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialTraining {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub tps_strength: Option<f64>,
    pub repeats_per_epoch: Option<usize>,
    pub checkpoint_interval: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialWeights {
    pub w_eq: Option<f64>,
    pub w_key: Option<f64>,
    pub w_rec_l1: Option<f64>,
    pub w_rec_perc: Option<f64>,
    pub w_gan_g: Option<f64>,
    pub w_gan_d: Option<f64>,
    pub w_feat: Option<f64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, [$($field:ident),* $(,)?]) => {
        $(if let Some(v) = $src.$field { $dst.$field = v; })*
    };
}

impl PartialConfig {
    pub fn apply(self, cfg: &mut Config) {
        overlay!(cfg, self, [schema_version, profile, seed]);
        overlay!(cfg.data, self.data, [root, resolution, channels, supervised_landmarks]);
        overlay!(
            cfg.model,
            self.model,
            [
                self_supervised_keypoints,
                heatmap_resolution,
                softmax_temperature,
                gt_sigma,
                num_unet_blocks,
                num_generator_blocks,
                num_bottleneck_blocks,
                num_discriminator_layers,
                base_width,
                max_width,
                discriminator_base_width,
                discriminator_max_width,
                generator_first_kernel,
                keypoint_supervision,
                texture_decoder,
                adversarial,
                supervised_in_equivariance,
                supervised_in_motion,
                perceptual_extractor,
            ]
        );
        overlay!(
            cfg.training,
            self.training,
            [
                epochs,
                batch_size,
                learning_rate,
                adam_beta1,
                adam_beta2,
                tps_strength,
                repeats_per_epoch,
                checkpoint_interval,
            ]
        );
        overlay!(
            cfg.loss_weights,
            self.loss_weights,
            [w_eq, w_key, w_rec_l1, w_rec_perc, w_gan_g, w_gan_d, w_feat]
        );
    }
}

/// Parse a config file: profile defaults overlaid with the file's keys.
pub fn load_config_str(raw: &str) -> Result<Config> {
    let partial: PartialConfig =
        toml::from_str(raw).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    let profile = partial.profile.unwrap_or(Profile::Desk);
    let mut cfg = Config::profile_defaults(profile);
    partial.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &std::path::Path) -> Result<Config> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_config_str(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_matches_published_hyperparameters() {
        let c = Config::paper();
        assert_eq!(c.training.epochs, 50);
        assert_eq!(c.training.batch_size, 20);
        assert_eq!(c.training.learning_rate, 0.0002);
        assert_eq!(c.model.self_supervised_keypoints, 10);
        assert_eq!(c.data.resolution, 256);
        assert_eq!(c.model.num_unet_blocks, 5);
        assert_eq!(c.model.num_bottleneck_blocks, 6);
        assert_eq!(c.model.num_discriminator_layers, 4);
        let w = &c.loss_weights;
        assert_eq!(
            [w.w_eq, w.w_key, w.w_rec_l1, w.w_rec_perc, w.w_gan_g, w.w_gan_d, w.w_feat],
            [10.0, 100.0, 10.0, 10.0, 1.0, 1.0, 10.0]
        );
        c.validate().unwrap();
        Config::desk().validate().unwrap();
    }

    #[test]
    fn dump_load_dump_is_byte_identical() {
        let c = Config::paper();
        let dump1 = c.to_toml().unwrap();
        let reloaded = load_config_str(&dump1).unwrap();
        let dump2 = reloaded.to_toml().unwrap();
        assert_eq!(dump1, dump2);
        assert_eq!(c, reloaded);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = load_config_str("profile = \"desk\"\nbogus_key = 1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err =
            load_config_str("profile = \"desk\"\n[training]\nbatchsize = 8\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn overlay_applies_over_profile_defaults() {
        let cfg = load_config_str(
            "profile = \"desk\"\nseed = 9\n[training]\nepochs = 3\n[loss_weights]\nw_key = 50.0\n",
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loss_weights.w_key, 50.0);
        assert_eq!(cfg.training.batch_size, 8); // desk default retained
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = Config::desk();
        c.model.heatmap_resolution = 13;
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.model.num_discriminator_layers = 5;
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.data.channels = 2;
        assert!(c.validate().is_err());
    }
}
