use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::TrainConfig;
use crate::diffusion::{Conditioning, DiffusionConfig};
use crate::error::{Error, Result};
use crate::latent::AutoencoderConfig;
use crate::seg::SegTrainConfig;

use super::MixingPlan;

/// Everything a pipeline run needs. Serialized as TOML; every table is flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory with `images/` and `masks/`.
    pub data_root: PathBuf,
    /// Optional separate test directory; otherwise `test_count` pairs are split off `data_root`.
    pub test_root: Option<PathBuf>,
    pub test_count: usize,
    pub resolution: usize,
    pub mask_threshold: f32,
    pub output_root: PathBuf,
    pub run_id: String,
    pub seed: u64,
    pub latent_mode: bool,
    /// Synthetic masks (and images) to produce.
    pub generate_count: usize,
    /// Samples drawn per checkpoint when scoring generators.
    pub eval_samples: usize,
    pub parallel_sweep: bool,
    pub mask_diffusion: DiffusionConfig,
    pub image_diffusion: DiffusionConfig,
    pub mask_train: TrainConfig,
    pub image_train: TrainConfig,
    pub autoencoder: AutoencoderConfig,
    pub segmentation: SegTrainConfig,
    pub mixing: MixingPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data/train"),
            test_root: None,
            test_count: 300,
            resolution: 64,
            mask_threshold: 0.5,
            output_root: PathBuf::from("runs"),
            run_id: "default".into(),
            seed: 0,
            latent_mode: false,
            generate_count: 1000,
            eval_samples: 100,
            parallel_sweep: false,
            mask_diffusion: DiffusionConfig::default(),
            image_diffusion: DiffusionConfig {
                conditioning: Conditioning::MaskConcat,
                ..DiffusionConfig::default()
            },
            mask_train: TrainConfig::default(),
            image_train: TrainConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            segmentation: SegTrainConfig::default(),
            mixing: MixingPlan::standard(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::Malformed {
                path: path.to_path_buf(),
                reason: msg,
            },
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_id)
    }

    /// Checks values only; see [`Self::check_paths`] for the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("bad run id `{}`", self.run_id)));
        }
        if self.eval_samples < 2 {
            return Err(Error::InvalidConfig("eval_samples must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::InvalidConfig("mask_threshold must lie in [0, 1]".into()));
        }
        if self.mask_diffusion.conditioning != Conditioning::None {
            return Err(Error::InvalidConfig("mask model must be unconditional".into()));
        }
        if self.image_diffusion.conditioning != Conditioning::MaskConcat {
            return Err(Error::InvalidConfig("image model must use mask_concat conditioning".into()));
        }
        self.mask_diffusion.validate()?;
        self.image_diffusion.validate()?;
        self.mask_train.validate()?;
        self.image_train.validate()?;
        self.segmentation.validate()?;
        self.mixing.validate()
    }

    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![&self.data_root];
        paths.extend(self.test_root.as_ref());
        for p in paths {
            if !p.is_dir() {
                return Err(Error::UnreadableFile {
                    path: p.clone(),
                    reason: "directory does not exist".into(),
                });
            }
        }
        Ok(())
    }
}
