//! U-Net noise predictor, its training loop and checkpoint files.

mod net;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use net::{embedding_batch, init_denoiser, timestep_embedding, DenoiserArch, DenoiserModel, UNet};
pub use train::{
    save_all, train_denoiser, train_on, write_curve_csv, CurvePoint, LrDecay, ModelKind, Optimizer, TrainConfig, TrainOutcome,
    TrainingSet,
};

use crate::checkpoint::{self, DENOISER_MAGIC};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};

/// Identifies the autoencoder whose latent space a model was trained in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentRef {
    pub autoencoder_digest: String,
    pub factor: usize,
}

#[derive(Clone, Debug)]
pub struct DenoiserCheckpoint {
    pub kind: ModelKind,
    pub model: DenoiserModel,
    pub diffusion: DiffusionConfig,
    pub step: u64,
    pub seed: u64,
    pub latent: Option<LatentRef>,
    /// Height and width of the diffused tensor (latent size in latent mode).
    pub sample_hw: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    arch: DenoiserArch,
    diffusion: DiffusionConfig,
    diffusion_digest: String,
    step: u64,
    seed: u64,
    latent: Option<LatentRef>,
    sample_hw: [usize; 2],
}

impl DenoiserCheckpoint {
    /// Stable name used for files and report rows.
    pub fn id(&self) -> String {
        format!("step-{:07}", self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind,
            arch: *self.model.arch(),
            diffusion: self.diffusion.clone(),
            diffusion_digest: self.diffusion.fingerprint(),
            step: self.step,
            seed: self.seed,
            latent: self.latent.clone(),
            sample_hw: self.sample_hw,
        };
        checkpoint::encode(DENOISER_MAGIC, &header, self.model.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let d = checkpoint::decode::<Header>(DENOISER_MAGIC, bytes)?;
        let h = d.header;
        if h.diffusion.fingerprint() != h.diffusion_digest {
            return Err(Error::CorruptCheckpoint("diffusion config digest mismatch".into()));
        }
        let mut model = init_denoiser(h.arch, 0).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        checkpoint::assign_params(model.params_mut(), &d.params)?;
        Ok(Self {
            kind: h.kind,
            model,
            diffusion: h.diffusion,
            step: h.step,
            seed: h.seed,
            latent: h.latent,
            sample_hw: h.sample_hw,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        checkpoint::trailer_digest(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }

    pub fn require_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongModelKind {
                expected: format!("{kind:?}"),
                found: format!("{:?}", self.kind),
            });
        }
        Ok(())
    }

    /// `[n, C, H, W]` shape for drawing `n` samples.
    pub fn sample_shape(&self, n: usize) -> [usize; 4] {
        [n, self.model.arch().in_channels, self.sample_hw[0], self.sample_hw[1]]
    }
}

pub fn save_checkpoint(ckpt: &DenoiserCheckpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserCheckpoint> {
    DenoiserCheckpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample_loop, Denoiser};
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ckpt() -> DenoiserCheckpoint {
        let arch = DenoiserArch {
            base_channels: 4,
            depth: 2,
            in_channels: 1,
            cond_channels: 0,
            embed_dim: 8,
        };
        let mut model = init_denoiser(arch, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f32> = (0..model.params().numel()).map(|_| rng.gen_range(-0.2..0.2)).collect();
        model.params_mut().assign_flat(&v);
        DenoiserCheckpoint {
            kind: ModelKind::MaskModel,
            model,
            diffusion: DiffusionConfig {
                timesteps: 20,
                ..Default::default()
            },
            step: 42,
            seed: 3,
            latent: None,
            sample_hw: [8, 8],
        }
    }

    #[test]
    fn save_load_roundtrip_samples_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let a = ckpt();
        save_checkpoint(&a, &path).unwrap();
        let b = load_checkpoint(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b.to_bytes());
        assert_eq!(b.step, 42);
        assert_eq!(b.model.arch(), a.model.arch());

        let sched = make_schedule(&a.diffusion).unwrap();
        let draw = |m: &DenoiserModel| {
            let mut rngs = vec![ChaCha8Rng::seed_from_u64(9), ChaCha8Rng::seed_from_u64(10)];
            sample_loop(m, &[2, 1, 8, 8], None, &sched, &mut rngs).unwrap()
        };
        assert_eq!(draw(&a.model), draw(&b.model));
        let x = Tensor::full(&[1, 1, 8, 8], 0.3f32);
        assert_eq!(
            a.model.predict_noise(&x, &[7], None).unwrap(),
            b.model.predict_noise(&x, &[7], None).unwrap()
        );
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let bytes = ckpt().to_bytes();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn kind_check() {
        let c = ckpt();
        assert!(c.require_kind(ModelKind::MaskModel).is_ok());
        assert!(matches!(c.require_kind(ModelKind::ImageModel), Err(Error::WrongModelKind { .. })));
    }
}
