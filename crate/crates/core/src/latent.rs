//! Convolutional autoencoder for running diffusion on a downsampled latent grid.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AUTOENCODER_MAGIC};
use crate::data::{images_to_tensor, BinaryMask, ImageTensor, PairedDataset};
use crate::denoiser::{CurvePoint, LatentRef, TrainingSet};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Conv2d, Graph, ParamSet, Tensor, Var};

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderArch {
    pub in_channels: usize,
    /// Spatial downsampling factor, a power of two.
    pub factor: usize,
    pub latent_channels: usize,
    pub width: usize,
}

impl AutoencoderArch {
    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::InvalidArch(format!("factor must be a power of two >= 2, got {}", self.factor)));
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.width == 0 {
            return Err(Error::InvalidArch("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub factor: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            width: 16,
            learning_rate: 1e-3,
            batch_size: 8,
            total_steps: 2000,
            seed: 0,
        }
    }
}

/// Latent grid `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Layers {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    arch: AutoencoderArch,
    layers: Layers,
    params: ParamSet<f32>,
}

pub fn init_autoencoder(arch: AutoencoderArch, seed: u64) -> Result<Autoencoder> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let w = arch.width;
    let mut enc = vec![Conv2d::new(&mut ps, "enc.stem", arch.in_channels, w, 3, &mut rng)];
    for l in 0..arch.levels() {
        enc.push(Conv2d::with(&mut ps, &format!("enc.down{l}"), w, w, 3, 2, 1, 1, &mut rng));
        enc.push(Conv2d::new(&mut ps, &format!("enc.conv{l}"), w, w, 3, &mut rng));
    }
    enc.push(Conv2d::new(&mut ps, "enc.out", w, arch.latent_channels, 3, &mut rng));
    let mut dec = vec![Conv2d::new(&mut ps, "dec.stem", arch.latent_channels, w, 3, &mut rng)];
    for l in 0..arch.levels() {
        dec.push(Conv2d::new(&mut ps, &format!("dec.up{l}"), w, w, 3, &mut rng));
        dec.push(Conv2d::new(&mut ps, &format!("dec.conv{l}"), w, w, 3, &mut rng));
    }
    dec.push(Conv2d::new(&mut ps, "dec.out", w, arch.in_channels, 3, &mut rng));
    Ok(Autoencoder {
        arch,
        layers: Layers { enc, dec },
        params: ps,
    })
}

impl Autoencoder {
    pub fn arch(&self) -> &AutoencoderArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Latents pass through `tanh`, keeping them in the sampler's [-1, 1] range.
    fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let enc = &self.layers.enc;
        let mut h = x;
        for (i, conv) in enc.iter().enumerate() {
            h = conv.forward(g, &self.params, h);
            if i + 1 < enc.len() {
                h = g.silu(h);
            }
        }
        g.tanh(h)
    }

    fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Var {
        let dec = &self.layers.dec;
        let mut h = dec[0].forward(g, &self.params, z);
        h = g.silu(h);
        for pair in dec[1..dec.len() - 1].chunks(2) {
            h = g.upsample_nearest(h, 2);
            for conv in pair {
                h = conv.forward(g, &self.params, h);
                h = g.silu(h);
            }
        }
        dec[dec.len() - 1].forward(g, &self.params, h)
    }

    fn check_image_shape(&self, s: &[usize]) -> Result<()> {
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::shape([0, self.arch.in_channels, 0, 0], s));
        }
        for &d in &s[2..] {
            if d == 0 || d % self.arch.factor != 0 {
                return Err(Error::IndivisibleSize {
                    size: d,
                    factor: self.arch.factor,
                });
            }
        }
        Ok(())
    }

    fn run_chunked(&self, x: &Tensor<f32>, f: impl Fn(&mut Graph<f32>, Var) -> Var) -> Tensor<f32> {
        let n = x.shape()[0];
        let item = &x.shape()[1..];
        let mut outs = Vec::new();
        let mut out_shape = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let items: Vec<&[f32]> = (start..end).map(|i| x.batch_item(i)).collect();
            let mut g = Graph::inference();
            let xv = g.constant(Tensor::stack(&items, item));
            let y = f(&mut g, xv);
            let y = g.take_value(y);
            out_shape = y.shape()[1..].to_vec();
            outs.extend(y.into_data());
        }
        let mut shape = vec![n];
        shape.extend(out_shape);
        Tensor::from_vec(&shape, outs)
    }

    /// `[B, C, H, W]` images to `[B, latent, H/f, W/f]` codes.
    pub fn encode_tensor(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image_shape(x.shape())?;
        Ok(self.run_chunked(x, |g, v| self.encode_graph(g, v)))
    }

    /// Decodes and clamps to [-1, 1].
    pub fn decode_tensor(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.arch.latent_channels {
            return Err(Error::shape([0, self.arch.latent_channels, 0, 0], s));
        }
        let y = self.run_chunked(z, |g, v| self.decode_graph(g, v));
        Ok(y.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        let z = self.encode_tensor(&images_to_tensor(&[image]))?;
        let (_, c, h, w) = z.dims4();
        Ok(LatentTensor {
            channels: c,
            height: h,
            width: w,
            data: z.into_data(),
        })
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let t = Tensor::from_vec(&[1, z.channels, z.height, z.width], z.data.clone());
        let y = self.decode_tensor(&t)?;
        let (_, c, h, w) = y.dims4();
        ImageTensor::new(c, h, w, y.into_data())
    }

    /// Reconstruction PSNR in dB for data in [-1, 1] (peak-to-peak 2).
    pub fn psnr(&self, images: &Tensor<f32>) -> Result<f64> {
        let rec = self.decode_tensor(&self.encode_tensor(images)?)?;
        Ok(psnr(images, &rec))
    }
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    10.0 * (4.0 / mse.max(1e-20)).log10()
}

/// Area-averages a mask to `(H/f, W/f)` and rescales from [0, 1] to [-1, 1].
pub fn downsample_condition(mask: &BinaryMask, f: usize) -> Result<Tensor<f32>> {
    let (h, w) = (mask.height(), mask.width());
    for s in [h, w] {
        if f == 0 || s % f != 0 {
            return Err(Error::IndivisibleSize { size: s, factor: f });
        }
    }
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0f32; ho * wo];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * wo + x / f] += mask.data()[y * w + x] as f32;
        }
    }
    let area = (f * f) as f32;
    for v in &mut out {
        *v = 2.0 * (*v / area) - 1.0;
    }
    Ok(Tensor::from_vec(&[1, ho, wo], out))
}

/// Encoded images with pooled masks as conditions.
pub fn latent_training_set(ds: &PairedDataset, ae: &Autoencoder) -> Result<TrainingSet> {
    ds.require_non_empty()?;
    let z = ae.encode_tensor(&images_to_tensor(&ds.images()))?;
    let conds = ds
        .masks()
        .iter()
        .map(|m| downsample_condition(m, ae.arch.factor))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<&[f32]> = conds.iter().map(|c| c.data()).collect();
    let cond = Tensor::stack(&items, conds[0].shape());
    TrainingSet::new(z, Some(cond))
}

#[derive(Clone, Debug)]
pub struct AutoencoderCheckpoint {
    pub model: Autoencoder,
    pub step: u64,
    pub seed: u64,
    pub train_psnr_db: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: AutoencoderArch,
    step: u64,
    seed: u64,
    train_psnr_db: f64,
}

impl AutoencoderCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = Header {
            arch: self.model.arch,
            step: self.step,
            seed: self.seed,
            train_psnr_db: self.train_psnr_db,
        };
        checkpoint::encode(AUTOENCODER_MAGIC, &h, &self.model.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let d = checkpoint::decode::<Header>(AUTOENCODER_MAGIC, bytes)?;
        let mut model = init_autoencoder(d.header.arch, 0).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        checkpoint::assign_params(&mut model.params, &d.params)?;
        Ok(Self {
            model,
            step: d.header.step,
            seed: d.header.seed,
            train_psnr_db: d.header.train_psnr_db,
        })
    }

    pub fn digest(&self) -> String {
        checkpoint::trailer_digest(&self.to_bytes())
    }

    pub fn latent_ref(&self) -> LatentRef {
        LatentRef {
            autoencoder_digest: self.digest(),
            factor: self.model.arch.factor,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct AutoencoderTraining {
    pub checkpoint: AutoencoderCheckpoint,
    pub curve: Vec<CurvePoint>,
}

pub fn train_autoencoder(ds: &PairedDataset, cfg: &AutoencoderConfig) -> Result<AutoencoderTraining> {
    ds.require_non_empty()?;
    if cfg.total_steps == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "autoencoder needs total_steps >= 1, batch_size >= 1 and a positive learning rate".into(),
        ));
    }
    let images = images_to_tensor(&ds.images());
    let arch = AutoencoderArch {
        in_channels: images.shape()[1],
        factor: cfg.factor,
        latent_channels: cfg.latent_channels,
        width: cfg.width,
    };
    let mut model = init_autoencoder(arch, cfg.seed)?;
    model.check_image_shape(images.shape())?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae_0001);
    let n = images.shape()[0];
    let mut curve = Vec::with_capacity(cfg.total_steps as usize);
    let mut ema = None;
    let mut last_finite = None;
    for step in 1..=cfg.total_steps {
        let items: Vec<&[f32]> = (0..cfg.batch_size).map(|_| images.batch_item(rng.gen_range(0..n))).collect();
        let batch = Tensor::stack(&items, &images.shape()[1..]);
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let z = model.encode_graph(&mut g, x);
        let y = model.decode_graph(&mut g, z);
        let lv = g.mse(y, &batch);
        let loss = g.value(lv).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite });
        }
        let grads = g.backward(lv);
        opt.step(&mut model.params, &grads);
        last_finite = Some(loss);
        let e = ema.map_or(loss, |p: f64| 0.99 * p + 0.01 * loss);
        ema = Some(e);
        curve.push(CurvePoint { step, loss, ema: e });
    }
    let train_psnr_db = model.psnr(&images)?;
    info!("autoencoder: {} steps, training PSNR {train_psnr_db:.2} dB", cfg.total_steps);
    Ok(AutoencoderTraining {
        checkpoint: AutoencoderCheckpoint {
            model,
            step: cfg.total_steps,
            seed: cfg.seed,
            train_psnr_db,
        },
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PairedSample, Provenance};
    use proptest::prelude::*;

    fn arch() -> AutoencoderArch {
        AutoencoderArch {
            in_channels: 3,
            factor: 4,
            latent_channels: 4,
            width: 8,
        }
    }

    #[test]
    fn shapes() {
        let ae = init_autoencoder(arch(), 1).unwrap();
        let img = ImageTensor::filled(3, 64, 64, 0.25);
        let z = ae.encode(&img).unwrap();
        assert_eq!((z.channels, z.height, z.width), (4, 16, 16));
        assert!(z.data.iter().all(|v| v.is_finite()));
        let rec = ae.decode(&z).unwrap();
        assert_eq!((rec.channels(), rec.height(), rec.width()), (3, 64, 64));
        assert!(rec.is_normalized());
        let bad = ImageTensor::filled(3, 30, 32, 0.0);
        assert!(matches!(ae.encode(&bad), Err(Error::IndivisibleSize { size: 30, factor: 4 })));
        let gray = ImageTensor::filled(1, 32, 32, 0.0);
        assert!(matches!(ae.encode(&gray), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn factor_must_be_power_of_two() {
        for f in [0, 1, 3, 6] {
            let a = AutoencoderArch { factor: f, ..arch() };
            assert!(init_autoencoder(a, 0).is_err(), "factor {f}");
        }
    }

    #[test]
    fn condition_pooling_examples() {
        let ones = BinaryMask::filled(8, 8, true);
        assert!(downsample_condition(&ones, 4).unwrap().data().iter().all(|&v| v == 1.0));
        let zeros = BinaryMask::filled(8, 8, false);
        assert!(downsample_condition(&zeros, 2).unwrap().data().iter().all(|&v| v == -1.0));
        let half = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let p = downsample_condition(&half, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1]);
        // 0.5 on the unit scale
        assert_eq!(p.data()[0], 0.0);
        assert!(matches!(downsample_condition(&half, 4), Err(Error::IndivisibleSize { .. })));
    }

    proptest! {
        #[test]
        fn pooling_preserves_mass(bits in proptest::collection::vec(0u8..2, 64), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let m = BinaryMask::new(8, 8, bits).unwrap();
            let p = downsample_condition(&m, f).unwrap();
            let pooled: f64 = p.data().iter().map(|&v| (v as f64 + 1.0) / 2.0).sum::<f64>() / p.numel() as f64;
            let raw = m.foreground() as f64 / 64.0;
            prop_assert!((pooled - raw).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    fn tiny_ds(n: usize) -> PairedDataset {
        let samples = (0..n)
            .map(|i| {
                let mut img = ImageTensor::filled(3, 16, 16, 0.0);
                for (k, v) in img.data_mut().iter_mut().enumerate() {
                    *v = (((k + 5 * i) % 16) as f32 / 8.0 - 1.0) * 0.6;
                }
                let mask = BinaryMask::from_fn(16, 16, |y, _| y < 4 + i);
                PairedSample::new(img, mask, format!("a{i}"), Provenance::Real).unwrap()
            })
            .collect();
        PairedDataset::new(samples, 16).unwrap()
    }

    #[test]
    fn training_is_seeded_and_reduces_error() {
        let ds = tiny_ds(4);
        let cfg = AutoencoderConfig {
            width: 8,
            total_steps: 60,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let a = train_autoencoder(&ds, &cfg).unwrap();
        let b = train_autoencoder(&ds, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert!(a.curve.last().unwrap().ema < a.curve[0].ema);

        let back = AutoencoderCheckpoint::from_bytes(&a.checkpoint.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), a.checkpoint.to_bytes());
        assert!(matches!(
            crate::denoiser::DenoiserCheckpoint::from_bytes(&a.checkpoint.to_bytes()),
            Err(Error::WrongModelKind { .. })
        ));

        let set = latent_training_set(&ds, &a.checkpoint.model).unwrap();
        assert_eq!(set.inputs.shape(), &[4, 4, 4, 4]);
        assert_eq!(set.cond.as_ref().unwrap().shape(), &[4, 1, 4, 4]);
    }

    #[test]
    fn psnr_reference() {
        let a = Tensor::from_vec(&[4], vec![0.0f32, 0.0, 0.0, 0.0]);
        let b = Tensor::from_vec(&[4], vec![0.1f32, -0.1, 0.1, -0.1]);
        // mse 0.01, peak^2 = 4 -> 10 log10(400)
        assert!((psnr(&a, &b) - 10.0 * 400f64.log10()).abs() < 1e-5);
    }
}
