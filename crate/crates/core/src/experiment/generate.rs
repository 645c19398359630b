use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{binarize_mask, BinaryMask, ImageTensor, PairedSample, Provenance};
use crate::denoiser::{DenoiserCheckpoint, ModelKind};
use crate::diffusion::{make_schedule, sample_loop};
use crate::error::{Error, Result};
use crate::latent::{downsample_condition, AutoencoderCheckpoint};
use crate::nn::Tensor;

/// Extra draws allowed for a slot whose mask came out empty.
pub const MAX_MASK_RETRIES: usize = 10;
const BATCH: usize = 64;

/// Seed of draw `attempt` for the slot whose base seed is `base`.
fn attempt_seed(base: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        base
    } else {
        base ^ (attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

fn expand_seeds(seeds: &[u64], n: usize) -> Result<Vec<u64>> {
    match seeds.len() {
        1 => Ok((0..n as u64).map(|i| seeds[0].wrapping_add(i)).collect()),
        l if l == n => Ok(seeds.to_vec()),
        l => Err(Error::shape(n, l)),
    }
}

/// Draws one sample per seed, `BATCH` chains at a time.
fn draw(ckpt: &DenoiserCheckpoint, seeds: &[u64], cond: Option<&[Tensor<f32>]>) -> Result<Vec<Tensor<f32>>> {
    let sched = make_schedule(&ckpt.diffusion)?;
    let mut out = Vec::with_capacity(seeds.len());
    for (ci, chunk) in seeds.chunks(BATCH).enumerate() {
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let c = cond.map(|all| {
            let part = &all[ci * BATCH..ci * BATCH + chunk.len()];
            let items: Vec<&[f32]> = part.iter().map(|t| t.data()).collect();
            Tensor::stack(&items, part[0].shape())
        });
        let x = sample_loop(&ckpt.model, &ckpt.sample_shape(chunk.len()), c.as_ref(), &sched, &mut rngs)?;
        let (b, ch, h, w) = x.dims4();
        for i in 0..b {
            out.push(Tensor::from_vec(&[ch, h, w], x.batch_item(i).to_vec()));
        }
    }
    Ok(out)
}

fn to_mask(x: &Tensor<f32>) -> BinaryMask {
    let s = x.shape();
    let unit: Vec<f32> = x.data().iter().map(|v| (v + 1.0) * 0.5).collect();
    binarize_mask(&unit, s[1], s[2], 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGeneration {
    pub masks: Vec<BinaryMask>,
    /// Slots whose first draw was empty.
    pub first_draw_empty: usize,
    /// Empty draws that were discarded and redrawn.
    pub rejected: usize,
    /// Slots still empty after all retries; they are kept as drawn.
    pub unresolved: usize,
}

/// `n` masks; slot `i` uses seed `seed + i`, thresholded at 0.5 on the unit scale.
pub fn generate_masks(ckpt: &DenoiserCheckpoint, n: usize, seed: u64) -> Result<Vec<BinaryMask>> {
    Ok(generate_masks_detailed(ckpt, n, seed)?.masks)
}

pub fn generate_masks_detailed(ckpt: &DenoiserCheckpoint, n: usize, seed: u64) -> Result<MaskGeneration> {
    ckpt.require_kind(ModelKind::MaskModel)?;
    if ckpt.model.arch().in_channels != 1 {
        return Err(Error::shape(1, ckpt.model.arch().in_channels));
    }
    let bases: Vec<u64> = (0..n as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut masks: Vec<BinaryMask> = draw(ckpt, &bases, None)?.iter().map(to_mask).collect();
    let first_draw_empty = masks.iter().filter(|m| m.foreground() == 0).count();
    let mut rejected = 0;
    for attempt in 1..=MAX_MASK_RETRIES {
        let empty: Vec<usize> = (0..n).filter(|&i| masks[i].foreground() == 0).collect();
        if empty.is_empty() {
            break;
        }
        rejected += empty.len();
        let seeds: Vec<u64> = empty.iter().map(|&i| attempt_seed(bases[i], attempt)).collect();
        for (&i, x) in empty.iter().zip(draw(ckpt, &seeds, None)?) {
            masks[i] = to_mask(&x);
        }
    }
    let unresolved = masks.iter().filter(|m| m.foreground() == 0).count();
    if rejected > 0 {
        log::info!("mask generation: {rejected} empty draws redrawn, {unresolved} slots still empty");
    }
    Ok(MaskGeneration {
        masks,
        first_draw_empty,
        rejected,
        unresolved,
    })
}

/// One image per mask. `seeds` has one entry per mask, or a single seed
/// expanded to `seed + i`. Latent models need the autoencoder they were
/// trained against.
pub fn generate_conditioned_images(
    ckpt: &DenoiserCheckpoint,
    masks: &[BinaryMask],
    seeds: &[u64],
    autoencoder: Option<&AutoencoderCheckpoint>,
) -> Result<Vec<PairedSample>> {
    ckpt.require_kind(ModelKind::ImageModel)?;
    if masks.is_empty() {
        return Ok(Vec::new());
    }
    let seeds = expand_seeds(seeds, masks.len())?;
    let factor = match (&ckpt.latent, autoencoder) {
        (None, _) => 1,
        (Some(r), Some(ae)) => {
            let digest = ae.digest();
            if digest != r.autoencoder_digest {
                return Err(Error::InvalidConfig(format!(
                    "model was trained against autoencoder {}, got {digest}",
                    r.autoencoder_digest
                )));
            }
            r.factor
        }
        (Some(_), None) => {
            return Err(Error::InvalidConfig("latent image model needs its autoencoder".into()))
        }
    };
    let [sh, sw] = ckpt.sample_hw;
    let conds = masks
        .iter()
        .map(|m| {
            if (m.height(), m.width()) != (sh * factor, sw * factor) {
                return Err(Error::shape((sh * factor, sw * factor), (m.height(), m.width())));
            }
            if factor == 1 {
                Ok(Tensor::from_vec(&[1, sh, sw], m.to_signed()))
            } else {
                downsample_condition(m, factor)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let drawn = draw(ckpt, &seeds, Some(&conds))?;
    let images: Vec<ImageTensor> = match (factor, autoencoder) {
        (1, _) => drawn
            .into_iter()
            .map(|x| {
                let s = x.shape().to_vec();
                ImageTensor::new(s[0], s[1], s[2], x.into_data())
            })
            .collect::<Result<_>>()?,
        (_, Some(ae)) => {
            let mut out = Vec::with_capacity(drawn.len());
            for part in drawn.chunks(BATCH) {
                let items: Vec<&[f32]> = part.iter().map(|t| t.data()).collect();
                let y = ae.model.decode_tensor(&Tensor::stack(&items, part[0].shape()))?;
                let (b, c, h, w) = y.dims4();
                for i in 0..b {
                    out.push(ImageTensor::new(c, h, w, y.batch_item(i).to_vec())?);
                }
            }
            out
        }
        _ => unreachable!("latent factor without autoencoder"),
    };
    images
        .into_iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (img, m))| PairedSample::new(img, m.clone(), synthetic_id(i), Provenance::Synthetic))
        .collect()
}

pub fn synthetic_id(i: usize) -> String {
    format!("synth_{i:05}")
}
