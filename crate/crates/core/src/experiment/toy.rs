//! Small synthetic corpus: random elliptical blobs, and images that are a
//! fixed shading of their mask.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, ImageTensor, PairedDataset, PairedSample, Provenance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub side: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
}

impl Default for ToyCorpus {
    fn default() -> Self {
        Self {
            side: 32,
            min_blobs: 1,
            max_blobs: 3,
        }
    }
}

const BACKGROUND: [f32; 3] = [-0.7, -0.45, -0.55];
const FOREGROUND: [f32; 3] = [0.75, 0.05, -0.25];

impl ToyCorpus {
    fn validate(&self) -> Result<()> {
        if self.side < 8 || self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::InvalidConfig(format!("bad toy corpus {self:?}")));
        }
        Ok(())
    }

    /// Union of a few rotated ellipses; never empty.
    pub fn mask(&self, rng: &mut impl Rng) -> BinaryMask {
        let s = self.side as f64;
        let n = rng.gen_range(self.min_blobs..=self.max_blobs);
        let blobs: Vec<[f64; 5]> = (0..n)
            .map(|_| {
                let a = rng.gen_range(s / 10.0..s / 4.0);
                let b = rng.gen_range(s / 10.0..s / 4.0);
                let cy = rng.gen_range(a.max(b)..s - a.max(b));
                let cx = rng.gen_range(a.max(b)..s - a.max(b));
                [cy, cx, a.max(1.0), b.max(1.0), rng.gen_range(0.0..PI)]
            })
            .collect();
        BinaryMask::from_fn(self.side, self.side, |y, x| {
            blobs.iter().any(|&[cy, cx, a, b, th]| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (u, v) = (dx * th.cos() + dy * th.sin(), -dx * th.sin() + dy * th.cos());
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
        })
    }
}

/// Deterministic RGB rendering of a mask in [-1, 1]: a vertical gradient
/// behind, and a foreground that darkens toward its boundary.
pub fn shade_mask(mask: &BinaryMask) -> ImageTensor {
    let (h, w) = (mask.height(), mask.width());
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let grad = 0.25 * y as f32 / h as f32;
            if mask.get(y, x) {
                // share of foreground in the 5x5 neighbourhood
                let mut inside = 0usize;
                let mut total = 0usize;
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        inside += mask.get(yy, xx) as usize;
                        total += 1;
                    }
                }
                let depth = inside as f32 / total as f32;
                for c in 0..3 {
                    data[c * h * w + i] = FOREGROUND[c] - 0.45 * (1.0 - depth);
                }
            } else {
                for c in 0..3 {
                    data[c * h * w + i] = BACKGROUND[c] + grad;
                }
            }
        }
    }
    ImageTensor::new(3, h, w, data).expect("sizes agree")
}

pub fn toy_masks(spec: &ToyCorpus, n: usize, seed: u64) -> Result<Vec<BinaryMask>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| spec.mask(&mut rng)).collect())
}

/// `n` pairs with ids `<prefix>_00000`, ...
pub fn toy_dataset(spec: &ToyCorpus, n: usize, seed: u64, prefix: &str, provenance: Provenance) -> Result<PairedDataset> {
    let samples = toy_masks(spec, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, m)| PairedSample::new(shade_mask(&m), m, format!("{prefix}_{i:05}"), provenance))
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(samples, spec.side)
}

/// Writes a toy dataset in the on-disk layout the loader reads.
pub fn write_toy_dataset(ds: &PairedDataset, root: &std::path::Path) -> Result<()> {
    use crate::data::io::{image_to_dynamic, mask_to_dynamic, save_png};
    for (sub, is_mask) in [("images", false), ("masks", true)] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in ds.samples() {
            let img = if is_mask {
                mask_to_dynamic(&s.mask)
            } else {
                image_to_dynamic(&s.image)
            };
            save_png(&dir.join(format!("{}.png", s.id)), img)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_paired_dataset;

    #[test]
    fn masks_are_seeded_and_non_empty() {
        let spec = ToyCorpus::default();
        let a = toy_masks(&spec, 50, 4).unwrap();
        assert_eq!(a, toy_masks(&spec, 50, 4).unwrap());
        assert_ne!(a, toy_masks(&spec, 50, 5).unwrap());
        for m in &a {
            let fg = m.foreground();
            assert!(fg > 0 && fg < 32 * 32 / 2, "foreground {fg}");
            assert!((1..=3).contains(&m.connected_components()));
        }
    }

    #[test]
    fn shading_depends_only_on_the_mask() {
        let spec = ToyCorpus::default();
        let m = &toy_masks(&spec, 1, 0).unwrap()[0];
        let img = shade_mask(m);
        assert_eq!(img, shade_mask(m));
        assert!(img.is_normalized());
        // foreground red is bright, background red is dark
        for y in 0..32 {
            for x in 0..32 {
                let r = img.data()[y * 32 + x];
                assert_eq!(r > 0.0, m.get(y, x));
            }
        }
        assert!(toy_masks(&ToyCorpus { side: 4, ..spec }, 1, 0).is_err());
    }

    #[test]
    fn disk_roundtrip_is_exact_for_masks_and_quantized_for_images() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(&ToyCorpus { side: 16, ..Default::default() }, 5, 9, "t", Provenance::Real).unwrap();
        write_toy_dataset(&ds, dir.path()).unwrap();
        let back = load_paired_dataset(dir.path(), 16, 0.5).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            for (u, v) in a.image.data().iter().zip(b.image.data()) {
                assert!((u - v).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
