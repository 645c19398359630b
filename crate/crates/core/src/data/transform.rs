use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, ImageTensor, PairedDataset, PairedSample};
use crate::error::{Error, Result};

/// `1` wherever `raw >= threshold` (ties go to foreground).
pub fn binarize_mask(raw: &[f32], height: usize, width: usize, threshold: f32) -> BinaryMask {
    assert_eq!(raw.len(), height * width, "binarize_mask: size mismatch");
    BinaryMask {
        height,
        width,
        data: raw.iter().map(|&v| (v >= threshold) as u8).collect(),
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    ImageTensor {
        channels: c,
        height: out_h,
        width: out_w,
        data: out,
    }
}

fn resize_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    if (h, w) == (out_h, out_w) {
        return mask.clone();
    }
    BinaryMask::from_fn(out_h, out_w, |y, x| {
        let sy = ((y * h) as f64 + h as f64 / 2.0) as usize / out_h;
        let sx = ((x * w) as f64 + w as f64 / 2.0) as usize / out_w;
        mask.get(sy.min(h - 1), sx.min(w - 1))
    })
}

/// Resizes the image bilinearly (re-clamped to `[-1, 1]`) and the mask by nearest neighbour.
pub fn resize_pair(sample: &PairedSample, resolution: usize) -> Result<PairedSample> {
    if resolution < 8 {
        return Err(Error::InvalidConfig(format!("resolution {resolution} is below 8")));
    }
    Ok(PairedSample {
        image: resize_bilinear(&sample.image, resolution, resolution).clamp(),
        mask: resize_nearest(&sample.mask, resolution, resolution),
        id: sample.id.clone(),
        provenance: sample.provenance,
    })
}

/// Seeded shuffle, then consecutive disjoint chunks of the requested sizes.
pub fn split_dataset(ds: &PairedDataset, counts: &[usize], seed: u64) -> Result<Vec<PairedDataset>> {
    let total: usize = counts.iter().sum();
    if total > ds.len() {
        return Err(Error::InsufficientData {
            requested: total,
            available: ds.len(),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(counts.len());
    let mut off = 0;
    for &n in counts {
        let samples = order[off..off + n]
            .iter()
            .map(|&i| ds.samples()[i].clone())
            .collect();
        off += n;
        let mut part = PairedDataset::new(samples, ds.resolution())?;
        part.source_manifest = ds.source_manifest.clone();
        out.push(part);
    }
    Ok(out)
}
