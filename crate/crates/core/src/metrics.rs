//! Mask similarity and Fréchet distance between feature distributions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};
use crate::latent::Autoencoder;

/// Side of the pooled grid used by [`FeatureExtractor::DownsamplePixels`].
pub const POOL_SIDE: usize = 8;
/// Eigenvalues above `-PSD_TOLERANCE * max(1, |largest|)` count as zero.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Fraction of pixels on which two masks agree.
pub fn sim(r: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    if (r.height(), r.width()) != (g.height(), g.width()) {
        return Err(Error::shape((r.height(), r.width()), (g.height(), g.width())));
    }
    let same = r.data().iter().zip(g.data()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / r.data().len() as f64)
}

/// Index and similarity of the best-matching real mask; ties go to the lowest index.
pub fn closest_real(g: &BinaryMask, reals: &[BinaryMask]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reals.iter().enumerate() {
        let s = sim(r, g)?;
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.ok_or(Error::EmptySet)
}

/// Mean over generated masks of their best similarity to any real mask, in percent.
pub fn set_similarity(reals: &[BinaryMask], generated: &[BinaryMask]) -> Result<f64> {
    if reals.is_empty() || generated.is_empty() {
        return Err(Error::EmptySet);
    }
    let best: Vec<f64> = generated
        .par_iter()
        .map(|g| closest_real(g, reals).map(|(_, s)| s))
        .collect::<Result<_>>()?;
    Ok(100.0 * best.iter().sum::<f64>() / best.len() as f64)
}

/// Masks enter feature space on the signed scale used for diffusion.
pub fn mask_as_image(m: &BinaryMask) -> ImageTensor {
    ImageTensor::new(1, m.height(), m.width(), m.to_signed()).expect("mask sizes are consistent")
}

#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    /// Channel mean area-pooled to 8x8, flattened (d = 64).
    DownsamplePixels,
    /// Frozen autoencoder encoder, latent pooled to `side x side`.
    TrainedEncoder { encoder: Box<Autoencoder>, side: usize },
}

impl FeatureExtractor {
    pub fn output_dim(&self) -> usize {
        match self {
            Self::DownsamplePixels => POOL_SIDE * POOL_SIDE,
            Self::TrainedEncoder { encoder, side } => encoder.arch().latent_channels * side * side,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::DownsamplePixels => "downsample_pixels",
            Self::TrainedEncoder { .. } => "trained_encoder",
        }
    }
}

/// Area-pools every channel of a `[C, H, W]` grid to `side x side`.
fn area_pool(data: &[f32], c: usize, h: usize, w: usize, side: usize) -> Result<Vec<f64>> {
    for s in [h, w] {
        if s % side != 0 {
            return Err(Error::IndivisibleSize { size: s, factor: side });
        }
    }
    let (fy, fx) = (h / side, w / side);
    let mut out = vec![0.0; c * side * side];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * side + y / fy) * side + x / fx] += data[(ci * h + y) * w + x] as f64;
            }
        }
    }
    let area = (fy * fx) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// One row per item.
pub fn extract_features(items: &[ImageTensor], fx: &FeatureExtractor) -> Result<DMatrix<f64>> {
    if items.is_empty() {
        return Err(Error::EmptySet);
    }
    let d = fx.output_dim();
    let rows: Vec<Vec<f64>> = match fx {
        FeatureExtractor::DownsamplePixels => items
            .par_iter()
            .map(|im| {
                let (c, h, w) = (im.channels(), im.height(), im.width());
                let mut mean = vec![0f32; h * w];
                for ch in im.data().chunks(h * w) {
                    for (m, &v) in mean.iter_mut().zip(ch) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= c as f32);
                area_pool(&mean, 1, h, w, POOL_SIDE)
            })
            .collect::<Result<_>>()?,
        FeatureExtractor::TrainedEncoder { encoder, side } => {
            let refs: Vec<&ImageTensor> = items.iter().collect();
            let z = encoder.encode_tensor(&crate::data::images_to_tensor(&refs))?;
            let (n, c, h, w) = z.dims4();
            (0..n)
                .map(|i| area_pool(z.batch_item(i), c, h, w, *side))
                .collect::<Result<_>>()?
        }
    };
    let mut m = DMatrix::zeros(items.len(), d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::DimensionMismatch(d, r.len()));
        }
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite feature in row {i}")));
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Number of samples the moments were estimated from.
    pub n: usize,
}

/// Column mean and unbiased, symmetrized covariance.
pub fn gaussian_stats(f: &DMatrix<f64>) -> Result<GaussianStats> {
    let (n, d) = f.shape();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mean = DVector::from_iterator(d, f.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let s = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&s + s.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

/// Eigenvalues of a symmetric matrix with tiny negatives clamped; rejects clearly negative ones.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::NonPsdInput(*v));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace term uses `tr((S_a S_b)^(1/2)) = tr((A S_b A)^(1/2))` with
/// `A = S_a^(1/2)`, which keeps the product symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(Error::DimensionMismatch(d, b.mean.len()));
    }
    psd_eigen(&b.cov)?;
    let ra = sqrtm_psd(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let cross: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let value = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

pub fn fid(real: &[ImageTensor], generated: &[ImageTensor], fx: &FeatureExtractor) -> Result<f64> {
    let a = gaussian_stats(&extract_features(real, fx)?)?;
    let b = gaussian_stats(&extract_features(generated, fx)?)?;
    frechet_distance(&a, &b)
}

pub fn mask_fid(real: &[BinaryMask], generated: &[BinaryMask], fx: &FeatureExtractor) -> Result<f64> {
    let r: Vec<_> = real.iter().map(mask_as_image).collect();
    let g: Vec<_> = generated.iter().map(mask_as_image).collect();
    fid(&r, &g, fx)
}

/// One evaluated generator snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub fid: f64,
    /// Percent; only for mask models.
    pub sim: Option<f64>,
    pub n_real: usize,
    pub n_generated: usize,
}
