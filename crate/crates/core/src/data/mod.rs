//! Paired image/mask datasets: types, Kvasir-SEG style folder IO, transforms.

pub(crate) mod io;
mod transform;

pub use io::{load_paired_dataset, write_generated_dataset, GeneratedManifest, ManifestInfo, MANIFEST_FILE};
pub use transform::{binarize_mask, resize_pair, split_dataset};

pub(crate) use io::hex as hex_digest;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;
pub const DEFAULT_RESOLUTION: usize = 64;

/// Real-valued image in `[-1, 1]`, channel-major `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    /// Maps 8-bit samples with `v = 2 u / 255 - 1`.
    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            bytes.iter().map(|&u| 2.0 * (u as f32 / 255.0) - 1.0).collect(),
        )
    }

    /// Inverse of [`from_u8`](Self::from_u8) with rounding, interleaved as HWC.
    pub fn to_u8_hwc(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for p in 0..hw {
                let v = self.data[c * hw + p].clamp(-1.0, 1.0);
                out[p * self.channels + c] = ((v + 1.0) * 0.5 * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn clamp(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }
}

/// Two-valued mask, `1` = polyp foreground, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: bool) -> Self {
        Self {
            height,
            width,
            data: vec![v as u8; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }
    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `{0, 1} -> {-1, +1}`, the range the diffusion models operate on.
    pub fn to_signed(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect()
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Number of 4-connected foreground components.
    pub fn connected_components(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut seen = vec![false; h * w];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..h * w {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if self.data[q] == 1 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
            }
        }
        count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub id: String,
    pub provenance: Provenance,
}

impl PairedSample {
    pub fn new(image: ImageTensor, mask: BinaryMask, id: impl Into<String>, provenance: Provenance) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::shape(
                (image.height(), image.width()),
                (mask.height(), mask.width()),
            ));
        }
        Ok(Self {
            image,
            mask,
            id: id.into(),
            provenance,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub path: String,
    /// Hex SHA-256 over the sorted file names and contents.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    samples: Vec<PairedSample>,
    resolution: usize,
    pub source_manifest: Option<SourceManifest>,
}

impl PairedDataset {
    /// Validates shared resolution, matching image/mask sizes and unique ids.
    pub fn new(samples: Vec<PairedSample>, resolution: usize) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for s in &samples {
            if s.image.height() != resolution || s.image.width() != resolution {
                return Err(Error::shape(
                    (resolution, resolution),
                    (s.image.height(), s.image.width()),
                ));
            }
            if s.mask.height() != resolution || s.mask.width() != resolution {
                return Err(Error::shape(
                    (resolution, resolution),
                    (s.mask.height(), s.mask.width()),
                ));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self {
            samples,
            resolution,
            source_manifest: None,
        })
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }
    pub fn into_samples(self) -> Vec<PairedSample> {
        self.samples
    }
    pub fn resolution(&self) -> usize {
        self.resolution
    }
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.channels())
    }

    pub fn masks(&self) -> Vec<&BinaryMask> {
        self.samples.iter().map(|s| &s.mask).collect()
    }

    pub fn images(&self) -> Vec<&ImageTensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    /// Concatenates two datasets; ids must stay unique.
    pub fn concat(&self, other: &PairedDataset) -> Result<PairedDataset> {
        if self.resolution != other.resolution {
            return Err(Error::shape(self.resolution, other.resolution));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        PairedDataset::new(samples, self.resolution)
    }

    /// First `n` samples, in order.
    pub fn prefix(&self, n: usize) -> Result<PairedDataset> {
        if n > self.len() {
            return Err(Error::InsufficientData {
                requested: n,
                available: self.len(),
            });
        }
        Ok(PairedDataset {
            samples: self.samples[..n].to_vec(),
            resolution: self.resolution,
            source_manifest: self.source_manifest.clone(),
        })
    }

    pub fn require_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }
}

/// Stacks images into an `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImageTensor]) -> Tensor<f32> {
    let shape = images[0].shape();
    let items: Vec<&[f32]> = images.iter().map(|i| i.data()).collect();
    Tensor::stack(&items, &shape)
}

/// Stacks masks into an `[N, 1, H, W]` tensor with values in `{-1, 1}`.
pub fn masks_to_signed_tensor(masks: &[&BinaryMask]) -> Tensor<f32> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let owned: Vec<Vec<f32>> = masks.iter().map(|m| m.to_signed()).collect();
    let items: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
    Tensor::stack(&items, &[1, h, w])
}

/// Stacks masks into an `[N, 1, H, W]` tensor with values in `{0, 1}`.
pub fn masks_to_unit_tensor(masks: &[&BinaryMask]) -> Tensor<f32> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let owned: Vec<Vec<f32>> = masks.iter().map(|m| m.to_unit()).collect();
    let items: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
    Tensor::stack(&items, &[1, h, w])
}
