use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{binarize_mask, resize_pair, ImageTensor, PairedDataset, PairedSample, Provenance, SourceManifest};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Regular files in `dir`, keyed by file stem, ordered by file name.
fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| unreadable(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| unreadable(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut out = BTreeMap::new();
    for path in files {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.starts_with('.') {
            continue;
        }
        out.entry(stem.to_string()).or_insert(path);
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| unreadable(path, e))
}

fn decode(path: &Path, bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| unreadable(path, e))
}

/// Loads `root/images/*` with same-stem masks from `root/masks/*`.
///
/// Images are mapped to `[-1, 1]`, masks scaled to `[0, 1]` and binarized at
/// `mask_threshold`, then both resized to `resolution`. Samples are ordered by
/// image file name.
pub fn load_paired_dataset(root: &Path, resolution: usize, mask_threshold: f32) -> Result<PairedDataset> {
    if !(mask_threshold > 0.0 && mask_threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mask threshold {mask_threshold} outside (0, 1)"
        )));
    }
    let images = list_by_stem(&root.join("images"))?;
    let masks = list_by_stem(&root.join("masks"))?;
    let mut hasher = Sha256::new();
    let mut samples = Vec::with_capacity(images.len());
    let mut channels = None;
    for (id, img_path) in &images {
        let mask_path = masks.get(id).ok_or_else(|| Error::MissingMask(id.clone()))?;
        let img_bytes = read_bytes(img_path)?;
        let mask_bytes = read_bytes(mask_path)?;
        for (p, b) in [(img_path, &img_bytes), (mask_path, &mask_bytes)] {
            hasher.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
            hasher.update((b.len() as u64).to_le_bytes());
            hasher.update(b);
        }
        let img = decode(img_path, &img_bytes)?;
        let ch = *channels.get_or_insert(if img.color().has_color() { 3 } else { 1 });
        let (w, h) = (img.width() as usize, img.height() as usize);
        let image = if ch == 3 {
            ImageTensor::from_u8(3, h, w, &planar(img.to_rgb8().as_raw(), 3))?
        } else {
            ImageTensor::from_u8(1, h, w, img.to_luma8().as_raw())?
        };
        let m = decode(mask_path, &mask_bytes)?.to_luma8();
        if (m.width() as usize, m.height() as usize) != (w, h) {
            return Err(unreadable(
                mask_path,
                format!("mask is {}x{}, image is {w}x{h}", m.width(), m.height()),
            ));
        }
        let raw: Vec<f32> = m.as_raw().iter().map(|&u| u as f32 / 255.0).collect();
        let mask = binarize_mask(&raw, h, w, mask_threshold);
        let sample = PairedSample::new(image, mask, id.clone(), Provenance::Real)?;
        samples.push(resize_pair(&sample, resolution)?);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ds = PairedDataset::new(samples, resolution)?;
    ds.source_manifest = Some(SourceManifest {
        path: root.display().to_string(),
        digest: hex(&hasher.finalize()),
    });
    apply_manifest_provenance(&mut ds, root)?;
    Ok(ds)
}

/// Samples written by [`write_generated_dataset`] keep their recorded provenance.
fn apply_manifest_provenance(ds: &mut PairedDataset, root: &Path) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(&path).map_err(|e| unreadable(&path, e))?;
    let manifest: GeneratedManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let lookup: BTreeMap<&str, Provenance> = manifest
        .ids
        .iter()
        .map(String::as_str)
        .zip(manifest.provenance.iter().copied())
        .collect();
    for s in &mut ds.samples {
        if let Some(&p) = lookup.get(s.id.as_str()) {
            s.provenance = p;
        }
    }
    Ok(())
}

fn planar(interleaved: &[u8], channels: usize) -> Vec<u8> {
    let hw = interleaved.len() / channels;
    let mut out = vec![0u8; interleaved.len()];
    for p in 0..hw {
        for c in 0..channels {
            out[c * hw + p] = interleaved[p * channels + c];
        }
    }
    out
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestInfo {
    /// Digest of the generator checkpoint that produced the samples.
    pub generator_digest: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedManifest {
    pub ids: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub generator_digest: String,
    pub seed: u64,
    pub resolution: usize,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

pub(crate) fn save_png(path: &Path, img: DynamicImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub(crate) fn image_to_dynamic(img: &ImageTensor) -> DynamicImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = img.to_u8_hwc();
    match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("buffer size")),
        c => panic!("unsupported channel count {c}"),
    }
}

pub(crate) fn mask_to_dynamic(mask: &super::BinaryMask) -> DynamicImage {
    let bytes = mask.data().iter().map(|&v| v * 255).collect();
    DynamicImage::ImageLuma8(
        GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("buffer size"),
    )
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json` under `out`.
pub fn write_generated_dataset(samples: &[PairedSample], out: &Path, info: &ManifestInfo) -> Result<PathBuf> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let resolution = first.image.height();
    let img_dir = out.join("images");
    let mask_dir = out.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        save_png(&img_dir.join(format!("{}.png", s.id)), image_to_dynamic(&s.image))?;
        save_png(&mask_dir.join(format!("{}.png", s.id)), mask_to_dynamic(&s.mask))?;
    }
    let manifest = GeneratedManifest {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        provenance: samples.iter().map(|s| s.provenance).collect(),
        generator_digest: info.generator_digest.clone(),
        seed: info.seed,
        resolution,
        created_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
