use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_paired_dataset, split_dataset, write_generated_dataset, BinaryMask, ManifestInfo, PairedDataset, Provenance};
use crate::denoiser::{save_all, train_denoiser, train_on, DenoiserCheckpoint, ModelKind, TrainOutcome};
use crate::error::{Error, Result};
use crate::latent::{latent_training_set, train_autoencoder, AutoencoderCheckpoint};
use crate::metrics::{fid, mask_fid, set_similarity, sim, CheckpointRecord, FeatureExtractor};

use super::gallery::{emit_gallery, GalleryCell};
use super::{
    emit_report, generate_conditioned_images, generate_masks_detailed, load_report, run_mixing_sweep, run_three_way,
    select_best_checkpoint, CheckpointTable, ExperimentConfig, MetricReport, RunDir,
};

// Stream tags mixed into the global seed, one per random consumer.
const TAG_SPLIT: u64 = 0x01;
const TAG_MASK_TRAIN: u64 = 0x02;
const TAG_MASK_EVAL: u64 = 0x03;
const TAG_MASK_GEN: u64 = 0x04;
const TAG_AE: u64 = 0x05;
const TAG_IMAGE_TRAIN: u64 = 0x06;
const TAG_IMAGE_EVAL: u64 = 0x07;
const TAG_IMAGE_GEN: u64 = 0x08;
const TAG_SEG: u64 = 0x09;

/// Seed for one consumer: the global seed and tag through splitmix64, xored
/// with the consumer's own configured seed.
pub fn stage_seed(global: u64, tag: u64, local: u64) -> u64 {
    let mut z = global.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) ^ local
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    TrainMask,
    EvalMasks,
    GenMasks,
    TrainAutoencoder,
    TrainImage,
    EvalImages,
    GenImages,
    Sweep,
    ThreeWay,
    Gallery,
}

impl Stage {
    /// Pipeline order. The autoencoder stage only runs in latent mode.
    pub const ALL: [Stage; 10] = [
        Stage::TrainMask,
        Stage::EvalMasks,
        Stage::GenMasks,
        Stage::TrainAutoencoder,
        Stage::TrainImage,
        Stage::EvalImages,
        Stage::GenImages,
        Stage::Sweep,
        Stage::ThreeWay,
        Stage::Gallery,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::TrainMask => "train-mask",
            Stage::EvalMasks => "eval-masks",
            Stage::GenMasks => "gen-masks",
            Stage::TrainAutoencoder => "train-ae",
            Stage::TrainImage => "train-image",
            Stage::EvalImages => "eval-images",
            Stage::GenImages => "gen-images",
            Stage::Sweep => "sweep",
            Stage::ThreeWay => "three-way",
            Stage::Gallery => "gallery",
        }
    }
}

/// Real data split into training and test pairs.
#[derive(Clone, Debug)]
pub struct RealData {
    pub train: PairedDataset,
    pub test: PairedDataset,
}

pub fn load_real_data(cfg: &ExperimentConfig) -> Result<RealData> {
    let ds = load_paired_dataset(&cfg.data_root, cfg.resolution, cfg.mask_threshold)?;
    if let Some(t) = &cfg.test_root {
        let test = load_paired_dataset(t, cfg.resolution, cfg.mask_threshold)?;
        return Ok(RealData { train: ds, test });
    }
    if cfg.test_count >= ds.len() {
        return Err(Error::InsufficientData {
            requested: cfg.test_count + 1,
            available: ds.len(),
        });
    }
    let seed = stage_seed(cfg.seed, TAG_SPLIT, 0);
    let mut parts = split_dataset(&ds, &[ds.len() - cfg.test_count, cfg.test_count], seed)?.into_iter();
    let train = parts.next().expect("two parts");
    let test = parts.next().expect("two parts");
    Ok(RealData { train, test })
}

fn mask_dir(rd: &RunDir) -> PathBuf {
    rd.checkpoints().join("mask")
}
fn image_dir(rd: &RunDir) -> PathBuf {
    rd.checkpoints().join("image")
}
fn autoencoder_path(rd: &RunDir) -> PathBuf {
    rd.checkpoints().join("autoencoder.ckpt")
}
fn generated_masks_dir(rd: &RunDir) -> PathBuf {
    rd.samples().join("masks")
}
fn synthetic_dir(rd: &RunDir) -> PathBuf {
    rd.samples().join("synthetic")
}

/// Checkpoint paths listed by a training stage, in step order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let index = dir.join("checkpoints.txt");
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(|l| dir.join(l.trim())).collect())
}

fn save_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    save_all(outcome, dir)?;
    Ok(())
}

pub fn stage_train_mask(cfg: &ExperimentConfig, rd: &RunDir) -> Result<()> {
    let data = load_real_data(cfg)?;
    let mut tcfg = cfg.mask_train.clone();
    tcfg.seed = stage_seed(cfg.seed, TAG_MASK_TRAIN, tcfg.seed);
    let out = train_denoiser(&data.train, ModelKind::MaskModel, &cfg.mask_diffusion, &tcfg)?;
    save_outcome(&out, &mask_dir(rd))
}

fn write_table(rd: &RunDir, name: &str, table: CheckpointTable) -> Result<CheckpointTable> {
    let report = MetricReport {
        checkpoints: vec![table.clone()],
        ..Default::default()
    };
    emit_report(&report, &rd.reports(), &format!("{name}_checkpoints"))?;
    Ok(table)
}

fn read_table(rd: &RunDir, name: &str) -> Result<CheckpointTable> {
    let path = rd.reports().join(format!("{name}_checkpoints.json"));
    load_report(&path)?
        .checkpoints
        .into_iter()
        .next()
        .ok_or(Error::EmptyList)
}

fn selected_path(rd: &RunDir, name: &str, dir: &Path) -> Result<PathBuf> {
    Ok(dir.join(format!("{}.ckpt", read_table(rd, name)?.selected)))
}

/// Scores every mask checkpoint by pixel FID and SIM against the training
/// masks and records the argmin-FID choice.
pub fn stage_eval_masks(cfg: &ExperimentConfig, rd: &RunDir) -> Result<CheckpointTable> {
    let data = load_real_data(cfg)?;
    let reals: Vec<BinaryMask> = data.train.masks().into_iter().cloned().collect();
    let seed = stage_seed(cfg.seed, TAG_MASK_EVAL, 0);
    let mut records = Vec::new();
    for path in list_checkpoints(&mask_dir(rd))? {
        let ckpt = DenoiserCheckpoint::load(&path)?;
        let generated = generate_masks_detailed(&ckpt, cfg.eval_samples, seed)?.masks;
        let f = mask_fid(&reals, &generated, &FeatureExtractor::DownsamplePixels)?;
        let s = set_similarity(&reals, &generated)?;
        log::info!("mask {}: fid {f:.3} sim {s:.2}", ckpt.id());
        records.push(CheckpointRecord {
            id: ckpt.id(),
            fid: f,
            sim: Some(s),
            n_real: reals.len(),
            n_generated: generated.len(),
        });
    }
    let best = select_best_checkpoint(&records)?;
    write_table(
        rd,
        "mask",
        CheckpointTable {
            name: "mask".into(),
            records,
            selected: best.id,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub ids: Vec<String>,
    pub generator_digest: String,
    pub seed: u64,
    pub rejected: usize,
    pub unresolved: usize,
}

/// Writes `<id>.png` per mask plus `masks.json`.
pub fn write_masks(masks: &[BinaryMask], dir: &Path, manifest: &MaskManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, m) in manifest.ids.iter().zip(masks) {
        crate::data::io::save_png(&dir.join(format!("{id}.png")), crate::data::io::mask_to_dynamic(m))?;
    }
    let path = dir.join("masks.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads the masks listed in `masks.json`, in listed order.
pub fn read_masks(dir: &Path) -> Result<(Vec<BinaryMask>, MaskManifest)> {
    let path = dir.join("masks.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: MaskManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let masks = manifest
        .ids
        .iter()
        .map(|id| {
            let p = dir.join(format!("{id}.png"));
            let img = image::open(&p)
                .map_err(|e| Error::UnreadableFile {
                    path: p.clone(),
                    reason: e.to_string(),
                })?
                .to_luma8();
            let (w, h) = img.dimensions();
            let bits = img.pixels().map(|p| (p[0] >= 128) as u8).collect();
            BinaryMask::new(h as usize, w as usize, bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, manifest))
}

pub fn stage_gen_masks(cfg: &ExperimentConfig, rd: &RunDir) -> Result<Vec<BinaryMask>> {
    let ckpt = DenoiserCheckpoint::load(&selected_path(rd, "mask", &mask_dir(rd))?)?;
    let seed = stage_seed(cfg.seed, TAG_MASK_GEN, 0);
    let gen = generate_masks_detailed(&ckpt, cfg.generate_count, seed)?;
    let manifest = MaskManifest {
        ids: (0..gen.masks.len()).map(|i| format!("mask_{i:05}")).collect(),
        generator_digest: ckpt.digest(),
        seed,
        rejected: gen.rejected,
        unresolved: gen.unresolved,
    };
    write_masks(&gen.masks, &generated_masks_dir(rd), &manifest)?;
    Ok(gen.masks)
}

pub fn stage_train_autoencoder(cfg: &ExperimentConfig, rd: &RunDir) -> Result<AutoencoderCheckpoint> {
    let data = load_real_data(cfg)?;
    let mut acfg = cfg.autoencoder.clone();
    acfg.seed = stage_seed(cfg.seed, TAG_AE, acfg.seed);
    let trained = train_autoencoder(&data.train, &acfg)?;
    log::info!("autoencoder train PSNR {:.2} dB", trained.checkpoint.train_psnr_db);
    trained.checkpoint.save(&autoencoder_path(rd))?;
    Ok(trained.checkpoint)
}

fn load_autoencoder(cfg: &ExperimentConfig, rd: &RunDir) -> Result<Option<AutoencoderCheckpoint>> {
    if cfg.latent_mode {
        AutoencoderCheckpoint::load(&autoencoder_path(rd)).map(Some)
    } else {
        Ok(None)
    }
}

pub fn stage_train_image(cfg: &ExperimentConfig, rd: &RunDir) -> Result<()> {
    let data = load_real_data(cfg)?;
    let mut tcfg = cfg.image_train.clone();
    tcfg.seed = stage_seed(cfg.seed, TAG_IMAGE_TRAIN, tcfg.seed);
    let out = match load_autoencoder(cfg, rd)? {
        None => train_denoiser(&data.train, ModelKind::ImageModel, &cfg.image_diffusion, &tcfg)?,
        Some(ae) => {
            let set = latent_training_set(&data.train, &ae.model)?;
            train_on(&set, ModelKind::ImageModel, &cfg.image_diffusion, &tcfg, Some(ae.latent_ref()))?
        }
    };
    save_outcome(&out, &image_dir(rd))
}

/// Conditions every image checkpoint on training masks and scores pixel FID
/// against the matching real images.
pub fn stage_eval_images(cfg: &ExperimentConfig, rd: &RunDir) -> Result<CheckpointTable> {
    let data = load_real_data(cfg)?;
    let ae = load_autoencoder(cfg, rd)?;
    let n = cfg.eval_samples;
    let masks: Vec<BinaryMask> = data.train.masks().into_iter().cycle().take(n).cloned().collect();
    let reals: Vec<_> = data.train.images().into_iter().cloned().collect();
    let seed = stage_seed(cfg.seed, TAG_IMAGE_EVAL, 0);
    let mut records = Vec::new();
    for path in list_checkpoints(&image_dir(rd))? {
        let ckpt = DenoiserCheckpoint::load(&path)?;
        let gen = generate_conditioned_images(&ckpt, &masks, &[seed], ae.as_ref())?;
        let images: Vec<_> = gen.into_iter().map(|s| s.image).collect();
        let f = fid(&reals, &images, &FeatureExtractor::DownsamplePixels)?;
        log::info!("image {}: fid {f:.3}", ckpt.id());
        records.push(CheckpointRecord {
            id: ckpt.id(),
            fid: f,
            sim: None,
            n_real: reals.len(),
            n_generated: images.len(),
        });
    }
    let best = select_best_checkpoint(&records)?;
    write_table(
        rd,
        "image",
        CheckpointTable {
            name: "image".into(),
            records,
            selected: best.id,
        },
    )
}

pub fn stage_gen_images(cfg: &ExperimentConfig, rd: &RunDir) -> Result<PathBuf> {
    let ckpt = DenoiserCheckpoint::load(&selected_path(rd, "image", &image_dir(rd))?)?;
    let ae = load_autoencoder(cfg, rd)?;
    let (masks, _) = read_masks(&generated_masks_dir(rd))?;
    let seed = stage_seed(cfg.seed, TAG_IMAGE_GEN, 0);
    let samples = generate_conditioned_images(&ckpt, &masks, &[seed], ae.as_ref())?;
    write_generated_dataset(
        &samples,
        &synthetic_dir(rd),
        &ManifestInfo {
            generator_digest: ckpt.digest(),
            seed,
        },
    )
}

/// The synthetic pairs as written by `gen-images`.
pub fn load_synthetic(cfg: &ExperimentConfig, rd: &RunDir) -> Result<PairedDataset> {
    let ds = load_paired_dataset(&synthetic_dir(rd), cfg.resolution, 0.5)?;
    let samples = ds
        .into_samples()
        .into_iter()
        .map(|mut s| {
            s.provenance = Provenance::Synthetic;
            s
        })
        .collect();
    PairedDataset::new(samples, cfg.resolution)
}

fn seg_config(cfg: &ExperimentConfig) -> crate::seg::SegTrainConfig {
    let mut s = cfg.segmentation.clone();
    s.seed = stage_seed(cfg.seed, TAG_SEG, s.seed);
    s
}

fn attach_tables(rd: &RunDir, report: &mut MetricReport) {
    for name in ["mask", "image"] {
        if let Ok(t) = read_table(rd, name) {
            report.checkpoints.push(t);
        }
    }
}

pub fn stage_sweep(cfg: &ExperimentConfig, rd: &RunDir) -> Result<MetricReport> {
    let data = load_real_data(cfg)?;
    let synth = load_synthetic(cfg, rd)?;
    let mut report = run_mixing_sweep(&data.train, &synth, &cfg.mixing, &seg_config(cfg), &data.test, cfg.parallel_sweep)?;
    attach_tables(rd, &mut report);
    emit_report(&report, &rd.reports(), "sweep")?;
    Ok(report)
}

pub fn stage_three_way(cfg: &ExperimentConfig, rd: &RunDir) -> Result<MetricReport> {
    let data = load_real_data(cfg)?;
    let synth = load_synthetic(cfg, rd)?;
    let mut report = run_three_way(&data.train, &synth, &data.test, &seg_config(cfg))?;
    attach_tables(rd, &mut report);
    emit_report(&report, &rd.reports(), "three_way")?;
    Ok(report)
}

/// Up to ten generated masks captioned with their closest-real SIM, and up
/// to ten synthetic pairs.
pub fn stage_gallery(cfg: &ExperimentConfig, rd: &RunDir) -> Result<Vec<PathBuf>> {
    let data = load_real_data(cfg)?;
    let reals: Vec<BinaryMask> = data.train.masks().into_iter().cloned().collect();
    let (masks, _) = read_masks(&generated_masks_dir(rd))?;
    let mut out = Vec::new();
    if !masks.is_empty() {
        let cells = masks
            .iter()
            .take(10)
            .map(|m| {
                let best = reals.iter().map(|r| sim(r, m)).collect::<Result<Vec<_>>>()?;
                let s = best.into_iter().fold(0.0, f64::max);
                Ok(GalleryCell::mask(m).with_caption(format!("{s:.2}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(emit_gallery(&cells, 2, 5, &rd.reports().join("masks_gallery.png"))?);
    }
    if let Ok(synth) = load_synthetic(cfg, rd) {
        let cells: Vec<_> = synth.samples().iter().take(10).map(GalleryCell::pair).collect();
        if !cells.is_empty() {
            out.push(emit_gallery(&cells, 2, 5, &rd.reports().join("pairs_gallery.png"))?);
        }
    }
    Ok(out)
}

/// Prepares the run directory and writes the resolved config.
pub fn open_run(cfg: &ExperimentConfig) -> Result<RunDir> {
    cfg.validate()?;
    cfg.check_paths()?;
    let rd = RunDir::create(cfg.run_dir())?;
    cfg.save(&rd.config_path())?;
    Ok(rd)
}

fn dispatch(cfg: &ExperimentConfig, rd: &RunDir, stage: Stage) -> Result<()> {
    match stage {
        Stage::TrainMask => stage_train_mask(cfg, rd),
        Stage::EvalMasks => stage_eval_masks(cfg, rd).map(drop),
        Stage::GenMasks => stage_gen_masks(cfg, rd).map(drop),
        Stage::TrainAutoencoder => stage_train_autoencoder(cfg, rd).map(drop),
        Stage::TrainImage => stage_train_image(cfg, rd),
        Stage::EvalImages => stage_eval_images(cfg, rd).map(drop),
        Stage::GenImages => stage_gen_images(cfg, rd).map(drop),
        Stage::Sweep => stage_sweep(cfg, rd).map(drop),
        Stage::ThreeWay => stage_three_way(cfg, rd).map(drop),
        Stage::Gallery => stage_gallery(cfg, rd).map(drop),
    }
}

/// Runs one stage under the run's lock.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<RunDir> {
    let rd = open_run(cfg)?;
    let _lock = rd.lock(stage.name())?;
    log::info!("stage {}", stage.name());
    dispatch(cfg, &rd, stage)?;
    Ok(rd)
}

/// Every stage in order, holding the lock throughout.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunDir> {
    let rd = open_run(cfg)?;
    let _lock = rd.lock("pipeline")?;
    for stage in Stage::ALL {
        if stage == Stage::TrainAutoencoder && !cfg.latent_mode {
            continue;
        }
        log::info!("stage {}", stage.name());
        dispatch(cfg, &rd, stage)?;
    }
    Ok(rd)
}
