use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{
    confusion_counts, metrics_from_counts, micro_imagewise_metrics, micro_metrics, ConfusionCounts, SegMetricSet,
    DEFAULT_DICE_EPS,
};
use super::models::{SegArch, SegNet};
use crate::checkpoint::{self, SEGMENTER_MAGIC};
use crate::data::{images_to_tensor, masks_to_unit_tensor, split_dataset, BinaryMask, ImageTensor, PairedDataset};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamSet, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegLoss {
    Dice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub model: SegArch,
    pub encoder_width: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: SegLoss,
    pub dice_eps: f64,
    /// Fraction held out to pick the best epoch; 0 selects by training loss.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            model: SegArch::UnetSmall,
            encoder_width: 16,
            lr: 1e-4,
            epochs: 50,
            batch_size: 8,
            loss: SegLoss::Dice,
            dice_eps: DEFAULT_DICE_EPS,
            validation_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.encoder_width == 0 {
            return Err(Error::InvalidConfig("batch_size and encoder_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SegCheckpoint {
    net: SegNet,
    params: ParamSet<f32>,
    pub in_channels: usize,
    pub width: usize,
    pub epoch: usize,
    pub seed: u64,
    /// Loss used for selection at `epoch`.
    pub loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: SegArch,
    in_channels: usize,
    width: usize,
    epoch: usize,
    seed: u64,
    loss: f64,
}

fn build(model: SegArch, in_channels: usize, width: usize, seed: u64) -> Result<(SegNet, ParamSet<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let net = SegNet::build(model, in_channels, width, &mut ps, &mut rng)?;
    Ok((net, ps))
}

impl SegCheckpoint {
    pub fn arch(&self) -> SegArch {
        self.net.arch()
    }

    /// Foreground probabilities `[N, 1, H, W]`.
    pub fn predict_probs(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape([0, self.in_channels, 0, 0], s));
        }
        let f = self.arch().size_factor();
        for &d in &s[2..] {
            if d % f != 0 {
                return Err(Error::IndivisibleSize { size: d, factor: f });
            }
        }
        let n = s[0];
        let mut out = Vec::with_capacity(n * s[2] * s[3]);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let items: Vec<&[f32]> = (start..(start + EVAL_CHUNK).min(n)).map(|i| images.batch_item(i)).collect();
            let mut g = Graph::inference();
            let x = g.constant(Tensor::stack(&items, &s[1..]));
            let logits = self.net.forward(&mut g, &self.params, x);
            let p = g.sigmoid(logits);
            out.extend(g.take_value(p).into_data());
        }
        Ok(Tensor::from_vec(&[n, 1, s[2], s[3]], out))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = Header {
            model: self.arch(),
            in_channels: self.in_channels,
            width: self.width,
            epoch: self.epoch,
            seed: self.seed,
            loss: self.loss,
        };
        checkpoint::encode(SEGMENTER_MAGIC, &h, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let d = checkpoint::decode::<Header>(SEGMENTER_MAGIC, bytes)?;
        let h = d.header;
        let (net, mut params) =
            build(h.model, h.in_channels, h.width, 0).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        checkpoint::assign_params(&mut params, &d.params)?;
        Ok(Self {
            net,
            params,
            in_channels: h.in_channels,
            width: h.width,
            epoch: h.epoch,
            seed: h.seed,
            loss: h.loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// Anything that turns images into binary masks.
pub trait MaskPredictor {
    fn predict_masks(&self, images: &[&ImageTensor], threshold: f64) -> Result<Vec<BinaryMask>>;
}

impl MaskPredictor for SegCheckpoint {
    fn predict_masks(&self, images: &[&ImageTensor], threshold: f64) -> Result<Vec<BinaryMask>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let probs = self.predict_probs(&images_to_tensor(images))?;
        let (n, _, h, w) = probs.dims4();
        let t = threshold as f32;
        Ok((0..n)
            .map(|i| {
                let p = probs.batch_item(i);
                BinaryMask::from_fn(h, w, |y, x| p[y * w + x] >= t)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    pub best: SegCheckpoint,
    pub history: Vec<EpochRecord>,
}

fn batch_dice(net: &SegNet, ps: &ParamSet<f32>, x: Tensor<f32>, y: &Tensor<f32>, eps: f64) -> f64 {
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let logits = net.forward(&mut g, ps, xv);
    let l = g.dice_loss_with_logits(logits, y, eps);
    g.value(l).item() as f64
}

pub fn train_segmenter(train: &PairedDataset, cfg: &SegTrainConfig) -> Result<SegTraining> {
    cfg.validate()?;
    train.require_non_empty()?;
    let (train, val) = if cfg.validation_fraction > 0.0 {
        let n_val = ((train.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, train.len() - 1);
        let mut parts = split_dataset(train, &[train.len() - n_val, n_val], cfg.seed)?;
        let v = parts.pop().unwrap();
        (parts.pop().unwrap(), Some(v))
    } else {
        (train.clone(), None)
    };
    let in_channels = train.image_channels().unwrap_or(3);
    let (net, mut params) = build(cfg.model, in_channels, cfg.encoder_width, cfg.seed)?;
    let images = images_to_tensor(&train.images());
    let targets = masks_to_unit_tensor(&train.masks());
    let val_tensors = val
        .as_ref()
        .map(|v| (images_to_tensor(&v.images()), masks_to_unit_tensor(&v.masks())));
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9_0000);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut step = 0u64;
    let mut last_finite = None;
    info!(
        "training {} on {n} pairs for {} epochs ({} parameters)",
        cfg.model.name(),
        cfg.epochs,
        params.numel()
    );

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let xs: Vec<&[f32]> = chunk.iter().map(|&i| images.batch_item(i)).collect();
            let ys: Vec<&[f32]> = chunk.iter().map(|&i| targets.batch_item(i)).collect();
            let x = Tensor::stack(&xs, &images.shape()[1..]);
            let y = Tensor::stack(&ys, &targets.shape()[1..]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let logits = net.forward(&mut g, &params, xv);
            let lv = g.dice_loss_with_logits(logits, &y, cfg.dice_eps);
            let loss = g.value(lv).item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, last_finite });
            }
            let grads = g.backward(lv);
            opt.step(&mut params, &grads);
            last_finite = Some(loss);
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = val_tensors
            .as_ref()
            .map(|(x, y)| batch_dice(&net, &params, x.clone(), y, cfg.dice_eps));
        let score = val_loss.unwrap_or(train_loss);
        debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:?}");
        if best.as_ref().map_or(true, |(b, _, _)| score < *b) {
            best = Some((score, epoch, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }
    let (loss, epoch, params) = best.expect("at least one epoch ran");
    Ok(SegTraining {
        best: SegCheckpoint {
            net,
            params,
            in_channels,
            width: cfg.encoder_width,
            epoch,
            seed: cfg.seed,
            loss,
        },
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAudit {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: SegMetricSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEvaluation {
    pub micro: SegMetricSet,
    pub imagewise: SegMetricSet,
    pub per_image: Vec<ImageAudit>,
}

/// Scores predictions against the dataset masks, in dataset order.
pub fn score_predictions(preds: &[BinaryMask], test: &PairedDataset) -> Result<SegEvaluation> {
    test.require_non_empty()?;
    if preds.len() != test.len() {
        return Err(Error::shape(test.len(), preds.len()));
    }
    let per_image = preds
        .iter()
        .zip(test.samples())
        .map(|(p, s)| {
            let counts = confusion_counts(p, &s.mask)?;
            Ok(ImageAudit {
                id: s.id.clone(),
                counts,
                metrics: metrics_from_counts(&counts),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<_> = per_image.iter().map(|a| a.counts).collect();
    Ok(SegEvaluation {
        micro: micro_metrics(&counts)?,
        imagewise: micro_imagewise_metrics(&counts)?,
        per_image,
    })
}

pub fn evaluate_segmenter<P: MaskPredictor + ?Sized>(model: &P, test: &PairedDataset, threshold: f64) -> Result<SegEvaluation> {
    test.require_non_empty()?;
    let preds = model.predict_masks(&test.images(), threshold)?;
    score_predictions(&preds, test)
}

#[derive(Serialize)]
struct AuditRow<'a> {
    id: &'a str,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
    iou: f64,
    f1: f64,
    accuracy: f64,
    precision: f64,
}

pub fn write_audit_csv(per_image: &[ImageAudit], path: &Path) -> Result<()> {
    let malformed = |e: csv::Error| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(malformed)?;
    for a in per_image {
        w.serialize(AuditRow {
            id: &a.id,
            tp: a.counts.tp,
            fp: a.counts.fp,
            fn_: a.counts.fn_,
            tn: a.counts.tn,
            iou: a.metrics.iou,
            f1: a.metrics.f1,
            accuracy: a.metrics.accuracy,
            precision: a.metrics.precision,
        })
        .map_err(malformed)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PairedSample, Provenance};

    fn pairs(n: usize, side: usize) -> PairedDataset {
        let samples = (0..n)
            .map(|i| {
                let r = 3 + i % 4;
                let c = side / 2;
                let mask = BinaryMask::from_fn(side, side, |y, x| {
                    let dy = y as isize - c as isize;
                    let dx = x as isize - (c as isize + i as isize % 3 - 1);
                    (dy * dy + dx * dx) as usize <= r * r
                });
                let mut img = ImageTensor::filled(3, side, side, -0.6);
                for y in 0..side {
                    for x in 0..side {
                        if mask.get(y, x) {
                            for ch in 0..3 {
                                img.data_mut()[(ch * side + y) * side + x] = 0.5 - 0.2 * ch as f32;
                            }
                        }
                    }
                }
                PairedSample::new(img, mask, format!("p{i}"), Provenance::Real).unwrap()
            })
            .collect();
        PairedDataset::new(samples, side).unwrap()
    }

    struct Oracle<'a>(&'a PairedDataset);
    impl MaskPredictor for Oracle<'_> {
        fn predict_masks(&self, _: &[&ImageTensor], _: f64) -> Result<Vec<BinaryMask>> {
            Ok(self.0.masks().into_iter().cloned().collect())
        }
    }

    struct Empty;
    impl MaskPredictor for Empty {
        fn predict_masks(&self, images: &[&ImageTensor], _: f64) -> Result<Vec<BinaryMask>> {
            Ok(images.iter().map(|i| BinaryMask::filled(i.height(), i.width(), false)).collect())
        }
    }

    #[test]
    fn stub_predictors() {
        let ds = pairs(4, 16);
        let ev = evaluate_segmenter(&Oracle(&ds), &ds, DEFAULT_THRESHOLD).unwrap();
        let one = SegMetricSet { iou: 1.0, f1: 1.0, accuracy: 1.0, precision: 1.0 };
        assert_eq!(ev.micro, one);
        assert_eq!(ev.imagewise, one);
        let ev = evaluate_segmenter(&Empty, &ds, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((ev.micro.iou, ev.micro.f1, ev.micro.precision), (0.0, 0.0, 0.0));
        let fg: usize = ds.masks().iter().map(|m| m.foreground()).sum();
        let bg = 1.0 - fg as f64 / (4.0 * 256.0);
        assert!((ev.micro.accuracy - bg).abs() < 1e-12);
    }

    #[test]
    fn epochs_zero_rejected() {
        let cfg = SegTrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train_segmenter(&pairs(2, 16), &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn every_arch_trains_deterministically() {
        let ds = pairs(4, 16);
        for arch in SegArch::ALL {
            let cfg = SegTrainConfig {
                model: arch,
                encoder_width: 4,
                lr: 1e-3,
                epochs: 3,
                batch_size: 2,
                seed: 1,
                ..Default::default()
            };
            let a = train_segmenter(&ds, &cfg).unwrap();
            let b = train_segmenter(&ds, &cfg).unwrap();
            assert_eq!(a.best.to_bytes(), b.best.to_bytes(), "{}", arch.name());
            let ea = evaluate_segmenter(&a.best, &ds, 0.5).unwrap();
            let eb = evaluate_segmenter(&b.best, &ds, 0.5).unwrap();
            assert_eq!(ea, eb);
            let probs = a.best.predict_probs(&images_to_tensor(&ds.images())).unwrap();
            assert_eq!(probs.shape(), &[4, 1, 16, 16]);
            let best_loss = a.history.iter().map(|h| h.train_loss).fold(f64::INFINITY, f64::min);
            assert_eq!(a.best.loss, best_loss);

            let back = SegCheckpoint::from_bytes(&a.best.to_bytes()).unwrap();
            assert_eq!(evaluate_segmenter(&back, &ds, 0.5).unwrap(), ea);
        }
    }

    #[test]
    fn audit_csv_columns() {
        let ds = pairs(2, 16);
        let ev = evaluate_segmenter(&Empty, &ds, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.csv");
        write_audit_csv(&ev.per_image, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,tp,fp,fn,tn,iou,f1,accuracy,precision\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
