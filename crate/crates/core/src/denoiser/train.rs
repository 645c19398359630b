use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{embedding_batch, init_denoiser, DenoiserArch, DenoiserCheckpoint, LatentRef};
use crate::data::{images_to_tensor, masks_to_signed_tensor, PairedDataset};
use crate::diffusion::{make_schedule, q_sample, Conditioning, DiffusionConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MaskModel,
    ImageModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

/// Learning-rate schedule over `total_steps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to zero at the last step.
    Cosine,
}

impl LrDecay {
    /// Rate for 1-based `step` of `total`.
    pub fn rate(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let frac = (step - 1) as f64 / total as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_decay: LrDecay,
    pub base_channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    /// Smoothing of the logged loss curve.
    pub loss_ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            total_steps: 10_000,
            checkpoint_every: 1_000,
            seed: 0,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_decay: LrDecay::Constant,
            base_channels: 16,
            depth: 2,
            embed_dim: 32,
            loss_ema_decay: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.loss_ema_decay) {
            return bad(format!("loss_ema_decay must be in [0, 1), got {}", self.loss_ema_decay));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }
}

/// Training tensors: diffused inputs `[N, C, H, W]` and optional conditions.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub inputs: Tensor<f32>,
    pub cond: Option<Tensor<f32>>,
}

impl TrainingSet {
    pub fn new(inputs: Tensor<f32>, cond: Option<Tensor<f32>>) -> Result<Self> {
        if inputs.shape().len() != 4 {
            return Err(Error::shape("[N, C, H, W]", inputs.shape()));
        }
        if inputs.shape()[0] == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(c) = &cond {
            let (n, _, h, w) = inputs.dims4();
            if c.shape().len() != 4 || c.shape()[0] != n || c.shape()[2] != h || c.shape()[3] != w {
                return Err(Error::shape(inputs.shape(), c.shape()));
            }
        }
        Ok(Self { inputs, cond })
    }

    /// Masks only, scaled to {-1, +1}.
    pub fn masks(ds: &PairedDataset) -> Result<Self> {
        ds.require_non_empty()?;
        Self::new(masks_to_signed_tensor(&ds.masks()), None)
    }

    /// Images conditioned on their signed masks.
    pub fn images(ds: &PairedDataset) -> Result<Self> {
        ds.require_non_empty()?;
        Self::new(images_to_tensor(&ds.images()), Some(masks_to_signed_tensor(&ds.masks())))
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
        let items: Vec<&[f32]> = idx.iter().map(|&i| t.batch_item(i)).collect();
        Tensor::stack(&items, &t.shape()[1..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub ema: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<DenoiserCheckpoint>,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &DenoiserCheckpoint {
        self.checkpoints.last().expect("training emits at least one checkpoint")
    }
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for p in curve {
        w.serialize(p).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains a pixel-space mask or image model on `ds`.
pub fn train_denoiser(ds: &PairedDataset, which: ModelKind, dcfg: &DiffusionConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    let set = match which {
        ModelKind::MaskModel => TrainingSet::masks(ds)?,
        ModelKind::ImageModel => TrainingSet::images(ds)?,
    };
    train_on(&set, which, dcfg, tcfg, None)
}

/// Trains on prepared tensors; `latent` records the autoencoder when the
/// inputs are latent codes.
pub fn train_on(
    set: &TrainingSet,
    which: ModelKind,
    dcfg: &DiffusionConfig,
    tcfg: &TrainConfig,
    latent: Option<LatentRef>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let sched = make_schedule(dcfg)?;
    match (which, dcfg.conditioning, &set.cond) {
        (ModelKind::MaskModel, Conditioning::None, None) => {}
        (ModelKind::ImageModel, Conditioning::MaskConcat, Some(_)) => {}
        (ModelKind::ImageModel, Conditioning::MaskConcat, None) => return Err(Error::MissingCondition),
        _ => {
            return Err(Error::InvalidConfig(format!(
                "{which:?} is incompatible with conditioning {:?}",
                dcfg.conditioning
            )))
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let (n, c, h, w) = set.inputs.dims4();
    let arch = DenoiserArch {
        base_channels: tcfg.base_channels,
        depth: tcfg.depth,
        in_channels: c,
        cond_channels: set.cond.as_ref().map_or(0, |t| t.shape()[1]),
        embed_dim: tcfg.embed_dim,
    };
    let mut model = init_denoiser(arch, tcfg.seed)?;
    let sample_hw = [h, w];
    let cond_shape = [1, arch.cond_channels, h, w];
    model.net().check_input(&[1, c, h, w], 1, set.cond.as_ref().map(|_| &cond_shape[..]))?;
    let mut opt = Adam::new(tcfg.adam(), model.params());
    // Separate stream from the initializer so changing the arch does not
    // shift the data order.
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_da7a);

    info!(
        "training {which:?}: {n} items of {c}x{h}x{w}, {} parameters, {} steps",
        model.params().numel(),
        tcfg.total_steps
    );

    let bs = tcfg.batch_size;
    let t_max = sched.timesteps();
    let mut curve = Vec::with_capacity(tcfg.total_steps as usize);
    let mut checkpoints = Vec::new();
    let mut ema: Option<f64> = None;
    let mut last_finite = None;

    for step in 1..=tcfg.total_steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
        let ts: Vec<usize> = (0..bs).map(|_| rng.gen_range(1..=t_max)).collect();
        let x0 = TrainingSet::gather(&set.inputs, &idx);
        let noise_data = (0..x0.numel()).map(|_| rng.sample(StandardNormal)).collect();
        let noise = Tensor::from_vec(x0.shape(), noise_data);
        let x_t = q_sample(&x0, &ts, &noise, &sched)?;

        let mut g = Graph::new();
        let xv = g.constant(x_t);
        let ev = g.constant(embedding_batch(&ts, arch.embed_dim)?);
        let cv = set.cond.as_ref().map(|cd| g.constant(TrainingSet::gather(cd, &idx)));
        let pred = model.net().forward(&mut g, model.params(), xv, ev, cv);
        let lv = g.mse(pred, &noise);
        let loss = g.value(lv).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite });
        }
        let grads = g.backward(lv);
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite });
        }
        opt.set_lr(tcfg.lr_decay.rate(tcfg.learning_rate, step, tcfg.total_steps));
        opt.step(model.params_mut(), &grads);
        last_finite = Some(loss);

        let e = match ema {
            None => loss,
            Some(prev) => tcfg.loss_ema_decay * prev + (1.0 - tcfg.loss_ema_decay) * loss,
        };
        ema = Some(e);
        curve.push(CurvePoint { step, loss, ema: e });

        if step % tcfg.checkpoint_every == 0 || step == tcfg.total_steps {
            debug!("step {step}: loss {loss:.5} ema {e:.5}");
            checkpoints.push(DenoiserCheckpoint {
                kind: which,
                model: model.clone(),
                diffusion: dcfg.clone(),
                step,
                seed: tcfg.seed,
                latent: latent.clone(),
                sample_hw,
            });
        }
    }
    Ok(TrainOutcome { checkpoints, curve })
}

/// Writes every checkpoint as `<dir>/step-<step>.ckpt`, returning the paths.
pub fn save_all(outcome: &TrainOutcome, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for ck in &outcome.checkpoints {
        let p = dir.join(format!("{}.ckpt", ck.id()));
        ck.save(&p)?;
        paths.push(p);
    }
    let curve = dir.join("training_curve.csv");
    write_curve_csv(&outcome.curve, &curve)?;
    let mut f = std::fs::File::create(dir.join("checkpoints.txt")).map_err(|e| Error::io(dir, e))?;
    for p in &paths {
        writeln!(f, "{}", p.display()).map_err(|e| Error::io(dir, e))?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BinaryMask, ImageTensor, PairedSample, Provenance};
    use crate::diffusion::ScheduleKind;

    #[test]
    fn cosine_decay_runs_from_base_towards_zero() {
        let d = LrDecay::Cosine;
        assert_eq!(d.rate(1e-3, 1, 100), 1e-3);
        assert!((d.rate(1e-3, 51, 100) - 5e-4).abs() < 1e-12);
        assert!(d.rate(1e-3, 100, 100) < 1e-6);
        assert_eq!(LrDecay::Constant.rate(1e-3, 100, 100), 1e-3);
    }

    fn blob_dataset(n: usize, size: usize) -> PairedDataset {
        let samples = (0..n)
            .map(|i| {
                let cx = (i * 3 % size) as f32;
                let mask = BinaryMask::from_fn(size, size, |y, x| {
                    let dx = x as f32 - cx;
                    let dy = y as f32 - size as f32 / 2.0;
                    dx * dx + dy * dy < (size * size / 8) as f32
                });
                let img = ImageTensor::filled(1, size, size, -0.5);
                PairedSample::new(img, mask, format!("s{i}"), Provenance::Real).unwrap()
            })
            .collect();
        PairedDataset::new(samples, size).unwrap()
    }

    fn small_cfg(steps: u64) -> (DiffusionConfig, TrainConfig) {
        let d = DiffusionConfig {
            schedule: ScheduleKind::Cosine,
            timesteps: 50,
            ..Default::default()
        };
        let t = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 4,
            total_steps: steps,
            checkpoint_every: 10,
            seed: 7,
            base_channels: 4,
            embed_dim: 8,
            ..Default::default()
        };
        (d, t)
    }

    #[test]
    fn zero_steps_rejected() {
        let ds = blob_dataset(4, 8);
        let (d, mut t) = small_cfg(0);
        assert!(matches!(train_denoiser(&ds, ModelKind::MaskModel, &d, &t), Err(Error::InvalidConfig(_))));
        t.total_steps = 1;
        t.learning_rate = 0.0;
        assert!(matches!(train_denoiser(&ds, ModelKind::MaskModel, &d, &t), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn conditioning_must_match_kind() {
        let ds = blob_dataset(4, 8);
        let (d, t) = small_cfg(2);
        assert!(train_denoiser(&ds, ModelKind::ImageModel, &d, &t).is_err());
        let dc = DiffusionConfig {
            conditioning: Conditioning::MaskConcat,
            ..d
        };
        let out = train_denoiser(&ds, ModelKind::ImageModel, &dc, &t).unwrap();
        assert_eq!(out.final_checkpoint().model.arch().cond_channels, 1);
    }

    #[test]
    fn checkpoints_and_determinism() {
        let ds = blob_dataset(6, 8);
        let (d, t) = small_cfg(25);
        let a = train_denoiser(&ds, ModelKind::MaskModel, &d, &t).unwrap();
        let steps: Vec<u64> = a.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
        assert_eq!(a.curve.len(), 25);
        let b = train_denoiser(&ds, ModelKind::MaskModel, &d, &t).unwrap();
        assert_eq!(
            a.final_checkpoint().model.parameter_vector(),
            b.final_checkpoint().model.parameter_vector()
        );
        assert_eq!(a.final_checkpoint().to_bytes(), b.final_checkpoint().to_bytes());
    }

    #[test]
    fn loss_ema_decreases() {
        let ds = blob_dataset(8, 8);
        let (d, t) = small_cfg(300);
        let out = train_denoiser(&ds, ModelKind::MaskModel, &d, &t).unwrap();
        let first = out.curve[0].ema;
        let last = out.curve.last().unwrap().ema;
        assert!(last < first, "ema {first} -> {last}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let inputs = Tensor::from_vec(&[1, 1, 8, 8], vec![f32::NAN; 64]);
        let set = TrainingSet::new(inputs, None).unwrap();
        let (d, t) = small_cfg(3);
        let r = train_on(&set, ModelKind::MaskModel, &d, &t, None);
        assert!(matches!(r, Err(Error::NonFiniteLoss { step: 1, last_finite: None })));
    }
}
