use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, GroupNorm, Linear, ParamSet, Real, Tensor, Var};

const MAX_GROUPS: usize = 8;
const MIN_GROUP_WIDTH: usize = 8;

/// Normalization with at least eight channels per group. One channel per
/// group removes every channel's spatial mean, and the net then cannot
/// predict the low-frequency part of the noise.
fn norm<T: Real>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> GroupNorm {
    GroupNorm::new(ps, name, channels, (channels / MIN_GROUP_WIDTH).clamp(1, MAX_GROUPS))
}

/// Sinusoidal embedding: `sin(t w_i)` for the first half, `cos(t w_i)` for the
/// second, with `w_i = 10000^(-2i/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidDim(dim));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = t as f64 * w;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

/// Embeddings for a batch of timesteps as a `[B, dim]` tensor.
pub fn embedding_batch<T: Real>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t, dim)?.into_iter().map(T::from_f64));
    }
    Ok(Tensor::from_vec(&[ts.len(), dim], data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub base_channels: usize,
    /// Number of stride-2 downsamplings.
    pub depth: usize,
    pub in_channels: usize,
    pub cond_channels: usize,
    pub embed_dim: usize,
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArch(m.to_string()));
        if self.base_channels == 0 {
            return bad("base_channels must be positive");
        }
        if !(1..=4).contains(&self.depth) {
            return bad("depth must be in 1..=4");
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad("embed_dim must be even and at least 2");
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must survive `depth` halvings.
    pub fn size_factor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, emb: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: norm(ps, &format!("{name}.norm1"), c_in),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            time: Linear::new(ps, &format!("{name}.time"), emb, c_out, rng),
            norm2: norm(ps, &format!("{name}.norm2"), c_out),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, rng)),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, emb: Var) -> Var {
        let h = self.norm1.forward(g, ps, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h);
        let te = self.time.forward(g, ps, emb);
        let h = g.add_channel_bias(h, te);
        let h = self.norm2.forward(g, ps, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x),
            None => x,
        };
        g.add(s, h)
    }
}

/// Layer layout of the U-Net; parameters live in a separate [`ParamSet`] so
/// one layout serves both the f32 model and f64 gradient checks.
#[derive(Clone, Debug)]
pub struct UNet {
    arch: DenoiserArch,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<Conv2d>,
    dec: Vec<ResBlock>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl UNet {
    pub fn build<T: Real>(arch: DenoiserArch, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let e = arch.embed_dim;
        let time1 = Linear::new(ps, "time.fc1", e, e, rng);
        let time2 = Linear::new(ps, "time.fc2", e, e, rng);
        let stem = Conv2d::new(ps, "stem", arch.in_channels + arch.cond_channels, arch.width(0), 3, rng);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut c = arch.width(0);
        for l in 0..arch.depth {
            let w = arch.width(l);
            enc.push(ResBlock::new(ps, &format!("enc{l}"), c, w, e, rng));
            down.push(Conv2d::with(ps, &format!("down{l}"), w, w, 3, 2, 1, 1, rng));
            c = w;
        }
        let mid = ResBlock::new(ps, "mid", c, c, e, rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..arch.depth).rev() {
            let w = arch.width(l);
            up.push(Conv2d::new(ps, &format!("up{l}"), c, w, 3, rng));
            dec.push(ResBlock::new(ps, &format!("dec{l}"), 2 * w, w, e, rng));
            c = w;
        }
        let out_norm = norm(ps, "out.norm", c);
        let out = Conv2d::zeroed(ps, "out.conv", c, arch.in_channels, 3);
        Ok(Self {
            arch,
            time1,
            time2,
            stem,
            enc,
            down,
            mid,
            up,
            dec,
            out_norm,
            out,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn check_input(&self, x: &[usize], t: usize, cond: Option<&[usize]>) -> Result<()> {
        let a = &self.arch;
        if x.len() != 4 || x[1] != a.in_channels {
            return Err(Error::shape(format!("[B, {}, H, W]", a.in_channels), format!("{x:?}")));
        }
        if t != x[0] {
            return Err(Error::shape(x[0], t));
        }
        let f = a.size_factor();
        for &s in &x[2..] {
            if s == 0 || s % f != 0 {
                return Err(Error::IndivisibleSize { size: s, factor: f });
            }
        }
        match (a.cond_channels, cond) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::InvalidConfig("unconditional model given a condition".into())),
            (_, None) => Err(Error::MissingCondition),
            (c, Some(s)) => {
                let want = [x[0], c, x[2], x[3]];
                if s != want {
                    return Err(Error::shape(format!("{want:?}"), format!("{s:?}")));
                }
                Ok(())
            }
        }
    }

    /// `emb` holds raw sinusoidal embeddings `[B, embed_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var, emb: Var, cond: Option<Var>) -> Var {
        let e = self.time1.forward(g, ps, emb);
        let e = g.silu(e);
        let e = self.time2.forward(g, ps, e);
        let e = g.silu(e);

        let input = match cond {
            Some(c) => g.concat_channels(&[x, c]),
            None => x,
        };
        let mut h = self.stem.forward(g, ps, input);
        let mut skips = Vec::with_capacity(self.arch.depth);
        for (block, down) in self.enc.iter().zip(&self.down) {
            h = block.forward(g, ps, h, e);
            skips.push(h);
            h = down.forward(g, ps, h);
        }
        h = self.mid.forward(g, ps, h, e);
        for ((up, block), skip) in self.up.iter().zip(&self.dec).zip(skips.into_iter().rev()) {
            h = g.upsample_nearest(h, 2);
            h = up.forward(g, ps, h);
            h = g.concat_channels(&[h, skip]);
            h = block.forward(g, ps, h, e);
        }
        let h = self.out_norm.forward(g, ps, h);
        let h = g.silu(h);
        self.out.forward(g, ps, h)
    }
}

/// A U-Net noise predictor with its f32 parameters.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    net: UNet,
    params: ParamSet<f32>,
}

pub fn init_denoiser(arch: DenoiserArch, seed: u64) -> Result<DenoiserModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let net = UNet::build(arch, &mut params, &mut rng)?;
    Ok(DenoiserModel { net, params })
}

impl DenoiserModel {
    pub fn arch(&self) -> &DenoiserArch {
        self.net.arch()
    }
    pub fn net(&self) -> &UNet {
        &self.net
    }
    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }
    pub fn parameter_vector(&self) -> Vec<f32> {
        self.params.flatten()
    }
}

impl Denoiser for DenoiserModel {
    fn in_channels(&self) -> usize {
        self.arch().in_channels
    }

    fn cond_channels(&self) -> usize {
        self.arch().cond_channels
    }

    fn predict_noise(&self, x_t: &Tensor<f32>, t: &[usize], cond: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        self.net.check_input(x_t.shape(), t.len(), cond.map(Tensor::shape))?;
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let emb = g.constant(embedding_batch(t, self.arch().embed_dim)?);
        let c = cond.map(|c| g.constant(c.clone()));
        let out = self.net.forward(&mut g, &self.params, x, emb, c);
        Ok(g.take_value(out))
    }
}
