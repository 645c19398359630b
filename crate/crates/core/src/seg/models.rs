use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, GroupNorm, Linear, ParamSet, Real, Var};

const MAX_GROUPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegArch {
    UnetSmall,
    UnetPlusSmall,
    FpnSmall,
    DeeplabLikeSmall,
}

impl SegArch {
    pub const ALL: [SegArch; 4] = [Self::UnetSmall, Self::UnetPlusSmall, Self::FpnSmall, Self::DeeplabLikeSmall];

    pub fn name(&self) -> &'static str {
        match self {
            Self::UnetSmall => "unet_small",
            Self::UnetPlusSmall => "unet_plus_small",
            Self::FpnSmall => "fpn_small",
            Self::DeeplabLikeSmall => "deeplab_like_small",
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_factor(&self) -> usize {
        4
    }
}

impl std::str::FromStr for SegArch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown segmentation model `{s}`")))
    }
}

/// conv3x3 -> GroupNorm -> ReLU, twice.
#[derive(Clone, Debug)]
struct DoubleConv {
    c1: Conv2d,
    n1: GroupNorm,
    c2: Conv2d,
    n2: GroupNorm,
}

impl DoubleConv {
    fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, rng),
            n1: GroupNorm::new(ps, &format!("{name}.norm1"), cout, MAX_GROUPS),
            c2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, rng),
            n2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, MAX_GROUPS),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let h = self.c1.forward(g, ps, x);
        let h = self.n1.forward(g, ps, h);
        let h = g.relu(h);
        let h = self.c2.forward(g, ps, h);
        let h = self.n2.forward(g, ps, h);
        g.relu(h)
    }
}

/// Three-level encoder shared by all heads: full, 1/2 and 1/4 resolution.
#[derive(Clone, Debug)]
struct Encoder {
    blocks: [DoubleConv; 3],
}

impl Encoder {
    fn new<T: Real>(ps: &mut ParamSet<T>, cin: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            blocks: [
                DoubleConv::new(ps, "enc0", cin, w, rng),
                DoubleConv::new(ps, "enc1", w, 2 * w, rng),
                DoubleConv::new(ps, "enc2", 2 * w, 4 * w, rng),
            ],
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> [Var; 3] {
        let e0 = self.blocks[0].forward(g, ps, x);
        let p = g.avg_pool(e0, 2);
        let e1 = self.blocks[1].forward(g, ps, p);
        let p = g.avg_pool(e1, 2);
        let e2 = self.blocks[2].forward(g, ps, p);
        [e0, e1, e2]
    }
}

#[derive(Clone, Debug)]
enum Head {
    Unet {
        dec1: DoubleConv,
        dec0: DoubleConv,
    },
    /// Nested skips: x01 = f(e0, up e1), x11 = f(e1, up e2), x02 = f(e0, x01, up x11).
    UnetPlus {
        x01: DoubleConv,
        x11: DoubleConv,
        x02: DoubleConv,
    },
    Fpn {
        lateral: [Conv2d; 3],
        smooth: DoubleConv,
    },
    Deeplab {
        branches: [Conv2d; 3],
        image_pool: Linear,
        project: Conv2d,
        low: Conv2d,
        fuse: DoubleConv,
    },
}

/// Binary segmentation network producing one logit channel.
#[derive(Clone, Debug)]
pub struct SegNet {
    arch: SegArch,
    encoder: Encoder,
    head: Head,
    out: Conv2d,
}

impl SegNet {
    pub fn build<T: Real>(arch: SegArch, in_channels: usize, width: usize, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width == 0 || in_channels == 0 {
            return Err(Error::InvalidArch("segmenter width and channels must be positive".into()));
        }
        let w = width;
        let encoder = Encoder::new(ps, in_channels, w, rng);
        let (head, out_c) = match arch {
            SegArch::UnetSmall => (
                Head::Unet {
                    dec1: DoubleConv::new(ps, "dec1", 6 * w, 2 * w, rng),
                    dec0: DoubleConv::new(ps, "dec0", 3 * w, w, rng),
                },
                w,
            ),
            SegArch::UnetPlusSmall => (
                Head::UnetPlus {
                    x01: DoubleConv::new(ps, "x01", 3 * w, w, rng),
                    x11: DoubleConv::new(ps, "x11", 6 * w, 2 * w, rng),
                    x02: DoubleConv::new(ps, "x02", 4 * w, w, rng),
                },
                w,
            ),
            SegArch::FpnSmall => (
                Head::Fpn {
                    lateral: [
                        Conv2d::new(ps, "lat0", w, w, 1, rng),
                        Conv2d::new(ps, "lat1", 2 * w, w, 1, rng),
                        Conv2d::new(ps, "lat2", 4 * w, w, 1, rng),
                    ],
                    smooth: DoubleConv::new(ps, "smooth", w, w, rng),
                },
                w,
            ),
            SegArch::DeeplabLikeSmall => (
                Head::Deeplab {
                    branches: [
                        Conv2d::new(ps, "aspp.b0", 4 * w, w, 1, rng),
                        Conv2d::with(ps, "aspp.b1", 4 * w, w, 3, 1, 2, 2, rng),
                        Conv2d::with(ps, "aspp.b2", 4 * w, w, 3, 1, 3, 3, rng),
                    ],
                    image_pool: Linear::new(ps, "aspp.pool", 4 * w, w, rng),
                    project: Conv2d::new(ps, "aspp.project", 3 * w, w, 1, rng),
                    low: Conv2d::new(ps, "low", w, w, 1, rng),
                    fuse: DoubleConv::new(ps, "fuse", 2 * w, w, rng),
                },
                w,
            ),
        };
        let out = Conv2d::new(ps, "out", out_c, 1, 1, rng);
        Ok(Self { arch, encoder, head, out })
    }

    pub fn arch(&self) -> SegArch {
        self.arch
    }

    /// Logits `[B, 1, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let [e0, e1, e2] = self.encoder.forward(g, ps, x);
        let feat = match &self.head {
            Head::Unet { dec1, dec0 } => {
                let u = g.upsample_nearest(e2, 2);
                let c = g.concat_channels(&[u, e1]);
                let d1 = dec1.forward(g, ps, c);
                let u = g.upsample_nearest(d1, 2);
                let c = g.concat_channels(&[u, e0]);
                dec0.forward(g, ps, c)
            }
            Head::UnetPlus { x01, x11, x02 } => {
                let u = g.upsample_nearest(e1, 2);
                let c = g.concat_channels(&[e0, u]);
                let a = x01.forward(g, ps, c);
                let u = g.upsample_nearest(e2, 2);
                let c = g.concat_channels(&[e1, u]);
                let b = x11.forward(g, ps, c);
                let u = g.upsample_nearest(b, 2);
                let c = g.concat_channels(&[e0, a, u]);
                x02.forward(g, ps, c)
            }
            Head::Fpn { lateral, smooth } => {
                let p2 = lateral[2].forward(g, ps, e2);
                let l1 = lateral[1].forward(g, ps, e1);
                let u = g.upsample_nearest(p2, 2);
                let p1 = g.add(l1, u);
                let l0 = lateral[0].forward(g, ps, e0);
                let u = g.upsample_nearest(p1, 2);
                let p0 = g.add(l0, u);
                smooth.forward(g, ps, p0)
            }
            Head::Deeplab {
                branches,
                image_pool,
                project,
                low,
                fuse,
            } => {
                let outs: Vec<Var> = branches
                    .iter()
                    .map(|b| {
                        let h = b.forward(g, ps, e2);
                        g.relu(h)
                    })
                    .collect();
                let cat = g.concat_channels(&outs);
                let proj = project.forward(g, ps, cat);
                // global context added back per channel
                let pooled = g.global_avg_pool(e2);
                let ctx = image_pool.forward(g, ps, pooled);
                let proj = g.add_channel_bias(proj, ctx);
                let proj = g.relu(proj);
                let up = g.upsample_nearest(proj, 4);
                let l = low.forward(g, ps, e0);
                let l = g.relu(l);
                let c = g.concat_channels(&[up, l]);
                fuse.forward(g, ps, c)
            }
        };
        self.out.forward(g, ps, feat)
    }
}
