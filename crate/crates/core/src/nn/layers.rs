use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamSet, Real, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    dil: usize,
}

impl Conv2d {
    /// "Same"-padded conv for odd `k` at stride 1.
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with(ps, name, c_in, c_out, k, 1, k / 2, 1, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with<T: Real>(
        ps: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dil: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = ps.add_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], fan_in, rng);
        let b = ps.add_uniform(format!("{name}.bias"), &[c_out], fan_in, rng);
        Self {
            w,
            b,
            stride,
            pad,
            dil,
        }
    }

    /// Zero-initialised output projection.
    pub fn zeroed<T: Real>(ps: &mut ParamSet<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let w = ps.add_const(format!("{name}.weight"), &[c_out, c_in, k, k], 0.0);
        let b = ps.add_const(format!("{name}.bias"), &[c_out], 0.0);
        Self {
            w,
            b,
            stride: 1,
            pad: k / 2,
            dil: 1,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad, self.dil)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.add_uniform(format!("{name}.weight"), &[n_out, n_in], n_in, rng);
        let b = ps.add_uniform(format!("{name}.bias"), &[n_out], n_in, rng);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, channels: usize, max_groups: usize) -> Self {
        let gamma = ps.add_const(format!("{name}.weight"), &[channels], 1.0);
        let beta = ps.add_const(format!("{name}.bias"), &[channels], 0.0);
        Self {
            gamma,
            beta,
            groups: group_count(channels, max_groups),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>, x: Var) -> Var {
        let gm = g.param(ps, self.gamma);
        let bt = g.param(ps, self.beta);
        g.group_norm(x, gm, bt, self.groups, 1e-5)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
