//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op evaluates eagerly and, when gradients are tracked, records a
//! closure that maps the output gradient to input gradients. `backward`
//! walks the tape once in reverse creation order, which is a valid
//! topological order because nodes can only reference earlier nodes.

use super::params::{ParamId, ParamSet};
use super::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&[Node<T>], &[T], &mut GradSlots<T>)>;

pub struct Node<T> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
    requires_grad: bool,
}

/// Gradient accumulators handed to backward closures.
pub struct GradSlots<T> {
    slots: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
}

impl<T: Real> GradSlots<T> {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var, len: usize) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    track: bool,
    param_vars: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf variable (inputs and parameters only).
    pub fn var(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + off - pad` lies inside the row.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        let shift = off as isize - self.pad as isize;
        let s = self.stride as isize;
        // smallest ox with ox*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift + s - 1) / s) as usize };
        // largest ox with ox*s + shift <= w - 1
        let last = self.w as isize - 1 - shift;
        let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
        (lo.min(self.w_out), hi.min(self.w_out).max(lo.min(self.w_out)))
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = g.valid_cols(kx * g.dil);
                let shift = (kx * g.dil) as isize - g.pad as isize;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let start = (lo as isize * g.stride as isize + shift) as usize;
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = src[start + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = g.valid_cols(kx * g.dil);
                if lo >= hi {
                    continue;
                }
                let shift = (kx * g.dil) as isize - g.pad as isize;
                let start = (lo as isize * g.stride as isize + shift) as usize;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[start..start + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            drow[start + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
            param_vars: Vec::new(),
        }
    }

    /// A graph for inference: no closures, no saved activations.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], back: impl Fn(&[Node<T>], &[T], &mut GradSlots<T>) + 'static) -> Var {
        let requires_grad = self.track && inputs.iter().any(|&v| self.needs(v));
        let back: Option<BackFn<T>> = if requires_grad {
            Some(Box::new(back))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            back,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input. Set `requires_grad` to read its gradient back in tests.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            back: None,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Places a parameter on the tape once per graph.
    pub fn param(&mut self, set: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.input(set.tensor(id).clone(), true);
        self.param_vars.push((id, v));
        v
    }

    pub fn backward(self, loss: Var) -> Gradients<T> {
        let Graph {
            nodes, param_vars, ..
        } = self;
        let n = nodes.len();
        let mut grads = GradSlots {
            slots: (0..n).map(|_| None).collect(),
            needs: nodes.iter().map(|nd| nd.requires_grad).collect(),
        };
        if nodes[loss.0].requires_grad {
            grads.slots[loss.0] = Some(vec![T::one(); nodes[loss.0].value.numel()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(back) = nodes[i].back.as_ref() else {
                continue;
            };
            if let Some(gout) = grads.slots[i].take() {
                back(&nodes, &gout, &mut grads);
            }
        }
        let max_pid = param_vars.iter().map(|(p, _)| p.0 + 1).max().unwrap_or(0);
        let mut params: Vec<Option<Vec<T>>> = (0..max_pid).map(|_| None).collect();
        for (pid, v) in &param_vars {
            params[pid.0] = Some(
                grads.slots[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.numel()]),
            );
        }
        Gradients {
            slots: grads.slots,
            params,
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let out: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_vec(&shape, out), &[a, b], move |_, g, gs| {
            for v in [a, b] {
                if let Some(d) = gs.slot(v, g.len()) {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g;
                    }
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |_, g, gs| {
            if let Some(d) = gs.slot(a, g.len()) {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += g * s;
                }
            }
        })
    }

    /// `x[B,C,H,W] + v[B,C]` broadcast over the spatial dims.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(v), &[b, c], "add_channel_bias: bias shape");
        let hw = h * w;
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let add = vv[i];
            for o in chunk {
                *o += add;
            }
        }
        self.push(out, &[x, v], move |_, g, gs| {
            if let Some(d) = gs.slot(x, g.len()) {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += g;
                }
            }
            if let Some(d) = gs.slot(v, b * c) {
                for (i, chunk) in g.chunks(hw).enumerate() {
                    d[i] += chunk.iter().copied().sum::<T>();
                }
            }
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, &[x], move |nodes, g, gs| {
            let xv = nodes[x.0].value.data();
            if let Some(d) = gs.slot(x, g.len()) {
                for ((d, &g), &xv) in d.iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(xv);
                    *d += g * s * (T::one() + xv * (T::one() - s));
                }
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, &[x], move |nodes, g, gs| {
            let xv = nodes[x.0].value.data();
            if let Some(d) = gs.slot(x, g.len()) {
                for ((d, &g), &xv) in d.iter_mut().zip(g).zip(xv) {
                    if xv > T::zero() {
                        *d += g;
                    }
                }
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let y = out.clone();
        self.push(out, &[x], move |_, g, gs| {
            if let Some(d) = gs.slot(x, g.len()) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * y * (T::one() - y);
                }
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::from_f64(v.to_f64().tanh()));
        let y = out.clone();
        self.push(out, &[x], move |_, g, gs| {
            if let Some(d) = gs.slot(x, g.len()) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * (T::one() - y * y);
                }
            }
        })
    }

    // ---- shape ops ----

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (b, _, h, w) = self.value(parts[0]).dims4();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pb, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pb, ph, pw), (b, h, w), "concat: spatial mismatch");
                pc
            })
            .collect();
        let c_total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * c_total * hw);
        for bi in 0..b {
            for &p in parts {
                out.extend_from_slice(self.value(p).batch_item(bi));
            }
        }
        let parts_v = parts.to_vec();
        self.push(
            Tensor::from_vec(&[b, c_total, h, w], out),
            parts,
            move |_, g, gs| {
                let mut off = 0;
                for (&p, &c) in parts_v.iter().zip(&chans) {
                    if let Some(d) = gs.slot(p, b * c * hw) {
                        for bi in 0..b {
                            let src = &g[bi * c_total * hw + off * hw..][..c * hw];
                            let dst = &mut d[bi * c * hw..(bi + 1) * c * hw];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += c;
                }
            },
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for (plane, src) in out.chunks_mut(ho * wo).zip(xv.chunks(h * w)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    plane[oy * wo + ox] = src[(oy / factor) * w + ox / factor];
                }
            }
        }
        self.push(Tensor::from_vec(&[b, c, ho, wo], out), &[x], move |_, g, gs| {
            if let Some(d) = gs.slot(x, b * c * h * w) {
                for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[(oy / factor) * w + ox / factor] += src[oy * wo + ox];
                        }
                    }
                }
            }
        })
    }

    /// Non-overlapping average pooling with window = stride = `f`.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert!(h % f == 0 && w % f == 0, "avg_pool: size not divisible");
        let (ho, wo) = (h / f, w / f);
        let inv = T::from_f64(1.0 / (f * f) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for (dst, src) in out.chunks_mut(ho * wo).zip(xv.chunks(h * w)) {
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / f) * wo + xx / f] += src[y * w + xx] * inv;
                }
            }
        }
        self.push(Tensor::from_vec(&[b, c, ho, wo], out), &[x], move |_, g, gs| {
            if let Some(d) = gs.slot(x, b * c * h * w) {
                for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] += src[(y / f) * wo + xx / f] * inv;
                        }
                    }
                }
            }
        })
    }

    /// Mean over the spatial dims: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::from_vec(&[b, c], out), &[x], move |_, g, gs| {
            if let Some(d) = gs.slot(x, b * c * hw) {
                for (dst, &gv) in d.chunks_mut(hw).zip(g) {
                    for v in dst {
                        *v += gv * inv;
                    }
                }
            }
        })
    }

    // ---- layers ----

    /// 2-D convolution, `x[B,Cin,H,W] * w[Cout,Cin,k,k] (+ b[Cout])`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Var {
        let (bsz, c_in, h, wd) = self.value(x).dims4();
        let (c_out, wc_in, k, k2) = self.value(w).dims4();
        assert_eq!(c_in, wc_in, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let eff = dil * (k - 1) + 1;
        assert!(h + 2 * pad >= eff && wd + 2 * pad >= eff, "conv2d: input too small");
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            dil,
            h_out: (h + 2 * pad - eff) / stride + 1,
            w_out: (wd + 2 * pad - eff) / stride + 1,
        };
        let kk = geom.cols_rows();
        let hw = geom.hw_out();
        let in_per = c_in * h * wd;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); bsz * c_out * hw];
        let keep_cols = self.track && self.needs(w) && !geom.is_pointwise();
        let mut saved = if keep_cols {
            vec![T::zero(); bsz * kk * hw]
        } else {
            Vec::new()
        };
        let mut scratch = if geom.is_pointwise() || keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); kk * hw]
        };
        for bi in 0..bsz {
            let xb = &xv[bi * in_per..(bi + 1) * in_per];
            let cols: &[T] = if geom.is_pointwise() {
                xb
            } else {
                let buf = if keep_cols {
                    &mut saved[bi * kk * hw..(bi + 1) * kk * hw]
                } else {
                    &mut scratch[..]
                };
                im2col(xb, &geom, buf);
                buf
            };
            let ob = &mut out[bi * c_out * hw..(bi + 1) * c_out * hw];
            T::gemm(c_out, kk, hw, wv, kk as isize, 1, cols, hw as isize, 1, T::zero(), ob, hw as isize, 1);
        }
        if let Some(bv) = bias {
            assert_eq!(self.shape(bv), &[c_out], "conv2d: bias shape");
            let bd = self.value(bv).data();
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let add = bd[i % c_out];
                for o in chunk {
                    *o += add;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            Tensor::from_vec(&[bsz, c_out, geom.h_out, geom.w_out], out),
            &inputs,
            move |nodes, g, gs| {
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                if let Some(bv) = bias {
                    if let Some(db) = gs.slot(bv, c_out) {
                        for (i, chunk) in g.chunks(hw).enumerate() {
                            db[i % c_out] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(dw) = gs.slot(w, c_out * kk) {
                    let mut tmp = Vec::new();
                    for bi in 0..bsz {
                        let gb = &g[bi * c_out * hw..(bi + 1) * c_out * hw];
                        let cols: &[T] = if geom.is_pointwise() {
                            &xv[bi * in_per..(bi + 1) * in_per]
                        } else if keep_cols {
                            &saved[bi * kk * hw..(bi + 1) * kk * hw]
                        } else {
                            tmp.resize(kk * hw, T::zero());
                            im2col(&xv[bi * in_per..(bi + 1) * in_per], &geom, &mut tmp);
                            &tmp
                        };
                        // dW[Cout,K] += g_b[Cout,HW] . cols^T
                        T::gemm(c_out, hw, kk, gb, hw as isize, 1, cols, 1, hw as isize, T::one(), dw, kk as isize, 1);
                    }
                }
                if let Some(dx) = gs.slot(x, bsz * in_per) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    for bi in 0..bsz {
                        let gb = &g[bi * c_out * hw..(bi + 1) * c_out * hw];
                        let dxb = &mut dx[bi * in_per..(bi + 1) * in_per];
                        if geom.is_pointwise() {
                            T::gemm(kk, c_out, hw, wv, 1, kk as isize, gb, hw as isize, 1, T::one(), dxb, hw as isize, 1);
                        } else {
                            T::gemm(kk, c_out, hw, wv, 1, kk as isize, gb, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                            col2im_add(&dcols, &geom, dxb);
                        }
                    }
                }
            },
        )
    }

    /// `x[B,In] . w[Out,In]^T + b[Out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let (bsz, n_in) = self.value(x).dims2();
        let (n_out, w_in) = self.value(w).dims2();
        assert_eq!(n_in, w_in, "linear: feature mismatch");
        let mut out = vec![T::zero(); bsz * n_out];
        T::gemm(
            bsz,
            n_in,
            n_out,
            self.value(x).data(),
            n_in as isize,
            1,
            self.value(w).data(),
            1,
            n_in as isize,
            T::zero(),
            &mut out,
            n_out as isize,
            1,
        );
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(n_out) {
                for (o, &b) in row.iter_mut().zip(bd) {
                    *o += b;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(Tensor::from_vec(&[bsz, n_out], out), &inputs, move |nodes, g, gs| {
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            if let Some(bv) = bias {
                if let Some(db) = gs.slot(bv, n_out) {
                    for row in g.chunks(n_out) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            if let Some(dw) = gs.slot(w, n_out * n_in) {
                T::gemm(n_out, bsz, n_in, g, 1, n_out as isize, xv, n_in as isize, 1, T::one(), dw, n_in as isize, 1);
            }
            if let Some(dx) = gs.slot(x, bsz * n_in) {
                T::gemm(bsz, n_out, n_in, g, n_out as isize, 1, wv, n_in as isize, 1, T::one(), dx, n_in as isize, 1);
            }
        })
    }

    /// Group normalization with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        let cpg = c / groups;
        let hw = h * w;
        let n = cpg * hw;
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps = T::from_f64(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); b * groups];
        for (gi, (src, dst)) in xv.chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = src.iter().copied().sum::<T>() * inv_n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let mut out = vec![T::zero(); xv.len()];
        for (ci, (o, xh)) in out.chunks_mut(hw).zip(xhat.chunks(hw)).enumerate() {
            let ch = ci % c;
            for (o, &v) in o.iter_mut().zip(xh) {
                *o = v * gv[ch] + bv[ch];
            }
        }
        self.push(
            Tensor::from_vec(&[b, c, h, w], out),
            &[x, gamma, beta],
            move |nodes, g, gs| {
                let gv = nodes[gamma.0].value.data();
                if let Some(dg) = gs.slot(gamma, c) {
                    for (ci, (gc, xh)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        dg[ci % c] += gc.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
                if let Some(db) = gs.slot(beta, c) {
                    for (ci, gc) in g.chunks(hw).enumerate() {
                        db[ci % c] += gc.iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = gs.slot(x, b * c * hw) {
                    let mut dxhat = vec![T::zero(); n];
                    for gi in 0..b * groups {
                        let base = gi * n;
                        let ch0 = (gi % groups) * cpg;
                        for j in 0..n {
                            dxhat[j] = g[base + j] * gv[ch0 + j / hw];
                        }
                        let xh = &xhat[base..base + n];
                        let s1 = dxhat.iter().copied().sum::<T>();
                        let s2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        let is = inv_std[gi];
                        for j in 0..n {
                            dx[base + j] += is * inv_n * (T::from_f64(n as f64) * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            },
        )
    }

    // ---- losses ----

    /// Mean squared error against a constant target; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Var {
        assert_eq!(self.shape(pred), target.shape(), "mse: shape mismatch");
        let n = T::from_f64(target.numel() as f64);
        let diff: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p - t)
            .collect();
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        self.push(Tensor::scalar(loss), &[pred], move |_, g, gs| {
            let scale = T::from_f64(2.0) * g[0] / n;
            if let Some(d) = gs.slot(pred, diff.len()) {
                for (d, &df) in d.iter_mut().zip(&diff) {
                    *d += df * scale;
                }
            }
        })
    }

    /// Soft Dice loss over all elements, `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`,
    /// where `p = sigmoid(logits)`.
    pub fn dice_loss_with_logits(&mut self, logits: Var, target: &Tensor<T>, eps: f64) -> Var {
        assert_eq!(self.shape(logits), target.shape(), "dice: shape mismatch");
        let eps = T::from_f64(eps);
        let p: Vec<T> = self.value(logits).data().iter().map(|&v| sigmoid(v)).collect();
        let t = target.data().to_vec();
        let inter = p.iter().zip(&t).map(|(&a, &b)| a * b).sum::<T>();
        let denom = p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>() + eps;
        let num = T::from_f64(2.0) * inter + eps;
        let loss = T::one() - num / denom;
        self.push(Tensor::scalar(loss), &[logits], move |_, g, gs| {
            if let Some(d) = gs.slot(logits, p.len()) {
                // dL/dp = -(2 t denom - num) / denom^2
                let two = T::from_f64(2.0);
                let inv = T::one() / (denom * denom);
                for ((d, &pv), &tv) in d.iter_mut().zip(&p).zip(&t) {
                    let dl_dp = -(two * tv * denom - num) * inv;
                    *d += g[0] * dl_dp * pv * (T::one() - pv);
                }
            }
        })
    }
}
