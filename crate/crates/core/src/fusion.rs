//! Correlation fusion network.
//!
//! Per level: a separable 4D convolution (query axes, then support axes) with
//! four output channels, mean/max squeezing over the support axes, and a
//! bilinear resize to the finest level. The concatenated maps go through two
//! fusion convolutions and a two-layer decoder ending in a sigmoid. The same
//! parameters produce the foreground head (from `corr_f`) and the background
//! head (from `corr_b`).
//!
//! Everything runs in `f64` internally; the backward pass is written out by
//! hand.

use std::sync::Arc;

use crate::conv::{conv3x3_backward, conv3x3_forward, tap_range};
use crate::error::{Error, Result};
use crate::objectives::{bce_f64, bce_grad_f64, relative_error};
use crate::rng;
use crate::tensor::{ResizePlan, Tensor};

pub const SEP_CHANNELS: usize = 4;
pub const SQUEEZE_CHANNELS: usize = 2 * SEP_CHANNELS;
pub const HIDDEN: usize = 16;
pub const DECODER: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sep4dParams {
    /// `[4, 3, 3]` kernels over the query axes.
    pub kq: Tensor,
    /// `[4, 3, 3]` kernels over the support axes.
    pub ks: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[out, in, 3, 3]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn init(cin: usize, cout: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = 1.0 / ((cin * 9) as f64).sqrt();
        Self {
            weight: Tensor::from_parts(vec![cout, cin, 3, 3], rng::gaussian_vec(rng, cout * cin * 9, std)),
            bias: Tensor::zeros(vec![cout]),
        }
    }

    fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    fn cout(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub sep4d: Vec<Sep4dParams>,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
    pub conv4: ConvParams,
}

impl FusionParams {
    /// Seeded Gaussian weights with std `1/√fan_in`, zero biases.
    pub fn init(levels: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("fusion")]);
        let sep_std = 1.0 / 3.0;
        let sep4d = (0..levels)
            .map(|_| Sep4dParams {
                kq: Tensor::from_parts(vec![SEP_CHANNELS, 3, 3], rng::gaussian_vec(&mut r, SEP_CHANNELS * 9, sep_std)),
                ks: Tensor::from_parts(vec![SEP_CHANNELS, 3, 3], rng::gaussian_vec(&mut r, SEP_CHANNELS * 9, sep_std)),
                bias: Tensor::zeros(vec![SEP_CHANNELS]),
            })
            .collect();
        Self {
            sep4d,
            conv1: ConvParams::init(SQUEEZE_CHANNELS * levels, HIDDEN, &mut r),
            conv2: ConvParams::init(HIDDEN, HIDDEN, &mut r),
            conv3: ConvParams::init(HIDDEN, DECODER, &mut r),
            conv4: ConvParams::init(DECODER, 1, &mut r),
        }
    }

    pub fn levels(&self) -> usize {
        self.sep4d.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, s) in self.sep4d.iter().enumerate() {
            out.push((format!("fusion.sep4d.{l}.kq"), &s.kq));
            out.push((format!("fusion.sep4d.{l}.ks"), &s.ks));
            out.push((format!("fusion.sep4d.{l}.bias"), &s.bias));
        }
        for (name, c) in
            [("conv1", &self.conv1), ("conv2", &self.conv2), ("conv3", &self.conv3), ("conv4", &self.conv4)]
        {
            out.push((format!("fusion.{name}.weight"), &c.weight));
            out.push((format!("fusion.{name}.bias"), &c.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, s) in self.sep4d.iter_mut().enumerate() {
            out.push((format!("fusion.sep4d.{l}.kq"), &mut s.kq));
            out.push((format!("fusion.sep4d.{l}.ks"), &mut s.ks));
            out.push((format!("fusion.sep4d.{l}.bias"), &mut s.bias));
        }
        for (name, c) in [
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("conv3", &mut self.conv3),
            ("conv4", &mut self.conv4),
        ] {
            out.push((format!("fusion.{name}.weight"), &mut c.weight));
            out.push((format!("fusion.{name}.bias"), &mut c.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Hash over every parameter tensor, used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        self.named()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, (_, t)| (h ^ t.fingerprint()).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Foreground and background query probabilities at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub m_f: Tensor,
    pub m_b: Tensor,
}

/// `dst[p, i] += Σ k[ky,kx]·src[p + (ky−1, kx−1), i]` over an `h×w` grid of
/// length-`inner` vectors, zero padded.
fn grid_conv(src: &[f64], h: usize, w: usize, inner: usize, k: &[f64], dst: &mut [f64]) {
    for ky in 0..3 {
        for kx in 0..3 {
            let kv = k[ky * 3 + kx];
            if kv == 0.0 {
                continue;
            }
            for y in tap_range(ky, h) {
                let sy = y + ky - 1;
                for x in tap_range(kx, w) {
                    let sx = x + kx - 1;
                    let s = &src[(sy * w + sx) * inner..(sy * w + sx + 1) * inner];
                    let d = &mut dst[(y * w + x) * inner..(y * w + x + 1) * inner];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += kv * b;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`grid_conv`]: accumulates `∂/∂k` and, if requested, `∂/∂src`.
#[allow(clippy::too_many_arguments)]
fn grid_conv_backward(
    src: &[f64],
    h: usize,
    w: usize,
    inner: usize,
    k: &[f64],
    gout: &[f64],
    gk: &mut [f64],
    mut gsrc: Option<&mut [f64]>,
) {
    for ky in 0..3 {
        for kx in 0..3 {
            let kv = k[ky * 3 + kx];
            let mut acc = 0.0;
            for y in tap_range(ky, h) {
                let sy = y + ky - 1;
                for x in tap_range(kx, w) {
                    let sx = x + kx - 1;
                    let so = (sy * w + sx) * inner;
                    let g = &gout[(y * w + x) * inner..(y * w + x + 1) * inner];
                    let s = &src[so..so + inner];
                    acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    if let Some(gs) = gsrc.as_deref_mut() {
                        for (a, b) in gs[so..so + inner].iter_mut().zip(g) {
                            *a += kv * b;
                        }
                    }
                }
            }
            gk[ky * 3 + kx] += acc;
        }
    }
}

fn transpose_blocks(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// 4D correlation in flat form, `[q, s]` with both grids row-major.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CorrView<'a> {
    pub data: &'a [f64],
    pub q: (usize, usize),
    pub s: (usize, usize),
}

impl<'a> CorrView<'a> {
    fn from_tensor(t: &'a Tensor, buf: &'a mut Vec<f64>) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!("correlation must be rank 4, got {:?}", t.shape())));
        }
        let s = t.shape();
        *buf = t.to_f64();
        Ok(Self { data: buf, q: (s[0], s[1]), s: (s[2], s[3]) })
    }
}

#[derive(Clone, Debug)]
struct SepCache {
    /// After the query-axis pass, `[s, q]` layout, per channel.
    mid: Vec<Vec<f64>>,
    /// Pre-activation, `[s, q]` layout, per channel.
    pre: Vec<Vec<f64>>,
}

fn sep4d_forward(c: CorrView, p: &Sep4dParams) -> SepCache {
    let (nq, ns) = (c.q.0 * c.q.1, c.s.0 * c.s.1);
    let kq = p.kq.to_f64();
    let ks = p.ks.to_f64();
    let mut mid = Vec::with_capacity(SEP_CHANNELS);
    let mut pre = Vec::with_capacity(SEP_CHANNELS);
    for ch in 0..SEP_CHANNELS {
        let mut t = vec![0.0; nq * ns];
        grid_conv(c.data, c.q.0, c.q.1, ns, &kq[ch * 9..ch * 9 + 9], &mut t);
        let tt = transpose_blocks(&t, nq, ns);
        let mut u = vec![p.bias.data()[ch] as f64; nq * ns];
        grid_conv(&tt, c.s.0, c.s.1, nq, &ks[ch * 9..ch * 9 + 9], &mut u);
        mid.push(tt);
        pre.push(u);
    }
    SepCache { mid, pre }
}

/// Separable 4D convolution of one correlation tensor
/// `[q_row, q_col, s_row, s_col]`: a 3×3 kernel over the query axes, then a
/// 3×3 kernel over the support axes, plus bias and ReLU, for each of the
/// four output channels.
pub fn sep4d_conv(corr: &Tensor, params: &Sep4dParams) -> Result<Vec<Tensor>> {
    let mut buf = Vec::new();
    let view = CorrView::from_tensor(corr, &mut buf)?;
    let (nq, ns) = (view.q.0 * view.q.1, view.s.0 * view.s.1);
    let cache = sep4d_forward(view, params);
    Ok(cache
        .pre
        .iter()
        .map(|u| {
            let relu: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
            Tensor::from_f64(corr.shape().to_vec(), &transpose_blocks(&relu, ns, nq))
        })
        .collect())
}

/// Channel-wise mean then max over the support positions of `[s, q]`
/// post-ReLU maps. Returns the `8 × nq` squeeze and the argmax per `(c, q)`.
fn squeeze(pre: &[Vec<f64>], nq: usize, ns: usize) -> (Vec<f64>, Vec<u32>) {
    let mut out = vec![0.0; SQUEEZE_CHANNELS * nq];
    let mut arg = vec![0u32; SEP_CHANNELS * nq];
    let inv = 1.0 / ns as f64;
    for (ch, u) in pre.iter().enumerate() {
        let mut best = vec![f64::NEG_INFINITY; nq];
        for s in 0..ns {
            let row = &u[s * nq..(s + 1) * nq];
            for (q, &v) in row.iter().enumerate() {
                let a = v.max(0.0);
                out[ch * nq + q] += a * inv;
                if a > best[q] {
                    best[q] = a;
                    arg[ch * nq + q] = s as u32;
                }
            }
        }
        out[(SEP_CHANNELS + ch) * nq..(SEP_CHANNELS + ch + 1) * nq].copy_from_slice(&best);
    }
    (out, arg)
}

/// Mean and max over the support axes of each channel of a stack of 4D
/// tensors `[q_row, q_col, s_row, s_col]`: the means come first, then the
/// maxima, giving `2·channels × q_row × q_col`.
pub fn squeeze_support(t: &[Tensor]) -> Result<Tensor> {
    let first = t.first().ok_or_else(|| Error::shape("empty channel stack"))?;
    if first.rank() != 4 {
        return Err(Error::shape(format!("expected rank-4 channels, got {:?}", first.shape())));
    }
    let s = first.shape();
    let (nq, ns) = (s[0] * s[1], s[2] * s[3]);
    let c = t.len();
    let mut out = vec![0.0; 2 * c * nq];
    for (ch, x) in t.iter().enumerate() {
        first.expect_same_shape(x)?;
        let d = x.data();
        for q in 0..nq {
            let row = &d[q * ns..(q + 1) * ns];
            out[ch * nq + q] = row.iter().map(|&v| v as f64).sum::<f64>() / ns as f64;
            out[(c + ch) * nq + q] = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        }
    }
    Ok(Tensor::from_f64(vec![2 * c, s[0], s[1]], &out))
}

#[derive(Clone, Debug)]
struct LevelCache {
    corr: Vec<f64>,
    q: (usize, usize),
    s: (usize, usize),
    sep: SepCache,
    argmax: Vec<u32>,
    plan: ResizePlan,
}

/// The correlation-dependent half of a head: sep4d, squeeze and resize.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    levels: Vec<LevelCache>,
    base: (usize, usize),
    concat: Vec<f64>,
}

/// The 2D convolution stack on top of a [`Trunk`].
#[derive(Clone, Debug)]
pub(crate) struct Tail {
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pre3: Vec<f64>,
    act3: Vec<f64>,
    prob: Vec<f64>,
    out_plan: ResizePlan,
    pub out: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadCache {
    pub trunk: Arc<Trunk>,
    pub tail: Tail,
}

impl HeadCache {
    /// Hash of every ReLU sign and max index, i.e. which linear piece of the
    /// network the forward pass landed on.
    fn pattern(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut push = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        let mut signs = |xs: &[f64]| {
            for chunk in xs.chunks(64) {
                push(chunk.iter().enumerate().fold(0u64, |m, (i, &x)| m | (((x > 0.0) as u64) << i)));
            }
        };
        for lv in &self.trunk.levels {
            lv.sep.pre.iter().for_each(|p| signs(p));
        }
        signs(&self.tail.pre1);
        signs(&self.tail.pre2);
        signs(&self.tail.pre3);
        for lv in &self.trunk.levels {
            lv.argmax.iter().for_each(|&a| push(a as u64));
        }
        h
    }
}

/// How far [`head_backward`] propagates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Depth {
    /// conv1..conv4 only.
    Tail,
    /// Also the sep4d kernels.
    Trunk,
    /// Also the correlation inputs.
    Corr,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn trunk_forward(corrs: &[CorrView], params: &FusionParams) -> Result<Trunk> {
    let levels = params.levels();
    if corrs.len() != levels {
        return Err(Error::shape(format!("{} correlation levels for {levels}-level parameters", corrs.len())));
    }
    let base = corrs[0].q;
    let nb = base.0 * base.1;
    let mut concat = Vec::with_capacity(SQUEEZE_CHANNELS * levels * nb);
    let mut caches = Vec::with_capacity(levels);
    for (c, p) in corrs.iter().zip(&params.sep4d) {
        let (nq, ns) = (c.q.0 * c.q.1, c.s.0 * c.s.1);
        if c.data.len() != nq * ns {
            return Err(Error::shape("correlation buffer does not match its grid"));
        }
        let sep = sep4d_forward(*c, p);
        let (sq, argmax) = squeeze(&sep.pre, nq, ns);
        let plan = ResizePlan::new(c.q, base);
        concat.extend(plan.apply(&sq, SQUEEZE_CHANNELS));
        caches.push(LevelCache { corr: c.data.to_vec(), q: c.q, s: c.s, sep, argmax, plan });
    }
    Ok(Trunk { levels: caches, base, concat })
}

pub(crate) fn tail_forward(trunk: &Trunk, params: &FusionParams, out_hw: (usize, usize)) -> Tail {
    let cin = SQUEEZE_CHANNELS * params.levels();
    let (h, w) = trunk.base;
    let conv = |x: &[f64], cin: usize, cp: &ConvParams| {
        conv3x3_forward(x, cin, h, w, &cp.weight.to_f64(), &cp.bias.to_f64(), cp.cout())
    };
    let pre1 = conv(&trunk.concat, cin, &params.conv1);
    let act1 = relu(&pre1);
    let pre2 = conv(&act1, HIDDEN, &params.conv2);
    let act2 = relu(&pre2);
    let pre3 = conv(&act2, HIDDEN, &params.conv3);
    let act3 = relu(&pre3);
    let logits = conv(&act3, DECODER, &params.conv4);
    let prob: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let out_plan = ResizePlan::new(trunk.base, out_hw);
    let out = out_plan.apply(&prob, 1);
    Tail { pre1, act1, pre2, act2, pre3, act3, prob, out_plan, out }
}

pub(crate) fn head_forward(corrs: &[CorrView], params: &FusionParams, out_hw: (usize, usize)) -> Result<HeadCache> {
    let trunk = trunk_forward(corrs, params)?;
    let tail = tail_forward(&trunk, params, out_hw);
    Ok(HeadCache { trunk: Arc::new(trunk), tail })
}

/// Gradients of one head: parameter grads are accumulated into `grads`, the
/// per-level correlation grads are returned when `depth` is [`Depth::Corr`].
pub(crate) fn head_backward(
    cache: &HeadCache,
    params: &FusionParams,
    grad_out: &[f64],
    grads: &mut FusionGrads,
    depth: Depth,
) -> Vec<Vec<f64>> {
    let (trunk, tail) = (&*cache.trunk, &cache.tail);
    let (h, w) = trunk.base;
    let levels = params.levels();
    let dprob = tail.out_plan.adjoint(grad_out, 1);
    let dlogit: Vec<f64> = dprob.iter().zip(&tail.prob).map(|(g, p)| g * p * (1.0 - p)).collect();

    let mut step = |input: &[f64], cp: &ConvParams, slot: usize, gout: &[f64]| -> Vec<f64> {
        let g = conv3x3_backward(input, cp.cin(), h, w, &cp.weight.to_f64(), cp.cout(), gout);
        for (a, b) in grads.conv[slot].0.iter_mut().zip(&g.weight) {
            *a += b;
        }
        for (a, b) in grads.conv[slot].1.iter_mut().zip(&g.bias) {
            *a += b;
        }
        g.input
    };
    let mask = |g: Vec<f64>, pre: &[f64]| -> Vec<f64> {
        g.into_iter().zip(pre).map(|(g, &p)| if p > 0.0 { g } else { 0.0 }).collect()
    };
    let d_act3 = step(&tail.act3, &params.conv4, 3, &dlogit);
    let d_act2 = step(&tail.act2, &params.conv3, 2, &mask(d_act3, &tail.pre3));
    let d_act1 = step(&tail.act1, &params.conv2, 1, &mask(d_act2, &tail.pre2));
    let d_concat = step(&trunk.concat, &params.conv1, 0, &mask(d_act1, &tail.pre1));
    if depth == Depth::Tail {
        return Vec::new();
    }
    let want_corr = depth == Depth::Corr;

    let nb = h * w;
    let mut corr_grads = Vec::with_capacity(levels);
    for (l, lc) in trunk.levels.iter().enumerate() {
        let (nq, ns) = (lc.q.0 * lc.q.1, lc.s.0 * lc.s.1);
        let chunk = &d_concat[l * SQUEEZE_CHANNELS * nb..(l + 1) * SQUEEZE_CHANNELS * nb];
        let dsq = lc.plan.adjoint(chunk, SQUEEZE_CHANNELS);
        let p = &params.sep4d[l];
        let kq = p.kq.to_f64();
        let ks = p.ks.to_f64();
        let g = &mut grads.sep4d[l];
        let mut dcorr = if want_corr { vec![0.0; nq * ns] } else { Vec::new() };
        let inv = 1.0 / ns as f64;
        for ch in 0..SEP_CHANNELS {
            let pre = &lc.sep.pre[ch];
            // d pre in [s, q] layout
            let mut dpre = vec![0.0; nq * ns];
            for s in 0..ns {
                for q in 0..nq {
                    if pre[s * nq + q] > 0.0 {
                        dpre[s * nq + q] = dsq[ch * nq + q] * inv;
                    }
                }
            }
            for q in 0..nq {
                let s = lc.argmax[ch * nq + q] as usize;
                if pre[s * nq + q] > 0.0 {
                    dpre[s * nq + q] += dsq[(SEP_CHANNELS + ch) * nq + q];
                }
            }
            g.2[ch] += dpre.iter().sum::<f64>();
            let mut dmid = vec![0.0; nq * ns];
            grid_conv_backward(
                &lc.sep.mid[ch],
                lc.s.0,
                lc.s.1,
                nq,
                &ks[ch * 9..ch * 9 + 9],
                &dpre,
                &mut g.1[ch * 9..ch * 9 + 9],
                Some(&mut dmid),
            );
            let dt = transpose_blocks(&dmid, ns, nq);
            grid_conv_backward(
                &lc.corr,
                lc.q.0,
                lc.q.1,
                ns,
                &kq[ch * 9..ch * 9 + 9],
                &dt,
                &mut g.0[ch * 9..ch * 9 + 9],
                if want_corr { Some(&mut dcorr) } else { None },
            );
        }
        corr_grads.push(dcorr);
    }
    corr_grads
}

/// `f64` gradient accumulators laid out like [`FusionParams`].
#[derive(Clone, Debug)]
pub(crate) struct FusionGrads {
    /// `(kq, ks, bias)` per level.
    pub sep4d: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// `(weight, bias)` for conv1..conv4.
    pub conv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FusionGrads {
    pub fn zeros(params: &FusionParams) -> Self {
        Self {
            sep4d: params
                .sep4d
                .iter()
                .map(|s| (vec![0.0; s.kq.len()], vec![0.0; s.ks.len()], vec![0.0; s.bias.len()]))
                .collect(),
            conv: [&params.conv1, &params.conv2, &params.conv3, &params.conv4]
                .iter()
                .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
                .collect(),
        }
    }

    pub fn into_params(self, like: &FusionParams) -> FusionParams {
        let mut out = like.clone();
        let mut flat: Vec<Vec<f64>> = Vec::new();
        for (a, b, c) in self.sep4d {
            flat.extend([a, b, c]);
        }
        for (a, b) in self.conv {
            flat.extend([a, b]);
        }
        for ((_, t), g) in out.named_mut().into_iter().zip(flat) {
            let shape = t.shape().to_vec();
            *t = Tensor::from_f64(shape, &g);
        }
        out
    }
}

/// Forward state of both heads, tied to the parameters that produced it.
#[derive(Clone, Debug)]
pub struct FusionCache {
    fingerprint: u64,
    pub(crate) fg: HeadCache,
    pub(crate) bg: HeadCache,
}

impl FusionCache {
    pub(crate) fn new(params: &FusionParams, fg: HeadCache, bg: HeadCache) -> Self {
        Self { fingerprint: params.fingerprint(), fg, bg }
    }

    pub(crate) fn check(&self, params: &FusionParams) -> Result<()> {
        if self.fingerprint != params.fingerprint() {
            return Err(Error::StaleCache);
        }
        Ok(())
    }
}

fn views<'a>(corrs: &'a [Tensor], bufs: &'a mut Vec<Vec<f64>>) -> Result<Vec<CorrView<'a>>> {
    for t in corrs {
        if t.rank() != 4 {
            return Err(Error::shape(format!("correlation must be rank 4, got {:?}", t.shape())));
        }
    }
    *bufs = corrs.iter().map(|t| t.to_f64()).collect();
    Ok(corrs
        .iter()
        .zip(bufs.iter())
        .map(|(t, b)| {
            let s = t.shape();
            CorrView { data: b, q: (s[0], s[1]), s: (s[2], s[3]) }
        })
        .collect())
}

/// Runs both heads. `out_hw` is the query image size.
pub fn fusion_forward(
    corr_f: &[Tensor],
    corr_b: &[Tensor],
    params: &FusionParams,
    out_hw: (usize, usize),
) -> Result<(HeadOutput, FusionCache)> {
    if corr_f.len() != corr_b.len() {
        return Err(Error::shape("foreground and background pyramids differ in depth"));
    }
    for (a, b) in corr_f.iter().zip(corr_b) {
        a.expect_same_shape(b)?;
    }
    let (mut bf, mut bb) = (Vec::new(), Vec::new());
    let fg = head_forward(&views(corr_f, &mut bf)?, params, out_hw)?;
    let bg = head_forward(&views(corr_b, &mut bb)?, params, out_hw)?;
    let out = HeadOutput {
        m_f: Tensor::from_f64(vec![out_hw.0, out_hw.1], &fg.tail.out),
        m_b: Tensor::from_f64(vec![out_hw.0, out_hw.1], &bg.tail.out),
    };
    Ok((out, FusionCache::new(params, fg, bg)))
}

/// Parameter gradients given `∂L/∂M_f` and `∂L/∂M_b`.
pub fn fusion_backward(
    cache: &FusionCache,
    params: &FusionParams,
    grad_m_f: &Tensor,
    grad_m_b: &Tensor,
) -> Result<FusionParams> {
    cache.check(params)?;
    if grad_m_f.len() != cache.fg.tail.out.len() || grad_m_b.len() != cache.bg.tail.out.len() {
        return Err(Error::shape("upstream gradient does not match head output"));
    }
    let mut g = FusionGrads::zeros(params);
    head_backward(&cache.fg, params, &grad_m_f.to_f64(), &mut g, Depth::Trunk);
    head_backward(&cache.bg, params, &grad_m_b.to_f64(), &mut g, Depth::Trunk);
    Ok(g.into_params(params))
}

const MIN_STEP_FRACTION: f32 = 1.0 / 256.0;

fn dual_bce(cache_fg: &HeadCache, cache_bg: &HeadCache, target: &[f64]) -> f64 {
    let inv: Vec<f64> = target.iter().map(|t| 1.0 - t).collect();
    bce_f64(&cache_fg.tail.out, target) + bce_f64(&cache_bg.tail.out, &inv)
}

/// Central-difference check of [`fusion_backward`] on the loss
/// `BCE(M_f, target) + BCE(M_b, 1 − target)`, evaluated entirely in `f64`.
/// Steps that would cross a non-differentiable point are shrunk, down to
/// `h · MIN_STEP_FRACTION`. Returns the largest relative error per parameter
/// tensor.
pub fn fusion_gradcheck(
    corr_f: &[Tensor],
    corr_b: &[Tensor],
    params: &FusionParams,
    target: &Tensor,
    h: f32,
) -> Result<Vec<(String, f64)>> {
    let out_hw = target.dims2()?;
    let t = target.to_f64();
    let (mut bf, mut bb) = (Vec::new(), Vec::new());
    let vf = views(corr_f, &mut bf)?;
    let vb = views(corr_b, &mut bb)?;
    let fg = head_forward(&vf, params, out_hw)?;
    let bg = head_forward(&vb, params, out_hw)?;
    let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let mut g = FusionGrads::zeros(params);
    head_backward(&fg, params, &bce_grad_f64(&fg.tail.out, &t), &mut g, Depth::Trunk);
    head_backward(&bg, params, &bce_grad_f64(&bg.tail.out, &inv), &mut g, Depth::Trunk);
    let mut flat: Vec<Vec<f64>> = Vec::new();
    for (a, b, c) in g.sep4d {
        flat.extend([a, b, c]);
    }
    for (a, b) in g.conv {
        flat.extend([a, b]);
    }
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let center = fg.pattern() ^ bg.pattern().rotate_left(1);
    let mut report = Vec::with_capacity(names.len());
    let mut work = params.clone();
    for (slot, (name, analytic)) in names.into_iter().zip(flat).enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = work.named()[slot].1.data()[i];
            let mut step = h;
            let num = loop {
                let (hi, lo) = (orig + step, orig - step);
                let mut eval = |v: f32| -> Result<(f64, u64)> {
                    work.named_mut()[slot].1.data_mut()[i] = v;
                    let (a, b) = (head_forward(&vf, &work, out_hw)?, head_forward(&vb, &work, out_hw)?);
                    Ok((dual_bce(&a, &b, &t), a.pattern() ^ b.pattern().rotate_left(1)))
                };
                let (up, pu) = eval(hi)?;
                let (down, pd) = eval(lo)?;
                work.named_mut()[slot].1.data_mut()[i] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("{name}[{i}]")));
                }
                let num = (up - down) / (hi as f64 - lo as f64);
                // A step that crosses a ReLU or max switch does not measure
                // the local derivative; shrink it until both sides share the
                // activation pattern of the centre.
                if (pu == center && pd == center) || step <= h * MIN_STEP_FRACTION {
                    break num;
                }
                step *= 0.25;
            };
            worst = worst.max(relative_error(analytic[i], num));
        }
        report.push((name, worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn corr(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn delta() -> Vec<f32> {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        k
    }

    #[test]
    fn delta_kernels_are_identity() {
        let c = corr([3, 2, 2, 3], 1);
        let p = Sep4dParams {
            kq: Tensor::new(vec![4, 3, 3], delta().repeat(4)).unwrap(),
            ks: Tensor::new(vec![4, 3, 3], delta().repeat(4)).unwrap(),
            bias: Tensor::zeros(vec![4]),
        };
        for ch in sep4d_conv(&c, &p).unwrap() {
            assert!(ch.max_abs_diff(&c).unwrap() < 1e-7);
        }
    }

    #[test]
    fn zero_input_gives_relu_bias() {
        let c = Tensor::zeros(vec![2, 2, 2, 2]);
        let mut p = FusionParams::init(1, 3).sep4d.remove(0);
        p.bias = Tensor::new(vec![4], vec![0.5, -0.5, 2.0, 0.0]).unwrap();
        let out = sep4d_conv(&c, &p).unwrap();
        for (ch, want) in [0.5, 0.0, 2.0, 0.0].iter().enumerate() {
            assert!(out[ch].data().iter().all(|v| v == want));
        }
    }

    #[test]
    fn squeeze_examples() {
        let c = Tensor::full(vec![2, 2, 3, 3], 0.7);
        let s = squeeze_support(&[c.clone(), c]).unwrap();
        assert_eq!(s.shape(), &[4, 2, 2]);
        assert!(s.data().iter().all(|v| (v - 0.7).abs() < 1e-6));

        let mut one = vec![0.0f32; 2 * 2 * 3 * 3];
        one[4] = 9.0;
        let t = Tensor::new(vec![2, 2, 3, 3], one).unwrap();
        let s = squeeze_support(&[t]).unwrap();
        assert!((s.get(&[0, 0, 0]) - 1.0).abs() < 1e-6);
        assert_eq!(s.get(&[1, 0, 0]), 9.0);
        assert_eq!(s.get(&[1, 0, 1]), 0.0);
    }

    #[test]
    fn zero_correlations_give_half() {
        let mut p = FusionParams::init(2, 5);
        for (_, t) in p.named_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let cf = vec![Tensor::zeros(vec![4, 4, 4, 4]), Tensor::zeros(vec![2, 2, 2, 2])];
        let (out, _) = fusion_forward(&cf, &cf, &p, (16, 16)).unwrap();
        assert_eq!(out.m_f.shape(), &[16, 16]);
        assert!(out.m_f.data().iter().chain(out.m_b.data()).all(|&v| v == 0.5));
    }

    #[test]
    fn heads_share_parameters() {
        let p = FusionParams::init(2, 7);
        let cf = vec![corr([4, 4, 4, 4], 1), corr([2, 2, 2, 2], 2)];
        let cb = vec![corr([4, 4, 4, 4], 3), corr([2, 2, 2, 2], 4)];
        let (a, _) = fusion_forward(&cf, &cb, &p, (8, 8)).unwrap();
        let (b, _) = fusion_forward(&cb, &cf, &p, (8, 8)).unwrap();
        assert_eq!(a.m_b, b.m_f);
        assert_eq!(a.m_f, b.m_b);
        let (c, _) = fusion_forward(&cf, &cb, &p, (8, 8)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = FusionParams::init(1, 1);
        let cf = vec![corr([2, 2, 2, 2], 1)];
        let (_, cache) = fusion_forward(&cf, &cf, &p, (4, 4)).unwrap();
        p.conv4.bias.data_mut()[0] = 0.1;
        let g = Tensor::zeros(vec![4, 4]);
        assert!(matches!(fusion_backward(&cache, &p, &g, &g), Err(Error::StaleCache)));
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let p = FusionParams::init(2, 1);
        let cf = vec![corr([4, 4, 4, 4], 1), corr([2, 2, 2, 2], 2)];
        let (_, cache) = fusion_forward(&cf, &cf, &p, (8, 8)).unwrap();
        let g = Tensor::zeros(vec![8, 8]);
        let grads = fusion_backward(&cache, &p, &g, &g).unwrap();
        assert!(grads.named().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conv4_bias_grad_is_sigmoid_derivative_sum() {
        let p = FusionParams::init(1, 9);
        let cf = vec![corr([4, 4, 4, 4], 1)];
        let (out, cache) = fusion_forward(&cf, &cf, &p, (4, 4)).unwrap();
        let up = Tensor::new(vec![4, 4], (0..16).map(|i| (i as f32 * 0.3).sin()).collect()).unwrap();
        let grads = fusion_backward(&cache, &p, &up, &Tensor::zeros(vec![4, 4])).unwrap();
        let want: f64 =
            up.data().iter().zip(out.m_f.data()).map(|(&u, &m)| u as f64 * m as f64 * (1.0 - m as f64)).sum();
        assert!((grads.conv4.bias.data()[0] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = FusionParams::init(3, 11);
        let cf = vec![corr([4, 4, 4, 4], 1), corr([2, 2, 2, 2], 2), corr([2, 2, 2, 2], 3)];
        let cb = vec![corr([4, 4, 4, 4], 4), corr([2, 2, 2, 2], 5), corr([2, 2, 2, 2], 6)];
        let target =
            Tensor::new(vec![8, 8], (0..64).map(|i| ((i / 8 + i % 8) % 3 == 0) as u8 as f32).collect()).unwrap();
        let report = fusion_gradcheck(&cf, &cb, &p, &target, 1e-3).unwrap();
        for (name, err) in &report {
            assert!(*err <= 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn fifty_steps_halve_the_loss() {
        use crate::objectives::{adam_step, bce, bce_grad, OptimState};
        let mut p = FusionParams::init(2, 21);
        let cf = vec![corr([4, 4, 4, 4], 7), corr([2, 2, 2, 2], 8)];
        let target = Tensor::new(vec![8, 8], (0..64).map(|i| (i % 8 < 4) as u8 as f32).collect()).unwrap();
        let mut opt = OptimState::new(1e-2);
        let zero = Tensor::zeros(vec![8, 8]);
        let mut losses = Vec::new();
        for _ in 0..=50 {
            let (out, cache) = fusion_forward(&cf, &cf, &p, (8, 8)).unwrap();
            losses.push(bce(&out.m_f, &target).unwrap());
            let g = fusion_backward(&cache, &p, &bce_grad(&out.m_f, &target).unwrap(), &zero).unwrap();
            let grads = g.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
            adam_step(p.named_mut(), &grads, &mut opt).unwrap();
        }
        assert!(losses[50] <= 0.5 * losses[0], "{} -> {}", losses[0], losses[50]);
    }

    #[test]
    fn param_count_fixed_by_levels() {
        let p = FusionParams::init(3, 0);
        let sep = 3 * (36 + 36 + 4);
        let convs = (24 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 8 * 9 + 8) + (8 * 9 + 1);
        assert_eq!(p.param_count(), sep + convs);
    }
}
