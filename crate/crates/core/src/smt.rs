//! Self-matching transformation.
//!
//! Support prototypes (global and per-tile) give a coarse query mask by
//! cosine matching; the coarse mask yields query prototypes. Each image then
//! gets its own linear map `W = A·C⁺` sending its normalized foreground and
//! background prototypes onto trainable anchor directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeaturePyramid, Group, PyramidSpec};
use crate::rng;
use crate::tensor::{self, resize_map, softmax_pair, Tensor, COSINE_EPS};

/// Minimum total mask weight for a pooled prototype.
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmtConfig {
    /// Tile side as a fraction of the feature map side.
    pub gamma: f32,
    /// Weight of the query pseudo-inverse in the blend.
    pub beta: f32,
    pub ridge: f32,
}

impl Default for SmtConfig {
    fn default() -> Self {
        Self { gamma: 0.25, beta: 0.5, ridge: tensor::DEFAULT_RIDGE }
    }
}

impl SmtConfig {
    pub fn validate(&self) -> Result<()> {
        tiles_per_side(self.gamma)?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config(format!("ridge {} must be non-negative", self.ridge)));
        }
        Ok(())
    }
}

fn tiles_per_side(gamma: f32) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::DimensionMismatch(format!("division ratio {gamma} outside (0, 1]")));
    }
    let inv = 1.0 / gamma as f64;
    let n = inv.round();
    if (inv - n).abs() > 1e-4 {
        return Err(Error::DimensionMismatch(format!("1/{gamma} is not an integer")));
    }
    Ok(n as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Support,
    Query,
}

/// Local prototypes of one tile; `None` marks a tile whose mask (or its
/// complement) is empty.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LocalPair {
    pub fg: Option<Vec<f32>>,
    pub bg: Option<Vec<f32>>,
}

impl LocalPair {
    pub fn valid(&self) -> Option<(&[f32], &[f32])> {
        match (&self.fg, &self.bg) {
            (Some(f), Some(b)) => Some((f, b)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrototypes {
    pub fg: Vec<f32>,
    pub bg: Vec<f32>,
    pub locals: Vec<LocalPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub levels: Vec<LevelPrototypes>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorPair {
    pub fg: Tensor,
    pub bg: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAnchors {
    pub group: Group,
    pub support: AnchorPair,
    pub query: AnchorPair,
}

impl GroupAnchors {
    pub fn pair(&self, role: Role) -> &AnchorPair {
        match role {
            Role::Support => &self.support,
            Role::Query => &self.query,
        }
    }
}

/// Trainable anchors: one support pair and one query pair per used group,
/// shared by every level mapped to that group.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub groups: Vec<GroupAnchors>,
}

impl AnchorSet {
    /// Seeded unit-variance Gaussian anchors.
    pub fn init(spec: &PyramidSpec, seed: u64) -> Self {
        let groups = Group::ALL
            .iter()
            .filter_map(|&g| {
                let c = spec.group_channels(g)?;
                let mut r = rng::stream(seed, &[rng::tag("anchors"), g.index() as u64]);
                let mut v = || Tensor::from_parts(vec![c], rng::gaussian_vec(&mut r, c, 1.0));
                let support = AnchorPair { fg: v(), bg: v() };
                let query = AnchorPair { fg: v(), bg: v() };
                Some(GroupAnchors { group: g, support, query })
            })
            .collect();
        Self { groups }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |p: &AnchorPair| AnchorPair {
            fg: Tensor::zeros(p.fg.shape().to_vec()),
            bg: Tensor::zeros(p.bg.shape().to_vec()),
        };
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| GroupAnchors { group: g.group, support: z(&g.support), query: z(&g.query) })
                .collect(),
        }
    }

    pub fn get(&self, group: Group) -> Result<&GroupAnchors> {
        self.groups
            .iter()
            .find(|g| g.group == group)
            .ok_or_else(|| Error::config(format!("no anchors for group {}", group.name())))
    }

    fn get_mut(&mut self, group: Group) -> &mut GroupAnchors {
        self.groups.iter_mut().find(|g| g.group == group).expect("anchor group present")
    }

    /// `A = [a_f/‖a_f‖, a_b/‖a_b‖]`.
    pub fn matrix(&self, group: Group, role: Role) -> Result<Tensor> {
        let p = self.get(group)?.pair(role);
        build_prototype_matrix(p.fg.data(), p.bg.data())
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for g in &self.groups {
            let n = g.group.name();
            out.push((format!("anchor.{n}.support.fg"), &g.support.fg));
            out.push((format!("anchor.{n}.support.bg"), &g.support.bg));
            out.push((format!("anchor.{n}.query.fg"), &g.query.fg));
            out.push((format!("anchor.{n}.query.bg"), &g.query.bg));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            let n = g.group.name();
            out.push((format!("anchor.{n}.support.fg"), &mut g.support.fg));
            out.push((format!("anchor.{n}.support.bg"), &mut g.support.bg));
            out.push((format!("anchor.{n}.query.fg"), &mut g.query.fg));
            out.push((format!("anchor.{n}.query.bg"), &mut g.query.bg));
        }
        out
    }
}

/// Per-level coarse query mask; `fg + bg = 1` at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseLevel {
    pub fg: Tensor,
    pub bg: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMask {
    pub levels: Vec<CoarseLevel>,
}

/// Mask-weighted spatial mean of a C×H×W map.
pub fn masked_avg_pool(f: &Tensor, m: &Tensor) -> Result<Vec<f32>> {
    let (c, h, w) = f.dims3()?;
    if m.shape() != [h, w] {
        return Err(Error::shape(format!("mask {:?} vs features {h}×{w}", m.shape())));
    }
    let n = h * w;
    let total: f64 = m.sum();
    if total < MASK_EPS {
        return Err(Error::EmptyMask);
    }
    let md = m.data();
    let fd = f.data();
    Ok((0..c)
        .map(|k| {
            let s: f64 = fd[k * n..(k + 1) * n].iter().zip(md).map(|(&a, &b)| a as f64 * b as f64).sum();
            (s / total) as f32
        })
        .collect())
}

/// Non-overlapping grid tiles of side `γ·H × γ·W`, row-major.
pub fn split_local(f: &Tensor, m: &Tensor, gamma: f32) -> Result<Vec<(Tensor, Tensor)>> {
    let (c, h, w) = f.dims3()?;
    if m.shape() != [h, w] {
        return Err(Error::shape(format!("mask {:?} vs features {h}×{w}", m.shape())));
    }
    let n = tiles_per_side(gamma)?;
    if h % n != 0 || w % n != 0 {
        return Err(Error::DimensionMismatch(format!("{h}×{w} map not divisible into {n}×{n} tiles")));
    }
    let (th, tw) = (h / n, w / n);
    let (fd, md) = (f.data(), m.data());
    let mut tiles = Vec::with_capacity(n * n);
    for ty in 0..n {
        for tx in 0..n {
            let mut ft = Vec::with_capacity(c * th * tw);
            for k in 0..c {
                for y in ty * th..(ty + 1) * th {
                    let row = (k * h + y) * w;
                    ft.extend_from_slice(&fd[row + tx * tw..row + (tx + 1) * tw]);
                }
            }
            let mut mt = Vec::with_capacity(th * tw);
            for y in ty * th..(ty + 1) * th {
                mt.extend_from_slice(&md[y * w + tx * tw..y * w + (tx + 1) * tw]);
            }
            tiles.push((Tensor::from_parts(vec![c, th, tw], ft), Tensor::from_parts(vec![th, tw], mt)));
        }
    }
    Ok(tiles)
}

fn pooled_or_none(f: &Tensor, m: &Tensor) -> Result<Option<Vec<f32>>> {
    match masked_avg_pool(f, m) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Local foreground/background prototypes for every tile.
pub fn local_prototypes(f: &Tensor, m: &Tensor, gamma: f32) -> Result<Vec<LocalPair>> {
    split_local(f, m, gamma)?
        .into_iter()
        .map(|(ft, mt)| {
            let fg = pooled_or_none(&ft, &mt)?;
            let bg = pooled_or_none(&ft, &mt.map(|v| 1.0 - v))?;
            Ok(LocalPair { fg, bg })
        })
        .collect()
}

/// Unit-normalized pixel vectors of a C×H×W map, pixel-major, with norms.
pub(crate) fn normalized_pixels(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = f.dims3().expect("C×H×W");
    let n = h * w;
    let d = f.data();
    let mut v = vec![0.0f64; n * c];
    let mut norms = vec![0.0f64; n];
    for p in 0..n {
        let mut s = 0.0;
        for k in 0..c {
            let x = d[k * n + p] as f64;
            v[p * c + k] = x;
            s += x * x;
        }
        let nrm = s.sqrt();
        norms[p] = nrm;
        if nrm >= COSINE_EPS {
            v[p * c..(p + 1) * c].iter_mut().for_each(|x| *x /= nrm);
        } else {
            v[p * c..(p + 1) * c].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    (v, norms)
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    (n >= COSINE_EPS).then(|| v.iter().map(|&x| x as f64 / n).collect())
}

/// Cosine similarity of every pixel against `proto`, as an H×W map.
fn cosine_map(pixels: &[f64], c: usize, h: usize, w: usize, proto: &[f32]) -> Tensor {
    let n = h * w;
    let data = match unit(proto) {
        None => vec![0.0; n],
        Some(u) => (0..n)
            .map(|p| {
                let px = &pixels[p * c..(p + 1) * c];
                (px.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()).clamp(-1.0, 1.0) as f32
            })
            .collect(),
    };
    Tensor::from_parts(vec![h, w], data)
}

/// Coarse query mask for one level: for each valid local pair the cosine maps
/// against its foreground and background prototypes are normalized jointly by
/// a two-way softmax, and the resulting probability maps are averaged over
/// pairs. Without any valid local pair the global pair is used.
pub fn self_match(fq: &Tensor, locals: &[LocalPair], global: Option<(&[f32], &[f32])>) -> Result<CoarseLevel> {
    let (c, h, w) = fq.dims3()?;
    let mut pairs: Vec<(&[f32], &[f32])> = locals.iter().filter_map(LocalPair::valid).collect();
    if pairs.is_empty() {
        pairs.extend(global);
    }
    if pairs.is_empty() {
        return Err(Error::NoValidPrototypes);
    }
    for (f, b) in &pairs {
        if f.len() != c || b.len() != c {
            return Err(Error::shape(format!("prototype length vs {c} channels")));
        }
    }
    let (pixels, _) = normalized_pixels(fq);
    let n = h * w;
    let mut fg = vec![0.0f64; n];
    let mut bg = vec![0.0f64; n];
    for (pf, pb) in &pairs {
        let cf = cosine_map(&pixels, c, h, w, pf);
        let cb = cosine_map(&pixels, c, h, w, pb);
        let (sf, sb) = softmax_pair(&cf, &cb)?;
        for i in 0..n {
            fg[i] += sf.data()[i] as f64;
            bg[i] += sb.data()[i] as f64;
        }
    }
    let k = pairs.len() as f64;
    let fg: Vec<f32> = fg.iter().map(|v| (v / k) as f32).collect();
    let bg: Vec<f32> = bg.iter().map(|v| (v / k) as f32).collect();
    Ok(CoarseLevel { fg: Tensor::from_parts(vec![h, w], fg), bg: Tensor::from_parts(vec![h, w], bg) })
}

/// Query prototypes by soft masked pooling with the coarse probabilities.
pub fn query_prototypes(fq: &Tensor, coarse: &CoarseLevel) -> Result<(Vec<f32>, Vec<f32>)> {
    Ok((masked_avg_pool(fq, &coarse.fg)?, masked_avg_pool(fq, &coarse.bg)?))
}

/// `C = [c_f/‖c_f‖, c_b/‖c_b‖]` as a `C_l×2` matrix.
pub fn build_prototype_matrix(cf: &[f32], cb: &[f32]) -> Result<Tensor> {
    if cf.len() != cb.len() {
        return Err(Error::shape(format!("prototype lengths {} vs {}", cf.len(), cb.len())));
    }
    let uf = unit(cf).ok_or(Error::ZeroPrototype)?;
    let ub = unit(cb).ok_or(Error::ZeroPrototype)?;
    let mut d = Vec::with_capacity(2 * cf.len());
    for (a, b) in uf.iter().zip(&ub) {
        d.push(*a as f32);
        d.push(*b as f32);
    }
    Ok(Tensor::from_parts(vec![cf.len(), 2], d))
}

/// `β·C_q⁺ + (1−β)·C_s⁺`.
pub fn blend_pinv(cq_plus: &Tensor, cs_plus: &Tensor, beta: f32) -> Result<Tensor> {
    cq_plus.zip_map(cs_plus, |q, s| beta * q + (1.0 - beta) * s)
}

/// `W = A·C⁺`.
pub fn solve_transform(a: &Tensor, c_plus: &Tensor) -> Result<Tensor> {
    let (rows, two) = a.dims2()?;
    let (two2, cols) = c_plus.dims2()?;
    if two != 2 || two2 != 2 || rows != cols {
        return Err(Error::shape(format!("A {:?} with C⁺ {:?}", a.shape(), c_plus.shape())));
    }
    tensor::matmul(a, c_plus)
}

/// Per-pixel `W·F(y, x)`.
pub fn apply_transform(w: &Tensor, f: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = f.dims3()?;
    if w.shape() != [c, c] {
        return Err(Error::shape(format!("W {:?} for {c}-channel features", w.shape())));
    }
    let n = h * wd;
    let (wm, fd) = (w.data(), f.data());
    let mut out = vec![0.0f64; c * n];
    for i in 0..c {
        let dst = &mut out[i * n..(i + 1) * n];
        for k in 0..c {
            let wik = wm[i * c + k] as f64;
            if wik == 0.0 {
                continue;
            }
            for (o, &x) in dst.iter_mut().zip(&fd[k * n..(k + 1) * n]) {
                *o += wik * x as f64;
            }
        }
    }
    Ok(Tensor::from_f64(vec![c, h, wd], &out))
}

fn mean_vectors(vs: &[Vec<f32>]) -> Vec<f32> {
    let c = vs[0].len();
    let k = vs.len() as f64;
    (0..c).map(|i| (vs.iter().map(|v| v[i] as f64).sum::<f64>() / k) as f32).collect()
}

fn mean_optional(vs: impl Iterator<Item = Option<Vec<f32>>>) -> Option<Vec<f32>> {
    let present: Vec<Vec<f32>> = vs.flatten().collect();
    (!present.is_empty()).then(|| mean_vectors(&present))
}

/// Support prototypes averaged over shots. Masks are at image resolution and
/// are bilinearly resized to every level.
pub fn support_prototypes(
    shots: &[(&FeaturePyramid, &Tensor)],
    spec: &PyramidSpec,
    cfg: &SmtConfig,
) -> Result<PrototypeSet> {
    if shots.is_empty() {
        return Err(Error::config("at least one support shot required"));
    }
    let mut levels = Vec::with_capacity(spec.levels());
    for l in 0..spec.levels() {
        let mut fgs = Vec::new();
        let mut bgs = Vec::new();
        let mut locals_per_shot = Vec::new();
        for (pyr, mask) in shots {
            let f = pyr.levels.get(l).ok_or_else(|| Error::shape("pyramid missing level"))?;
            let (_, h, w) = f.dims3()?;
            let m = resize_map(mask, h, w)?;
            let inv = m.map(|v| 1.0 - v);
            fgs.push(pooled_or_none(f, &m)?);
            bgs.push(pooled_or_none(f, &inv)?);
            locals_per_shot.push(local_prototypes(f, &m, cfg.gamma)?);
        }
        let fg = mean_optional(fgs.into_iter()).ok_or(Error::EmptyMask)?;
        let bg = mean_optional(bgs.into_iter()).ok_or(Error::EmptyMask)?;
        let tiles = locals_per_shot[0].len();
        let locals = (0..tiles)
            .map(|p| LocalPair {
                fg: mean_optional(locals_per_shot.iter().map(|s| s[p].fg.clone())),
                bg: mean_optional(locals_per_shot.iter().map(|s| s[p].bg.clone())),
            })
            .collect();
        levels.push(LevelPrototypes { fg, bg, locals });
    }
    Ok(PrototypeSet { levels })
}

/// Everything the forward pass of the transformation produces, kept for the
/// anchor gradient.
#[derive(Clone, Debug)]
pub struct SmtOutput {
    pub support_w: Vec<Tensor>,
    pub query_w: Vec<Tensor>,
    pub coarse: CoarseMask,
    pub support_prototypes: PrototypeSet,
    pub query_prototypes: Vec<(Vec<f32>, Vec<f32>)>,
    pub support_pinv: Vec<Tensor>,
    /// Blended query pseudo-inverse.
    pub query_pinv: Vec<Tensor>,
}

pub fn smt_forward(
    support: &[(&FeaturePyramid, &Tensor)],
    query: &FeaturePyramid,
    anchors: &AnchorSet,
    spec: &PyramidSpec,
    cfg: &SmtConfig,
) -> Result<SmtOutput> {
    cfg.validate()?;
    if query.len() != spec.levels() {
        return Err(Error::shape("query pyramid does not match spec"));
    }
    let protos = support_prototypes(support, spec, cfg)?;
    let l_count = spec.levels();
    let mut out = SmtOutput {
        support_w: Vec::with_capacity(l_count),
        query_w: Vec::with_capacity(l_count),
        coarse: CoarseMask { levels: Vec::with_capacity(l_count) },
        support_prototypes: protos,
        query_prototypes: Vec::with_capacity(l_count),
        support_pinv: Vec::with_capacity(l_count),
        query_pinv: Vec::with_capacity(l_count),
    };
    for l in 0..l_count {
        let lp = &out.support_prototypes.levels[l];
        let fq = &query.levels[l];
        let coarse = self_match(fq, &lp.locals, Some((&lp.fg, &lp.bg)))?;
        let (qf, qb) = query_prototypes(fq, &coarse)?;

        let cs = build_prototype_matrix(&lp.fg, &lp.bg)?;
        let cq = build_prototype_matrix(&qf, &qb)?;
        let cs_plus = tensor::pinv2(&cs, cfg.ridge)?;
        let cq_plus = blend_pinv(&tensor::pinv2(&cq, cfg.ridge)?, &cs_plus, cfg.beta)?;

        let g = spec.group(l);
        let ws = solve_transform(&anchors.matrix(g, Role::Support)?, &cs_plus)?;
        let wq = solve_transform(&anchors.matrix(g, Role::Query)?, &cq_plus)?;

        out.support_w.push(ws);
        out.query_w.push(wq);
        out.coarse.levels.push(coarse);
        out.query_prototypes.push((qf, qb));
        out.support_pinv.push(cs_plus);
        out.query_pinv.push(cq_plus);
    }
    Ok(out)
}

/// Support transform of a single image from its own mask (self-matching with
/// itself as support), used for feature-distribution diagnostics.
pub fn self_transforms(
    pyramid: &FeaturePyramid,
    mask: &Tensor,
    anchors: &AnchorSet,
    spec: &PyramidSpec,
    cfg: &SmtConfig,
) -> Result<Vec<Tensor>> {
    let protos = support_prototypes(&[(pyramid, mask)], spec, cfg)?;
    protos
        .levels
        .iter()
        .enumerate()
        .map(|(l, lp)| {
            let cs = build_prototype_matrix(&lp.fg, &lp.bg)?;
            let a = anchors.matrix(spec.group(l), Role::Support)?;
            solve_transform(&a, &tensor::pinv2(&cs, cfg.ridge)?)
        })
        .collect()
}

/// Back-propagates `∂L/∂W` for both roles onto the raw anchor vectors through
/// `W = A·C⁺` and the column normalization of `A`.
pub fn anchor_backward(
    anchors: &AnchorSet,
    spec: &PyramidSpec,
    out: &SmtOutput,
    grad_support_w: &[Tensor],
    grad_query_w: &[Tensor],
) -> Result<AnchorSet> {
    let mut grads = anchors.zeros_like();
    for l in 0..spec.levels() {
        let g = spec.group(l);
        for (role, gw, pinv) in [
            (Role::Support, &grad_support_w[l], &out.support_pinv[l]),
            (Role::Query, &grad_query_w[l], &out.query_pinv[l]),
        ] {
            // ∂L/∂A = ∂L/∂W · (C⁺)ᵀ
            let ga = tensor::matmul(gw, &tensor::transpose(pinv)?)?;
            let raw = anchors.get(g)?.pair(role);
            let gsum = grads.get_mut(g);
            let dst = match role {
                Role::Support => &mut gsum.support,
                Role::Query => &mut gsum.query,
            };
            for (col, a, d) in [(0, &raw.fg, &mut dst.fg), (1, &raw.bg, &mut dst.bg)] {
                let c = a.len();
                let dhat: Vec<f64> = (0..c).map(|i| ga.data()[i * 2 + col] as f64).collect();
                let da = normalize_backward(a.data(), &dhat)?;
                for (x, v) in d.data_mut().iter_mut().zip(da) {
                    *x += v as f32;
                }
            }
        }
    }
    Ok(grads)
}

/// Gradient through `â = a/‖a‖`: `(I − â âᵀ)·∂â / ‖a‖`.
fn normalize_backward(a: &[f32], dhat: &[f64]) -> Result<Vec<f64>> {
    let n = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if n < COSINE_EPS {
        return Err(Error::ZeroPrototype);
    }
    let hat: Vec<f64> = a.iter().map(|&x| x as f64 / n).collect();
    let proj: f64 = hat.iter().zip(dhat).map(|(h, d)| h * d).sum();
    Ok(hat.iter().zip(dhat).map(|(h, d)| (d - h * proj) / n).collect())
}
