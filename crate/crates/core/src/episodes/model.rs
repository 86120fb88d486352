//! The full segmentation model: frozen feature extractor, trainable anchors
//! and fusion network, wired through the transformation and correlation
//! stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dhc::{self, DhcLevel};
use crate::error::{Error, Result};
use crate::features::{ExtractorMode, FeatureExtractor, FeaturePyramid, Image, PyramidSpec};
use crate::fusion::{self, CorrView, Depth, FusionGrads, FusionParams, HeadCache};
use crate::objectives::{bce_f64, bce_grad_f64, loss_coarse, loss_total, LossWeights};
use crate::smt::{self, AnchorSet, CoarseMask, SmtConfig, SmtOutput};
use crate::tensor::Tensor;

/// How the two heads become a binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// `M_f ≥ 0.5`.
    #[default]
    F,
    /// `(M_f + 1 − M_b)/2 ≥ 0.5`.
    Fb,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub pyramid: PyramidSpec,
    pub extractor: ExtractorMode,
    pub smt: SmtConfig,
    pub weights: LossWeights,
    /// Use `W = I` instead of the self-matching transforms.
    pub bypass_smt: bool,
    pub combine: Combine,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.smt.validate()?;
        self.weights.validate()
    }
}

/// One labelled support image, already featurized.
#[derive(Clone, Copy, Debug)]
pub struct Shot<'a> {
    pub features: &'a FeaturePyramid,
    pub mask: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub m_f: Tensor,
    pub m_b: Tensor,
    pub binary: Tensor,
    pub coarse: CoarseMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    extractor: FeatureExtractor,
    pub anchors: AnchorSet,
    pub fusion: FusionParams,
}

struct ShotState {
    dhc: Vec<DhcLevel>,
    fg: HeadCache,
    bg: HeadCache,
}

/// Cached forward pass of one query against a support set.
pub(crate) struct Forward {
    smt: SmtOutput,
    shots: Vec<ShotState>,
    out_hw: (usize, usize),
    pub m_f: Vec<f64>,
    pub m_b: Vec<f64>,
}

fn mean_outputs<'a>(heads: impl Iterator<Item = &'a HeadCache>, k: usize, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for h in heads {
        for (a, b) in acc.iter_mut().zip(&h.tail.out) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|v| *v /= k as f64);
    acc
}

impl Forward {
    fn average(&mut self) {
        let k = self.shots.len();
        let n = self.out_hw.0 * self.out_hw.1;
        self.m_f = mean_outputs(self.shots.iter().map(|s| &s.fg), k, n);
        self.m_b = mean_outputs(self.shots.iter().map(|s| &s.bg), k, n);
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::new(config.pyramid.clone(), config.extractor, seed)?;
        let anchors = AnchorSet::init(&config.pyramid, seed);
        let fusion = FusionParams::init(config.pyramid.levels(), seed);
        Ok(Self { config, seed, extractor, anchors, fusion })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: ModelConfig, seed: u64, anchors: AnchorSet, fusion: FusionParams) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let expect: Vec<(String, Vec<usize>)> =
            m.named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        m.anchors = anchors;
        m.fusion = fusion;
        let got: Vec<(String, Vec<usize>)> = m.named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expect != got {
            return Err(Error::shape("stored parameters do not match the model configuration"));
        }
        Ok(m)
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.config.pyramid
    }

    pub fn extract(&self, img: &Image) -> Result<FeaturePyramid> {
        self.extractor.extract(img)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.anchors.named();
        v.extend(self.fusion.named());
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.anchors.named_mut();
        v.extend(self.fusion.named_mut());
        v
    }

    /// Fingerprint of every parameter tensor by name.
    pub fn param_hashes(&self) -> BTreeMap<String, u64> {
        self.named().into_iter().map(|(n, t)| (n, t.fingerprint())).collect()
    }

    fn identity_transforms(&self) -> Vec<Tensor> {
        self.config.pyramid.channels.iter().map(|&c| Tensor::eye(c)).collect()
    }

    pub(crate) fn forward(&self, shots: &[Shot], query: &FeaturePyramid, out_hw: (usize, usize)) -> Result<Forward> {
        if shots.is_empty() {
            return Err(Error::config("an episode needs at least one support shot"));
        }
        let spec = &self.config.pyramid;
        let pairs: Vec<(&FeaturePyramid, &Tensor)> = shots.iter().map(|s| (s.features, s.mask)).collect();
        let smt = smt::smt_forward(&pairs, query, &self.anchors, spec, &self.config.smt)?;
        let (ws, wq) = if self.config.bypass_smt {
            (self.identity_transforms(), self.identity_transforms())
        } else {
            (smt.support_w.clone(), smt.query_w.clone())
        };
        let states = shots
            .iter()
            .map(|s| {
                let levels = dhc::dhc_forward_cached(s.features, s.mask, query, &ws, &wq)?;
                let view = |f: bool| -> Vec<CorrView> {
                    levels
                        .iter()
                        .map(|l| CorrView {
                            data: if f { &l.corr_f } else { &l.corr_b },
                            q: (l.shape[0], l.shape[1]),
                            s: (l.shape[2], l.shape[3]),
                        })
                        .collect()
                };
                let (fg, bg) = rayon::join(
                    || fusion::head_forward(&view(true), &self.fusion, out_hw),
                    || fusion::head_forward(&view(false), &self.fusion, out_hw),
                );
                Ok(ShotState { fg: fg?, bg: bg?, dhc: levels })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fwd = Forward { smt, shots: states, out_hw, m_f: Vec::new(), m_b: Vec::new() };
        fwd.average();
        Ok(fwd)
    }

    /// Re-runs only the 2D convolution stack; valid while the sep4d kernels
    /// and anchors are unchanged.
    pub(crate) fn refresh_tail(&self, fwd: &mut Forward) {
        for s in &mut fwd.shots {
            s.fg.tail = fusion::tail_forward(&s.fg.trunk, &self.fusion, fwd.out_hw);
            s.bg.tail = fusion::tail_forward(&s.bg.trunk, &self.fusion, fwd.out_hw);
        }
        fwd.average();
    }

    /// Named gradients given `∂L/∂M_f` and `∂L/∂M_b`. `depth` bounds how far
    /// back the pass goes; anchors receive gradients only at [`Depth::Corr`].
    pub(crate) fn backward(
        &self,
        fwd: &Forward,
        query: &FeaturePyramid,
        grad_m_f: &[f64],
        grad_m_b: &[f64],
        depth: Depth,
    ) -> Result<Gradients> {
        let k = fwd.shots.len() as f64;
        let gf: Vec<f64> = grad_m_f.iter().map(|g| g / k).collect();
        let gb: Vec<f64> = grad_m_b.iter().map(|g| g / k).collect();
        let depth = if self.config.bypass_smt { depth.min(Depth::Trunk) } else { depth };
        let mut fg = FusionGrads::zeros(&self.fusion);
        let levels = self.config.pyramid.levels();
        let zeros = |c: usize| vec![0.0; c * c];
        let mut gws: Vec<Vec<f64>> = self.config.pyramid.channels.iter().map(|&c| zeros(c)).collect();
        let mut gwq = gws.clone();
        for s in &fwd.shots {
            let cf = fusion::head_backward(&s.fg, &self.fusion, &gf, &mut fg, depth);
            let cb = fusion::head_backward(&s.bg, &self.fusion, &gb, &mut fg, depth);
            if depth == Depth::Corr {
                dhc::dhc_backward(&s.dhc, query, &cf, &cb, &mut gws, &mut gwq);
            }
        }
        let mut out = Gradients::new();
        if depth == Depth::Corr {
            let spec = &self.config.pyramid;
            let to_t = |v: &[Vec<f64>]| -> Vec<Tensor> {
                (0..levels).map(|l| Tensor::from_f64(vec![spec.channels[l]; 2], &v[l])).collect()
            };
            let ga = smt::anchor_backward(&self.anchors, spec, &fwd.smt, &to_t(&gws), &to_t(&gwq))?;
            out.extend(ga.named().into_iter().map(|(n, t)| (n, t.clone())));
        }
        let fp = fg.into_params(&self.fusion);
        out.extend(fp.named().into_iter().map(|(n, t)| (n, t.clone())));
        Ok(out)
    }

    fn binarize(&self, m_f: &[f64], m_b: &[f64]) -> Vec<f64> {
        m_f.iter()
            .zip(m_b)
            .map(|(&f, &b)| {
                let p = match self.config.combine {
                    Combine::F => f,
                    Combine::Fb => 0.5 * (f + 1.0 - b),
                };
                if p >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn predict(&self, shots: &[Shot], query: &FeaturePyramid, out_hw: (usize, usize)) -> Result<Prediction> {
        let fwd = self.forward(shots, query, out_hw)?;
        Ok(self.prediction(&fwd))
    }

    pub(crate) fn prediction(&self, fwd: &Forward) -> Prediction {
        let shape = vec![fwd.out_hw.0, fwd.out_hw.1];
        Prediction {
            m_f: Tensor::from_f64(shape.clone(), &fwd.m_f),
            m_b: Tensor::from_f64(shape.clone(), &fwd.m_b),
            binary: Tensor::from_f64(shape, &self.binarize(&fwd.m_f, &fwd.m_b)),
            coarse: fwd.smt.coarse.clone(),
        }
    }

    pub(crate) fn losses(&self, fwd: &Forward, query_mask: &Tensor) -> Result<Losses> {
        let mq = query_mask.to_f64();
        if mq.len() != fwd.m_f.len() {
            return Err(Error::shape("query mask does not match the prediction"));
        }
        let inv: Vec<f64> = mq.iter().map(|v| 1.0 - v).collect();
        let w = &self.config.weights;
        let l1 = loss_coarse(&fwd.smt.coarse, query_mask)?;
        let l2 = bce_f64(&fwd.m_f, &mq) + w.alpha1 * bce_f64(&fwd.m_b, &inv);
        Ok(Losses { l1, l2, total: loss_total(l1, l2, w) })
    }

    /// Training losses and gradients for every parameter. The coarse-mask
    /// term depends only on frozen features, so it contributes to the loss
    /// value but not to the gradients.
    pub fn loss_and_grads(
        &self,
        shots: &[Shot],
        query: &FeaturePyramid,
        query_mask: &Tensor,
    ) -> Result<(Losses, Gradients)> {
        let out_hw = query_mask.dims2()?;
        let fwd = self.forward(shots, query, out_hw)?;
        let losses = self.losses(&fwd, query_mask)?;
        let mq = query_mask.to_f64();
        let inv: Vec<f64> = mq.iter().map(|v| 1.0 - v).collect();
        let gf = bce_grad_f64(&fwd.m_f, &mq);
        let gb: Vec<f64> = bce_grad_f64(&fwd.m_b, &inv).iter().map(|g| g * self.config.weights.alpha1).collect();
        let grads = self.backward(&fwd, query, &gf, &gb, Depth::Corr)?;
        Ok((losses, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::data::{gen_domain, SyntheticDomain};

    fn tiny() -> (Model, Vec<(FeaturePyramid, Tensor)>) {
        let cfg = ModelConfig {
            pyramid: PyramidSpec { channels: vec![8, 8, 8], strides: vec![4, 8, 16] },
            ..Default::default()
        };
        let m = Model::new(cfg, 3).unwrap();
        let d = SyntheticDomain { image_size: [64, 64], ..SyntheticDomain::source() };
        let ds = gen_domain(&d, 8, 1).unwrap();
        let items = ds.samples.iter().map(|s| (m.extract(&s.image).unwrap(), s.mask.clone())).collect();
        (m, items)
    }

    /// Loss as a function of a single parameter tensor, in `f64`.
    fn loss_with(m: &Model, items: &[(FeaturePyramid, Tensor)]) -> f64 {
        let shot = Shot { features: &items[0].0, mask: &items[0].1 };
        let fwd = m.forward(&[shot], &items[4].0, (64, 64)).unwrap();
        m.losses(&fwd, &items[4].1).unwrap().l2
    }

    #[test]
    fn anchor_gradients_match_finite_differences() {
        let (m, items) = tiny();
        let shot = Shot { features: &items[0].0, mask: &items[0].1 };
        let (_, grads) = m.loss_and_grads(&[shot], &items[4].0, &items[4].1).unwrap();
        for name in ["anchor.low.support.fg", "anchor.mid.query.bg", "anchor.high.support.bg"] {
            let g = &grads[name];
            // Vector-relative error: single entries near 1e-5 sit at the f32 noise floor.
            let (mut diff, mut norm) = (0.0f64, 0.0f64);
            for i in 0..g.len() {
                let h = 1e-3f32;
                let orig = m.named().into_iter().find(|(n, _)| n == name).unwrap().1.data()[i];
                let bump = |v: f32| {
                    let mut mm = m.clone();
                    for (n, t) in mm.named_mut() {
                        if n == name {
                            t.data_mut()[i] = v;
                        }
                    }
                    loss_with(&mm, &items)
                };
                let num = (bump(orig + h) - bump(orig - h)) / ((orig + h) as f64 - (orig - h) as f64);
                let a = g.data()[i] as f64;
                diff += (a - num).powi(2);
                norm += num.powi(2);
            }
            let rel = (diff / norm).sqrt();
            assert!(rel < 1e-2, "{name}: {rel}");
        }
    }

    #[test]
    fn bypass_has_no_anchor_gradients() {
        let (mut m, items) = tiny();
        m.config.bypass_smt = true;
        let shot = Shot { features: &items[0].0, mask: &items[0].1 };
        let (l, grads) = m.loss_and_grads(&[shot], &items[4].0, &items[4].1).unwrap();
        assert!(l.total.is_finite());
        assert!(grads.keys().all(|k| k.starts_with("fusion.")));
    }

    #[test]
    fn predictions_are_deterministic_and_bounded() {
        let (m, items) = tiny();
        let shots =
            [Shot { features: &items[0].0, mask: &items[0].1 }, Shot { features: &items[1].0, mask: &items[1].1 }];
        let a = m.predict(&shots, &items[4].0, (64, 64)).unwrap();
        let b = m.predict(&shots, &items[4].0, (64, 64)).unwrap();
        assert_eq!(a, b);
        assert!(a.m_f.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(a.binary.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
