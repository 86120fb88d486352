//! Losses, Adam, and a central-difference gradient checker.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smt::CoarseMask;
use crate::tensor::{resize_map, Tensor};

/// Predictions are clipped to `[CLIP, 1 − CLIP]` before taking logs.
pub const CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the background term in the dual loss.
    pub alpha1: f64,
    /// Weight of the coarse-mask loss in the total.
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(CLIP, 1.0 - CLIP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Derivative of [`bce_term`] in `p`; zero where the clip is active.
#[inline]
pub(crate) fn bce_term_grad(p: f64, t: f64) -> f64 {
    if p <= CLIP || p >= 1.0 - CLIP {
        return 0.0;
    }
    (p - t) / (p * (1.0 - p))
}

pub(crate) fn bce_f64(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(&p, &t)| bce_term(p, t)).sum::<f64>() / pred.len() as f64
}

/// `∂ bce / ∂ pred`, including the `1/N` of the mean.
pub(crate) fn bce_grad_f64(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(&p, &t)| bce_term_grad(p, t) / n).collect()
}

/// Mean binary cross-entropy; soft targets allowed.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    Ok(bce_f64(&pred.to_f64(), &target.to_f64()))
}

pub fn bce_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.expect_same_shape(target)?;
    Ok(Tensor::from_f64(pred.shape().to_vec(), &bce_grad_f64(&pred.to_f64(), &target.to_f64())))
}

/// Mean over levels of the foreground-channel BCE against the query mask
/// resized to each level.
pub fn loss_coarse(coarse: &CoarseMask, query_mask: &Tensor) -> Result<f64> {
    if coarse.levels.is_empty() {
        return Err(Error::shape("coarse mask has no levels"));
    }
    let mut total = 0.0;
    for lv in &coarse.levels {
        let (h, w) = lv.fg.dims2()?;
        total += bce(&lv.fg, &resize_map(query_mask, h, w)?)?;
    }
    Ok(total / coarse.levels.len() as f64)
}

/// `BCE(M_f, M_q) + α1·BCE(M_b, 1 − M_q)`.
pub fn loss_dual(m_f: &Tensor, m_b: &Tensor, query_mask: &Tensor, w: &LossWeights) -> Result<f64> {
    m_b.expect_same_shape(query_mask)?;
    let inv = query_mask.map(|v| 1.0 - v);
    Ok(bce(m_f, query_mask)? + w.alpha1 * bce(m_b, &inv)?)
}

/// `α2·L1 + L2`.
pub fn loss_total(l1: f64, l2: f64, w: &LossWeights) -> f64 {
    w.alpha2 * l1 + l2
}

/// Mean of per-shot BCEs.
pub fn loss_tsf(pred: &[Tensor], gt: &[Tensor]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} shots", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += bce(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adam state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: BTreeMap::new() }
    }
}

/// One bias-corrected Adam update of every named parameter that has a
/// gradient. Parameters without a gradient entry are left alone.
pub fn adam_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<()> {
    if !(state.lr >= 0.0) {
        return Err(Error::config(format!("learning rate {} must be non-negative", state.lr)));
    }
    for (name, p) in params {
        let Some(g) = grads.get(&name) else { continue };
        p.expect_same_shape(g)?;
        let mo = state.moments.entry(name).or_insert_with(|| Moments {
            m: Tensor::zeros(p.shape().to_vec()),
            v: Tensor::zeros(p.shape().to_vec()),
            t: 0,
        });
        p.expect_same_shape(&mo.m)?;
        mo.t += 1;
        let (b1, b2) = (state.beta1, state.beta2);
        let c1 = 1.0 - b1.powi(mo.t as i32);
        let c2 = 1.0 - b2.powi(mo.t as i32);
        let (md, vd) = (mo.m.data_mut(), mo.v.data_mut());
        for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi as f64;
            let m = b1 * md[i] as f64 + (1.0 - b1) * gi;
            let v = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
            md[i] = m as f32;
            vd[i] = v as f32;
            let step = state.lr * (m / c1) / ((v / c2).sqrt() + state.eps);
            *x = (*x as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Central-difference check of `analytic` against `f` at `params`. Returns
/// the largest relative error `|a − n| / max(|a|, |n|, 1e-8)` over all
/// coordinates.
pub fn fd_gradcheck(f: impl Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64], h: f64) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::shape("gradient length differs from parameter length"));
    }
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss(format!("coordinate {i}")));
        }
        let num = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max(relative_error(a, num));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smt::CoarseLevel;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        let half = Tensor::full(vec![2, 2], 0.5);
        let tgt = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_abs_diff_eq!(bce(&half, &tgt).unwrap(), LN_2, epsilon = 1e-12);
        assert!(bce(&tgt, &tgt).unwrap() <= 1e-6);
        assert_abs_diff_eq!(bce(&t(&[1], &[0.9]), &t(&[1], &[1.0])).unwrap(), 0.1053605, epsilon = 1e-6);
        assert!(matches!(bce(&half, &Tensor::zeros(vec![4])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bce_grad_matches_fd() {
        let p = [0.3, 0.8, 0.55];
        let tg = [0.0, 1.0, 0.4];
        let g = bce_grad_f64(&p, &tg);
        let err = fd_gradcheck(|x| bce_f64(x, &tg), &p, &g, 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn coarse_examples() {
        let m = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let perfect = CoarseMask { levels: vec![CoarseLevel { fg: m.clone(), bg: m.map(|v| 1.0 - v) }] };
        assert!(loss_coarse(&perfect, &m).unwrap() < 1e-6);
        let half = CoarseMask {
            levels: vec![CoarseLevel { fg: Tensor::full(vec![2, 2], 0.5), bg: Tensor::full(vec![2, 2], 0.5) }],
        };
        assert_abs_diff_eq!(loss_coarse(&half, &m).unwrap(), LN_2, epsilon = 1e-9);

        // Two levels with BCE 0.2 and 0.4 on a single all-ones pixel.
        let one = Tensor::full(vec![1, 1], 1.0);
        let lv = |b: f64| {
            let p = (-b).exp() as f32;
            CoarseLevel { fg: Tensor::full(vec![1, 1], p), bg: Tensor::full(vec![1, 1], 1.0 - p) }
        };
        let two = CoarseMask { levels: vec![lv(0.2), lv(0.4)] };
        assert_abs_diff_eq!(loss_coarse(&two, &one).unwrap(), 0.3, epsilon = 1e-6);
    }

    #[test]
    fn dual_and_total_examples() {
        let m = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let w = LossWeights::default();
        let inv = m.map(|v| 1.0 - v);
        assert!(loss_dual(&m, &inv, &m, &w).unwrap() < 2e-6);
        let half = Tensor::full(vec![2, 2], 0.5);
        assert_abs_diff_eq!(loss_dual(&half, &half, &m, &w).unwrap(), 2.0 * LN_2, epsilon = 1e-9);
        let w0 = LossWeights { alpha1: 0.0, ..w };
        let mf = t(&[2, 2], &[0.7, 0.2, 0.1, 0.9]);
        assert_eq!(loss_dual(&mf, &half, &m, &w0).unwrap(), bce(&mf, &m).unwrap());

        assert_eq!(loss_total(0.0, 1.3, &w), 1.3);
        assert_eq!(loss_total(2.0, 1.0, &w), 2.0);
        assert_eq!(loss_total(5.0, 1.0, &LossWeights { alpha2: 0.0, ..w }), 1.0);
    }

    #[test]
    fn tsf_examples() {
        let one = Tensor::full(vec![1, 1], 1.0);
        let p = |b: f64| Tensor::full(vec![1, 1], (-b).exp() as f32);
        assert_abs_diff_eq!(loss_tsf(&[p(0.4), p(0.6)], &[one.clone(), one.clone()]).unwrap(), 0.5, epsilon = 1e-6);
        assert!(loss_tsf(std::slice::from_ref(&one), std::slice::from_ref(&one)).unwrap() < 1e-6);
        assert_abs_diff_eq!(
            loss_tsf(&[Tensor::full(vec![1, 1], 0.5)], std::slice::from_ref(&one)).unwrap(),
            LN_2,
            epsilon = 1e-9
        );
        assert!(loss_tsf(&[], &[]).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut p = t(&[3], &[1.0, -2.0, 0.5]);
        let mut st = OptimState::new(1e-2);
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::zeros(vec![3]));
        adam_step(vec![("p".into(), &mut p)], &g, &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.moments["p"].t, 1);

        let mut q = t(&[3], &[1.0, -2.0, 0.5]);
        let mut st = OptimState::new(1e-2);
        g.insert("q".to_string(), t(&[3], &[3.0, -0.5, 1e-3]));
        adam_step(vec![("q".into(), &mut q)], &g, &mut st).unwrap();
        for (after, (before, sign)) in q.data().iter().zip([(1.0f32, 1.0f32), (-2.0, -1.0), (0.5, 1.0)]) {
            assert_abs_diff_eq!(*after, before - 1e-2 * sign, epsilon = 1e-6);
        }
    }

    #[test]
    fn gradcheck_examples() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - 0.5 * x[1] * x[1];
        let x = [0.7, -1.2];
        let g = [2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] - x[1]];
        assert!(fd_gradcheck(f, &x, &g, 1e-3).unwrap() <= 1e-6);
        let wrong = [2.0 * g[0], 2.0 * g[1]];
        let err = fd_gradcheck(f, &x, &wrong, 1e-3).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
        assert!(fd_gradcheck(|_| f64::NAN, &x, &g, 1e-3).is_err());
    }
}
