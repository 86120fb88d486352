//! IoU and feature-distribution distances.

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::tensor::Tensor;

/// `|pred ∧ gt| / |pred ∨ gt|` on masks thresholded at 0.5; two empty masks
/// score 1.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pred.expect_same_shape(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Per-level channel means of one pyramid, optionally pushed through per-level
/// transforms (the mean commutes with a linear map).
pub fn channel_means(p: &FeaturePyramid, transforms: Option<&[Tensor]>) -> Result<Vec<Vec<f64>>> {
    p.levels
        .iter()
        .enumerate()
        .map(|(l, f)| {
            let (c, h, w) = f.dims3()?;
            let n = h * w;
            let d = f.data();
            let mu: Vec<f64> =
                (0..c).map(|k| d[k * n..(k + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64).collect();
            match transforms {
                None => Ok(mu),
                Some(ws) => {
                    let w = ws.get(l).ok_or_else(|| Error::shape("missing transform for level"))?;
                    if w.shape() != [c, c] {
                        return Err(Error::shape(format!("transform {:?} for {c} channels", w.shape())));
                    }
                    let wd = w.data();
                    Ok((0..c).map(|i| (0..c).map(|j| wd[i * c + j] as f64 * mu[j]).sum()).collect())
                }
            }
        })
        .collect()
}

/// Average of [`channel_means`] over a set of images.
pub fn domain_means(pyramids: &[FeaturePyramid], transforms: Option<&[Vec<Tensor>]>) -> Result<Vec<Vec<f64>>> {
    let first = pyramids.first().ok_or_else(|| Error::shape("no pyramids"))?;
    let mut acc: Vec<Vec<f64>> = first.levels.iter().map(|t| vec![0.0; t.shape()[0]]).collect();
    for (i, p) in pyramids.iter().enumerate() {
        let ws = match transforms {
            Some(t) => Some(t.get(i).ok_or_else(|| Error::shape("one transform set per pyramid"))?.as_slice()),
            None => None,
        };
        let m = channel_means(p, ws)?;
        if m.len() != acc.len() {
            return Err(Error::shape("pyramids differ in depth"));
        }
        for (a, v) in acc.iter_mut().zip(m) {
            if a.len() != v.len() {
                return Err(Error::shape("pyramids differ in channel count"));
            }
            a.iter_mut().zip(v).for_each(|(x, y)| *x += y);
        }
    }
    let n = pyramids.len() as f64;
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x /= n));
    Ok(acc)
}

/// Euclidean distance between two sets of per-level mean vectors, per level.
pub fn level_distances(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape("mean vectors differ in shape"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()).collect())
}

/// Mean over levels of the distance between the two sets' channel means,
/// each image optionally transformed by its own per-level matrices first.
pub fn feature_distance(
    a: &[FeaturePyramid],
    b: &[FeaturePyramid],
    w_a: &[Vec<Tensor>],
    w_b: &[Vec<Tensor>],
    transformed: bool,
) -> Result<f64> {
    let (ta, tb) = if transformed { (Some(w_a), Some(w_b)) } else { (None, None) };
    let d = level_distances(&domain_means(a, ta)?, &domain_means(b, tb)?)?;
    Ok(mean(&d))
}
