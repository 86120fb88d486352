//! Dual hypercorrelation: ReLU-clipped cosine correlations between every
//! transformed query pixel and every transformed support-foreground (resp.
//! support-background) pixel.

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::tensor::{resize_map, Tensor, COSINE_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeatures {
    pub fg: Tensor,
    pub bg: Tensor,
}

/// `F ⊙ M` and `F ⊙ (1 − M)`, the mask broadcast over channels.
pub fn mask_features(f: &Tensor, m: &Tensor) -> Result<MaskedFeatures> {
    let (c, h, w) = f.dims3()?;
    if m.shape() != [h, w] {
        return Err(Error::shape(format!("mask {:?} vs features {h}×{w}", m.shape())));
    }
    let n = h * w;
    let (fd, md) = (f.data(), m.data());
    let mut fg = Vec::with_capacity(c * n);
    let mut bg = Vec::with_capacity(c * n);
    for k in 0..c {
        for p in 0..n {
            let v = fd[k * n + p];
            let a = v * md[p];
            fg.push(a);
            bg.push(v - a);
        }
    }
    Ok(MaskedFeatures { fg: Tensor::from_parts(vec![c, h, w], fg), bg: Tensor::from_parts(vec![c, h, w], bg) })
}

/// Pixel vectors after `W`, stored pixel-major as unit vectors plus norms.
#[derive(Clone, Debug)]
pub(crate) struct Transformed {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub hat: Vec<f64>,
    pub norm: Vec<f64>,
}

pub(crate) fn transform_pixels(w: &Tensor, f: &Tensor) -> Result<Transformed> {
    let (c, h, wd) = f.dims3()?;
    if w.shape() != [c, c] {
        return Err(Error::shape(format!("W {:?} for {c}-channel features", w.shape())));
    }
    let n = h * wd;
    let wm = w.to_f64();
    let fd = f.data();
    let mut hat = vec![0.0f64; n * c];
    let mut norm = vec![0.0f64; n];
    let mut px = vec![0.0f64; c];
    for p in 0..n {
        for k in 0..c {
            px[k] = fd[k * n + p] as f64;
        }
        let out = &mut hat[p * c..(p + 1) * c];
        for i in 0..c {
            out[i] = wm[i * c..(i + 1) * c].iter().zip(&px).map(|(a, b)| a * b).sum();
        }
        let nrm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        norm[p] = nrm;
        if nrm >= COSINE_EPS {
            out.iter_mut().for_each(|v| *v /= nrm);
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(Transformed { c, h, w: wd, hat, norm })
}

/// `[q_row, q_col, s_row, s_col]` correlation, flattened.
pub(crate) fn correlate(q: &Transformed, s: &Transformed) -> Vec<f64> {
    let c = q.c;
    let (nq, ns) = (q.norm.len(), s.norm.len());
    let mut out = vec![0.0f64; nq * ns];
    for i in 0..nq {
        let qi = &q.hat[i * c..(i + 1) * c];
        let row = &mut out[i * ns..(i + 1) * ns];
        for (j, o) in row.iter_mut().enumerate() {
            let sj = &s.hat[j * c..(j + 1) * c];
            let d: f64 = qi.iter().zip(sj).map(|(a, b)| a * b).sum();
            *o = d.clamp(0.0, 1.0);
        }
    }
    out
}

/// Gradients of the loss w.r.t. the (unnormalized) transformed query and
/// support vectors, pixel-major.
pub(crate) fn correlate_backward(q: &Transformed, s: &Transformed, corr: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = q.c;
    let (nq, ns) = (q.norm.len(), s.norm.len());
    let mut gq = vec![0.0f64; nq * c];
    let mut gs = vec![0.0f64; ns * c];
    let mut s_coef = vec![0.0f64; ns];
    for i in 0..nq {
        let qi = &q.hat[i * c..(i + 1) * c];
        let mut q_coef = 0.0;
        let gqi = &mut gq[i * c..(i + 1) * c];
        for j in 0..ns {
            let k = i * ns + j;
            let cval = corr[k];
            if cval <= 0.0 {
                continue;
            }
            let g = grad[k];
            if g == 0.0 {
                continue;
            }
            let sj = &s.hat[j * c..(j + 1) * c];
            for (a, b) in gqi.iter_mut().zip(sj) {
                *a += g * b;
            }
            q_coef += g * cval;
            let gsj = &mut gs[j * c..(j + 1) * c];
            for (a, b) in gsj.iter_mut().zip(qi) {
                *a += g * b;
            }
            s_coef[j] += g * cval;
        }
        let nrm = q.norm[i];
        if nrm < COSINE_EPS {
            gqi.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for (a, b) in gqi.iter_mut().zip(qi) {
                *a = (*a - q_coef * b) / nrm;
            }
        }
    }
    for j in 0..ns {
        let nrm = s.norm[j];
        let sj = &s.hat[j * c..(j + 1) * c];
        let gsj = &mut gs[j * c..(j + 1) * c];
        if nrm < COSINE_EPS {
            gsj.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for (a, b) in gsj.iter_mut().zip(sj) {
                *a = (*a - s_coef[j] * b) / nrm;
            }
        }
    }
    (gq, gs)
}

/// `Σ_p g_p f_pᵀ` accumulated into a row-major `C×C` buffer.
pub(crate) fn accumulate_weight_grad(dst: &mut [f64], g: &[f64], f: &Tensor) {
    let (c, h, w) = f.dims3().expect("C×H×W");
    let n = h * w;
    let fd = f.data();
    for p in 0..n {
        let gp = &g[p * c..(p + 1) * c];
        for (i, &gi) in gp.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let row = &mut dst[i * c..(i + 1) * c];
            for (k, r) in row.iter_mut().enumerate() {
                *r += gi * fd[k * n + p] as f64;
            }
        }
    }
}

fn corr_shape(q: &Transformed, s: &Transformed) -> Vec<usize> {
    vec![q.h, q.w, s.h, s.w]
}

/// 4D correlation of transformed support features `fs` against transformed
/// query features `fq`, indexed `[q_row, q_col, s_row, s_col]`.
pub fn correlation4d(fs: &Tensor, fq: &Tensor, ws: &Tensor, wq: &Tensor) -> Result<Tensor> {
    let s = transform_pixels(ws, fs)?;
    let q = transform_pixels(wq, fq)?;
    if s.c != q.c {
        return Err(Error::shape(format!("support {} vs query {} channels", s.c, q.c)));
    }
    Ok(Tensor::from_f64(corr_shape(&q, &s), &correlate(&q, &s)))
}

#[derive(Clone, Debug)]
pub struct DhcOutput {
    pub corr_f: Vec<Tensor>,
    pub corr_b: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub(crate) struct DhcLevel {
    pub support_fg: Transformed,
    pub support_bg: Transformed,
    pub query: Transformed,
    pub masked: MaskedFeatures,
    pub corr_f: Vec<f64>,
    pub corr_b: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Forward pass keeping everything needed to differentiate w.r.t. `W`.
pub(crate) fn dhc_forward_cached(
    support: &FeaturePyramid,
    support_mask: &Tensor,
    query: &FeaturePyramid,
    ws: &[Tensor],
    wq: &[Tensor],
) -> Result<Vec<DhcLevel>> {
    let levels = support.len();
    if query.len() != levels || ws.len() != levels || wq.len() != levels {
        return Err(Error::shape("level count mismatch between pyramids and transforms"));
    }
    (0..levels)
        .map(|l| {
            let fs = &support.levels[l];
            let (_, h, w) = fs.dims3()?;
            let m = resize_map(support_mask, h, w)?;
            let masked = mask_features(fs, &m)?;
            let support_fg = transform_pixels(&ws[l], &masked.fg)?;
            let support_bg = transform_pixels(&ws[l], &masked.bg)?;
            let q = transform_pixels(&wq[l], &query.levels[l])?;
            if q.c != support_fg.c {
                return Err(Error::shape("support/query channel mismatch"));
            }
            let corr_f = correlate(&q, &support_fg);
            let corr_b = correlate(&q, &support_bg);
            let shape = corr_shape(&q, &support_fg);
            Ok(DhcLevel { support_fg, support_bg, query: q, masked, corr_f, corr_b, shape })
        })
        .collect()
}

/// Foreground and background correlation pyramids for one support shot.
pub fn dhc_forward(
    support: &FeaturePyramid,
    support_mask: &Tensor,
    query: &FeaturePyramid,
    ws: &[Tensor],
    wq: &[Tensor],
) -> Result<DhcOutput> {
    let levels = dhc_forward_cached(support, support_mask, query, ws, wq)?;
    Ok(DhcOutput {
        corr_f: levels.iter().map(|l| Tensor::from_f64(l.shape.clone(), &l.corr_f)).collect(),
        corr_b: levels.iter().map(|l| Tensor::from_f64(l.shape.clone(), &l.corr_b)).collect(),
    })
}

/// `∂L/∂W_s` and `∂L/∂W_q` per level (row-major `C×C`), accumulated into
/// the given buffers.
pub(crate) fn dhc_backward(
    levels: &[DhcLevel],
    query: &FeaturePyramid,
    grad_corr_f: &[Vec<f64>],
    grad_corr_b: &[Vec<f64>],
    grad_ws: &mut [Vec<f64>],
    grad_wq: &mut [Vec<f64>],
) {
    for (l, lv) in levels.iter().enumerate() {
        let (gq_f, gs_f) = correlate_backward(&lv.query, &lv.support_fg, &lv.corr_f, &grad_corr_f[l]);
        let (gq_b, gs_b) = correlate_backward(&lv.query, &lv.support_bg, &lv.corr_b, &grad_corr_b[l]);
        let gq: Vec<f64> = gq_f.iter().zip(&gq_b).map(|(a, b)| a + b).collect();
        accumulate_weight_grad(&mut grad_wq[l], &gq, &query.levels[l]);
        accumulate_weight_grad(&mut grad_ws[l], &gs_f, &lv.masked.fg);
        accumulate_weight_grad(&mut grad_ws[l], &gs_b, &lv.masked.bg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_sim;

    fn pseudo(shape: &[usize], k: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f32 + 1.0) * k).sin()).collect()).unwrap()
    }

    #[test]
    fn mask_examples() {
        let f = pseudo(&[3, 2, 2], 0.9);
        let ones = mask_features(&f, &Tensor::full(vec![2, 2], 1.0)).unwrap();
        assert_eq!(ones.fg, f);
        assert!(ones.bg.data().iter().all(|&v| v == 0.0));
        let zeros = mask_features(&f, &Tensor::zeros(vec![2, 2])).unwrap();
        assert_eq!(zeros.bg, f);
        assert!(zeros.fg.data().iter().all(|&v| v == 0.0));
        let half = mask_features(&f, &Tensor::full(vec![2, 2], 0.5)).unwrap();
        assert_eq!(half.fg, f.scale(0.5));
        assert_eq!(half.bg, f.scale(0.5));
    }

    #[test]
    fn self_correlation_diagonal() {
        let f = pseudo(&[3, 3, 3], 1.7);
        let i = Tensor::eye(3);
        let corr = correlation4d(&f, &f, &i, &i).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert!((corr.get(&[y, x, y, x]) - 1.0).abs() < 1e-6);
            }
        }
        assert!(corr.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn anti_parallel_clipped() {
        let s = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
        let q = Tensor::new(vec![2, 1, 1], vec![-1.0, -2.0]).unwrap();
        let i = Tensor::eye(2);
        assert_eq!(correlation4d(&s, &q, &i, &i).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matches_quadruple_loop() {
        let fs = pseudo(&[2, 2, 2], 0.77);
        let fq = pseudo(&[2, 2, 2], 1.31);
        let ws = Tensor::new(vec![2, 2], vec![0.5, -0.3, 0.2, 1.1]).unwrap();
        let wq = Tensor::new(vec![2, 2], vec![1.0, 0.4, -0.6, 0.9]).unwrap();
        let corr = correlation4d(&fs, &fq, &ws, &wq).unwrap();
        let tv = |w: &Tensor, f: &Tensor, y: usize, x: usize| -> Vec<f32> {
            let v = f.pixel(y, x);
            (0..2).map(|i| (0..2).map(|k| w.get(&[i, k]) * v[k]).sum()).collect()
        };
        for qy in 0..2 {
            for qx in 0..2 {
                for sy in 0..2 {
                    for sx in 0..2 {
                        let c = cosine_sim(&tv(&ws, &fs, sy, sx), &tv(&wq, &fq, qy, qx)).max(0.0);
                        assert!((corr.get(&[qy, qx, sy, sx]) - c).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn correlate_backward_matches_fd() {
        let fs = pseudo(&[3, 2, 2], 0.61);
        let fq = pseudo(&[3, 2, 2], 1.43);
        let ws = pseudo(&[3, 3], 0.37);
        let wq = pseudo(&[3, 3], 0.83);
        let grad: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.7).cos()).collect();
        let loss = |ws: &Tensor, wq: &Tensor| -> f64 {
            let s = transform_pixels(ws, &fs).unwrap();
            let q = transform_pixels(wq, &fq).unwrap();
            correlate(&q, &s).iter().zip(&grad).map(|(a, b)| a * b).sum()
        };
        let s = transform_pixels(&ws, &fs).unwrap();
        let q = transform_pixels(&wq, &fq).unwrap();
        let corr = correlate(&q, &s);
        let (gq, gs) = correlate_backward(&q, &s, &corr, &grad);
        let mut dws = vec![0.0; 9];
        let mut dwq = vec![0.0; 9];
        accumulate_weight_grad(&mut dws, &gs, &fs);
        accumulate_weight_grad(&mut dwq, &gq, &fq);
        let h = 1e-3f32;
        for idx in 0..9 {
            for (which, analytic) in [(0, &dws), (1, &dwq)] {
                let bump = |d: f32| {
                    let (mut a, mut b) = (ws.clone(), wq.clone());
                    let t = if which == 0 { &mut a } else { &mut b };
                    t.data_mut()[idx] += d;
                    loss(&a, &b)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h as f64);
                assert!(
                    (fd - analytic[idx]).abs() < 2e-3 * analytic[idx].abs().max(1.0),
                    "{which}/{idx}: {fd} vs {}",
                    analytic[idx]
                );
            }
        }
    }

    #[test]
    fn mask_complement_swaps_heads() {
        let spec = crate::features::PyramidSpec { channels: vec![3, 3], strides: vec![2, 4] };
        let img = crate::features::Image::new(pseudo(&[3, 8, 8], 0.3).map(|v| v.abs())).unwrap();
        let img2 = crate::features::Image::new(pseudo(&[3, 8, 8], 0.5).map(|v| v.abs())).unwrap();
        let ex = crate::features::FeatureExtractor::new(spec, crate::features::ExtractorMode::Fixture, 1).unwrap();
        let (ps, pq) = (ex.extract(&img).unwrap(), ex.extract(&img2).unwrap());
        let m = Tensor::new(vec![8, 8], (0..64).map(|i| ((i % 7) as f32) / 6.0).collect()).unwrap();
        let w = vec![pseudo(&[3, 3], 0.4), pseudo(&[3, 3], 0.9)];
        let a = dhc_forward(&ps, &m, &pq, &w, &w).unwrap();
        let b = dhc_forward(&ps, &m.map(|v| 1.0 - v), &pq, &w, &w).unwrap();
        for l in 0..2 {
            assert!(a.corr_f[l].max_abs_diff(&b.corr_b[l]).unwrap() < 1e-6);
            assert!(a.corr_b[l].max_abs_diff(&b.corr_f[l]).unwrap() < 1e-6);
        }
        let all = dhc_forward(&ps, &Tensor::full(vec![8, 8], 1.0), &pq, &w, &w).unwrap();
        assert!(all.corr_b.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(all.corr_f[0].shape(), &[4, 4, 4, 4]);
        assert_eq!(all.corr_f[1].shape(), &[2, 2, 2, 2]);
    }
}
