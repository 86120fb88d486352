use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f32 = 1e-6;

/// Smallest admissible eigenvalue of the regularized 2×2 Gram matrix. With
/// ridge 0 this is `σ_min(C) < 1e-6`.
pub const SINGULAR_EIGENVALUE: f64 = 1e-12;

/// Matrix product with `f64` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul {m}×{k} by {k2}×{n}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += aip * bv as f64;
            }
        }
    }
    Ok(Tensor::from_f64(vec![m, n], &out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Smallest singular value of a `C×2` matrix.
pub fn sigma_min2(c: &Tensor) -> Result<f64> {
    let (rows, cols) = c.dims2()?;
    if cols != 2 {
        return Err(Error::shape(format!("sigma_min2 needs C_l×2, got {rows}×{cols}")));
    }
    let d = c.data();
    let (mut xx, mut yy, mut xy, mut det) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..rows {
        let (xi, yi) = (d[i * 2] as f64, d[i * 2 + 1] as f64);
        xx += xi * xi;
        yy += yi * yi;
        xy += xi * yi;
        for j in i + 1..rows {
            let m = xi * d[j * 2 + 1] as f64 - d[j * 2] as f64 * yi;
            det += m * m;
        }
    }
    let lambda_max = 0.5 * (xx + yy) + (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    Ok(if lambda_max > 0.0 { (det / lambda_max).sqrt() } else { 0.0 })
}

/// Regularized left pseudo-inverse of a `C×2` matrix: `(CᵀC + ridge·I)⁻¹Cᵀ`.
///
/// The Gram determinant is formed with the Lagrange identity
/// `|x|²|y|² − (x·y)² = Σ_{i<j} (x_i y_j − x_j y_i)²`, so nearly parallel
/// columns do not lose their smallest eigenvalue to cancellation.
pub fn pinv2(c: &Tensor, ridge: f32) -> Result<Tensor> {
    let (rows, cols) = c.dims2()?;
    if cols != 2 || rows < 2 {
        return Err(Error::shape(format!("pinv2 needs C_l×2 with C_l ≥ 2, got {rows}×{cols}")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::config(format!("ridge must be non-negative, got {ridge}")));
    }
    let d = c.data();
    let x: Vec<f64> = (0..rows).map(|i| d[i * 2] as f64).collect();
    let y: Vec<f64> = (0..rows).map(|i| d[i * 2 + 1] as f64).collect();
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let xy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();

    let mut det_gram = 0.0f64;
    for i in 0..rows {
        for j in i + 1..rows {
            let m = x[i] * y[j] - x[j] * y[i];
            det_gram += m * m;
        }
    }
    let r = ridge as f64;
    let (a, cc) = (xx + r, yy + r);
    let det = det_gram + r * (xx + yy) + r * r;
    let half_gap = (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    let lambda_max = 0.5 * (a + cc) + half_gap;
    let lambda_min = if lambda_max > 0.0 { det / lambda_max } else { 0.0 };
    if lambda_min < SINGULAR_EIGENVALUE {
        return Err(Error::SingularPrototypeMatrix { min_eigenvalue: lambda_min });
    }
    // (G + rI)^{-1} = [[cc, -xy], [-xy, a]] / det
    let mut out = vec![0.0f64; 2 * rows];
    for i in 0..rows {
        out[i] = (cc * x[i] - xy * y[i]) / det;
        out[rows + i] = (-xy * x[i] + a * y[i]) / det;
    }
    Ok(Tensor::from_f64(vec![2, rows], &out))
}
