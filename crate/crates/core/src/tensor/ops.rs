use super::Tensor;
use crate::error::{Error, Result};

/// Norm below which a vector is treated as featureless.
pub const COSINE_EPS: f64 = 1e-8;

/// Interpolation taps along one axis: for each destination index the two
/// source indices and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan {
    pub src: usize,
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl AxisPlan {
    /// Half-pixel-center sampling without corner alignment:
    /// `s = (d + 0.5) * src/dst - 0.5`, clamped to `[0, src-1]`.
    pub fn new(src: usize, dst: usize) -> Self {
        assert!(src >= 1 && dst >= 1, "resize extents must be positive");
        let scale = src as f64 / dst as f64;
        let last = (src - 1) as f64;
        let taps = (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let frac = s - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            })
            .collect();
        Self { src, taps }
    }

    pub fn dst(&self) -> usize {
        self.taps.len()
    }
}

/// Separable bilinear resize of a stack of H×W maps. The same taps serve the
/// forward pass and its adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self { rows: AxisPlan::new(src.0, dst.0), cols: AxisPlan::new(src.1, dst.1) }
    }

    pub fn is_identity(&self) -> bool {
        self.rows.src == self.rows.dst() && self.cols.src == self.cols.dst()
    }

    pub fn src_len(&self) -> usize {
        self.rows.src * self.cols.src
    }

    pub fn dst_len(&self) -> usize {
        self.rows.dst() * self.cols.dst()
    }

    /// Resize `channels` stacked maps.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = (self.rows.src, self.cols.src);
        let (dh, dw) = (self.rows.dst(), self.cols.dst());
        assert_eq!(src.len(), channels * sh * sw);
        if self.is_identity() {
            return src.to_vec();
        }
        let mut out = vec![0.0; channels * dh * dw];
        for c in 0..channels {
            let s = &src[c * sh * sw..(c + 1) * sh * sw];
            let o = &mut out[c * dh * dw..(c + 1) * dh * dw];
            for (y, &(y0, y1, wy0, wy1)) in self.rows.taps.iter().enumerate() {
                for (x, &(x0, x1, wx0, wx1)) in self.cols.taps.iter().enumerate() {
                    o[y * dw + x] = wy0 * (wx0 * s[y0 * sw + x0] + wx1 * s[y0 * sw + x1])
                        + wy1 * (wx0 * s[y1 * sw + x0] + wx1 * s[y1 * sw + x1]);
                }
            }
        }
        out
    }

    /// Transpose of [`ResizePlan::apply`]: scatters destination gradients
    /// back onto the source grid.
    pub fn adjoint(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = (self.rows.src, self.cols.src);
        let (dh, dw) = (self.rows.dst(), self.cols.dst());
        assert_eq!(grad.len(), channels * dh * dw);
        if self.is_identity() {
            return grad.to_vec();
        }
        let mut out = vec![0.0; channels * sh * sw];
        for c in 0..channels {
            let g = &grad[c * dh * dw..(c + 1) * dh * dw];
            let o = &mut out[c * sh * sw..(c + 1) * sh * sw];
            for (y, &(y0, y1, wy0, wy1)) in self.rows.taps.iter().enumerate() {
                for (x, &(x0, x1, wx0, wx1)) in self.cols.taps.iter().enumerate() {
                    let v = g[y * dw + x];
                    o[y0 * sw + x0] += wy0 * wx0 * v;
                    o[y0 * sw + x1] += wy0 * wx1 * v;
                    o[y1 * sw + x0] += wy1 * wx0 * v;
                    o[y1 * sw + x1] += wy1 * wx1 * v;
                }
            }
        }
        out
    }
}

/// Bilinear resize of a C×H×W tensor.
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = src.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::DimensionMismatch(format!("resize target {out_h}×{out_w}")));
    }
    let plan = ResizePlan::new((h, w), (out_h, out_w));
    let out = plan.apply(&src.to_f64(), c);
    Ok(Tensor::from_f64(vec![c, out_h, out_w], &out))
}

/// Bilinear resize of a single H×W map.
pub fn resize_map(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let stacked = map.reshape(vec![1, h, w])?;
    bilinear_resize(&stacked, out_h, out_w)?.reshape(vec![out_h, out_w])
}

/// Cosine similarity; 0 when either vector is (near) zero.
pub fn cosine_sim(u: &[f32], v: &[f32]) -> f32 {
    assert_eq!(u.len(), v.len(), "cosine_sim length mismatch");
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0) as f32
}

/// Two-way softmax applied independently at every position.
pub fn softmax_pair(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(b)?;
    let n = a.len();
    let (mut pa, mut pb) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (p, q) = softmax2(x as f64, y as f64);
        pa.push(p as f32);
        pb.push(q as f32);
    }
    Ok((Tensor::from_parts(a.shape().to_vec(), pa), Tensor::from_parts(a.shape().to_vec(), pb)))
}

pub(crate) fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let z = ea + eb;
    (ea / z, eb / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Direct evaluation of the sampling formula, one output at a time.
    fn sample_oracle(src: &[f32], out_w: usize, x: usize) -> f32 {
        let w = src.len();
        let s = (x as f64 + 0.5) * (w as f64 / out_w as f64) - 0.5;
        let s = s.max(0.0).min((w - 1) as f64);
        let lo = s.floor();
        let hi = (lo + 1.0).min((w - 1) as f64);
        let t = s - lo;
        ((1.0 - t) * src[lo as usize] as f64 + t * src[hi as usize] as f64) as f32
    }

    #[test]
    fn resize_row_matches_formula() {
        let src = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_resize(&src, 1, 8).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for x in 0..8 {
            assert_abs_diff_eq!(out.data()[x], sample_oracle(src.data(), 8, x), epsilon = 1e-7);
            assert_abs_diff_eq!(out.data()[x], expect[x], epsilon = 1e-7);
        }
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor::full(vec![2, 3, 5], 3.0);
        let out = bilinear_resize(&c, 7, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));

        let t = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.5, 0.0, 9.0, 4.0]).unwrap();
        assert_eq!(bilinear_resize(&t, 2, 3).unwrap(), t);

        let one = Tensor::new(vec![1, 1, 1], vec![2.5]).unwrap();
        let b = bilinear_resize(&one, 4, 3).unwrap();
        assert!(b.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn adjoint_is_transpose() {
        let plan = ResizePlan::new((3, 5), (7, 4));
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..28).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = plan.apply(&x, 1);
        let aty = plan.adjoint(&y, 1);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]), 1.0, epsilon = 1e-7);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_abs_diff_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 1.0]), std::f32::consts::FRAC_1_SQRT_2, epsilon = 1e-7);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert_eq!(cosine_sim(&[1e-9, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let a = Tensor::full(vec![2, 2], 0.3);
        let (p, q) = softmax_pair(&a, &a).unwrap();
        assert!(p.data().iter().chain(q.data()).all(|&v| v == 0.5));

        let a = Tensor::new(vec![1, 1], vec![2.0f32.ln()]).unwrap();
        let b = Tensor::zeros(vec![1, 1]);
        let (p, q) = softmax_pair(&a, &b).unwrap();
        assert_abs_diff_eq!(p.data()[0], 2.0 / 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(q.data()[0], 1.0 / 3.0, epsilon = 1e-7);

        let a = Tensor::new(vec![1, 1], vec![50.0]).unwrap();
        let (p, q) = softmax_pair(&a, &b).unwrap();
        assert!((p.data()[0] as f64 - 1.0).abs() <= 1e-15);
        assert!((q.data()[0] as f64).abs() <= 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_bounded(u in prop::collection::vec(-10.0f32..10.0, 1..12), seed in 0u64..1000) {
            let v: Vec<f32> = u.iter().enumerate()
                .map(|(i, x)| x * ((i as u64 + seed) as f32).sin()).collect();
            let c = cosine_sim(&u, &v);
            prop_assert!((-1.0..=1.0).contains(&c));
            let norm: f32 = u.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm >= 1e-4 {
                prop_assert!((cosine_sim(&u, &u) - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn softmax_sums_to_one(a in prop::collection::vec(-60.0f32..60.0, 6),
                               b in prop::collection::vec(-60.0f32..60.0, 6)) {
            let a = Tensor::new(vec![2, 3], a).unwrap();
            let b = Tensor::new(vec![2, 3], b).unwrap();
            let (p, q) = softmax_pair(&a, &b).unwrap();
            for (x, y) in p.data().iter().zip(q.data()) {
                prop_assert!(*x >= 0.0 && *y >= 0.0);
                prop_assert!((x + y - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn resize_stays_within_bounds(
            data in prop::collection::vec(-5.0f32..5.0, 12),
            oh in 1usize..9, ow in 1usize..9,
        ) {
            let src = Tensor::new(vec![1, 3, 4], data).unwrap();
            let out = bilinear_resize(&src, oh, ow).unwrap();
            let (lo, hi) = (src.min(), src.max());
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }
}
