//! 3×3 convolution, zero padding 1, stride 1, on flat `f64` buffers laid out
//! `[channel][row][col]`. Weights are `[out][in][3][3]`.

/// Valid output range for a kernel tap offset `k ∈ {0,1,2}` along an axis of
/// length `n`: output indices `o` with `0 <= o + k - 1 < n`.
#[inline]
pub(crate) fn tap_range(k: usize, n: usize) -> std::ops::Range<usize> {
    match k {
        0 => 1..n,
        1 => 0..n,
        _ => 0..n.saturating_sub(1),
    }
}

pub(crate) fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    debug_assert_eq!(input.len(), cin * h * w);
    debug_assert_eq!(weight.len(), cout * cin * 9);
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let dst = &mut out[o * hw..(o + 1) * hw];
        if !bias.is_empty() {
            dst.iter_mut().for_each(|v| *v = bias[o]);
        }
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = tap_range(kx, w);
                    for y in tap_range(ky, h) {
                        let sy = y + ky - 1;
                        let srow = &src[sy * w..(sy + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for x in cols.clone() {
                            drow[x] += wv * srow[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    grad_out: &[f64],
) -> ConvGrads {
    let hw = h * w;
    let mut gi = vec![0.0; cin * hw];
    let mut gw = vec![0.0; cout * cin * 9];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let g = &grad_out[o * hw..(o + 1) * hw];
        gb[o] = g.iter().sum();
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            let gsrc = &mut gi[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let cols = tap_range(kx, w);
                    let mut acc = 0.0;
                    for y in tap_range(ky, h) {
                        let sy = y + ky - 1;
                        for x in cols.clone() {
                            let gv = g[y * w + x];
                            acc += gv * src[sy * w + x + kx - 1];
                            gsrc[sy * w + x + kx - 1] += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    ConvGrads { input: gi, weight: gw, bias: gb }
}

/// Non-overlapping `k×k` average pooling; `h` and `w` must be multiples of `k`.
pub(crate) fn avg_pool(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * oh + y / k) * ow + x / k] += input[(ch * h + y) * w + x] * norm;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = b[o];
                    for i in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += wt[((o * cin + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y as usize) * w + x as usize] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    #[test]
    fn forward_matches_naive() {
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let x = pseudo(cin * h * w, 0.7);
        let wt = pseudo(cout * cin * 9, 1.3);
        let b = pseudo(cout, 2.1);
        let fast = conv3x3_forward(&x, cin, h, w, &wt, &b, cout);
        let slow = naive(&x, cin, h, w, &wt, &b, cout);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let (cin, cout, h, w) = (2, 2, 3, 4);
        let x = pseudo(cin * h * w, 0.3);
        let wt = pseudo(cout * cin * 9, 0.9);
        let g = pseudo(cout * h * w, 1.7);
        let grads = conv3x3_backward(&x, cin, h, w, &wt, cout, &g);
        // <conv(x), g> is bilinear in (x, w): check both partials by linearity.
        let y = conv3x3_forward(&x, cin, h, w, &wt, &[], cout);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&grads.input).map(|(a, b)| a * b).sum();
        let via_w: f64 = wt.iter().zip(&grads.weight).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let gsum: f64 = g[..h * w].iter().sum();
        assert!((grads.bias[0] - gsum).abs() < 1e-12);
    }

    #[test]
    fn pool_averages_blocks() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = avg_pool(&x, 1, 4, 4, 2);
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
