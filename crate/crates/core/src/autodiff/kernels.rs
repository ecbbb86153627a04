//! Raw numeric kernels behind the tape ops.
//!
//! Everything here is a pure function over slices with explicit dimensions,
//! kept separate from the tape so the backward passes can be tested against
//! naive loop oracles in isolation. Loops run in a fixed order (or reduce to
//! a single GEMM call) so results are reproducible bit-for-bit across runs.

use crate::real::Real;

/// Lay out `same`-padded convolution patches as a `[H*W, C*k*k]` matrix.
/// Out-of-bounds taps are zero (zero padding).
pub fn im2col<S: Real>(x: &[S], c: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = k / 2;
    let ckk = c * k * k;
    let mut cols = vec![S::zero(); h * w * ckk];
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * ckk;
            for cc in 0..c {
                let plane = cc * h * w;
                for di in 0..k {
                    let si = i + di;
                    if si < pad || si >= h + pad {
                        continue;
                    }
                    let si = si - pad;
                    for dj in 0..k {
                        let sj = j + dj;
                        if sj < pad || sj >= w + pad {
                            continue;
                        }
                        cols[row + cc * k * k + di * k + dj] = x[plane + si * w + sj - pad];
                    }
                }
            }
        }
    }
    cols
}

/// `same`-padded stride-1 convolution: `x [C,H,W] * wgt [O, C*k*k] + bias [O]
/// -> [O,H,W]`. `k` must be odd.
pub fn conv2d_fwd<S: Real>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    wgt: &[S],
    bias: &[S],
    o: usize,
    k: usize,
) -> Vec<S> {
    let cols = im2col(x, c, h, w, k);
    let hw = h * w;
    let ckk = c * k * k;
    let mut y = vec![S::zero(); o * hw];
    // y [O, HW] = wgt [O, CKK] * cols^T [CKK, HW]
    S::gemm(false, true, o, ckk, hw, S::one(), wgt, &cols, S::zero(), &mut y);
    for oc in 0..o {
        let b = bias[oc];
        for v in &mut y[oc * hw..(oc + 1) * hw] {
            *v += b;
        }
    }
    y
}

/// Gradients of `conv2d_fwd` w.r.t. weights and bias.
/// Returns `(d_wgt [O, C*k*k], d_bias [O])`. Patches are recomputed rather
/// than cached: the GEMM dominates and this keeps tape nodes value-only.
pub fn conv2d_bwd_params<S: Real>(
    dy: &[S],
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
) -> (Vec<S>, Vec<S>) {
    let cols = im2col(x, c, h, w, k);
    let hw = h * w;
    let ckk = c * k * k;
    let mut dw = vec![S::zero(); o * ckk];
    // dW [O, CKK] = dY [O, HW] * cols [HW, CKK]
    S::gemm(false, false, o, hw, ckk, S::one(), dy, &cols, S::zero(), &mut dw);
    let mut db = vec![S::zero(); o];
    for oc in 0..o {
        let mut acc = S::zero();
        for &g in &dy[oc * hw..(oc + 1) * hw] {
            acc += g;
        }
        db[oc] = acc;
    }
    (dw, db)
}

/// Gradient of `conv2d_fwd` w.r.t. the input: a `same`-padded convolution of
/// `dy` with the spatially flipped, channel-swapped weights.
pub fn conv2d_bwd_input<S: Real>(
    dy: &[S],
    c: usize,
    h: usize,
    w: usize,
    wgt: &[S],
    o: usize,
    k: usize,
) -> Vec<S> {
    // flipped[cc, oc, di, dj] = wgt[oc, cc, k-1-di, k-1-dj]
    let mut flipped = vec![S::zero(); c * o * k * k];
    for oc in 0..o {
        for cc in 0..c {
            for di in 0..k {
                for dj in 0..k {
                    flipped[((cc * o + oc) * k + di) * k + dj] =
                        wgt[((oc * c + cc) * k + (k - 1 - di)) * k + (k - 1 - dj)];
                }
            }
        }
    }
    let zero_bias = vec![S::zero(); c];
    conv2d_fwd(dy, o, h, w, &flipped, &zero_bias, c, k)
}

/// Normalized 2-D Gaussian window of odd side `k` and standard deviation
/// `sigma`, sampled at integer offsets from the center. Sums to exactly 1
/// by construction (divided by its own sum).
pub fn gaussian_window<S: Real>(k: usize, sigma: f64) -> Vec<S> {
    assert!(k % 2 == 1, "gaussian window side must be odd, got {k}");
    let r = (k / 2) as f64;
    let mut win = vec![0.0f64; k * k];
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            win[i * k + j] = v;
            sum += v;
        }
    }
    win.iter().map(|&v| S::from_f64(v / sum)).collect()
}

/// Depthwise valid-region correlation with a fixed window: each channel of
/// `x [C,H,W]` is filtered independently, producing `[C, H-k+1, W-k+1]`.
pub fn window_valid_fwd<S: Real>(x: &[S], c: usize, h: usize, w: usize, win: &[S], k: usize) -> Vec<S> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut y = vec![S::zero(); c * oh * ow];
    for cc in 0..c {
        let plane = cc * h * w;
        let out_plane = cc * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = S::zero();
                for di in 0..k {
                    let row = plane + (i + di) * w + j;
                    let wrow = di * k;
                    for dj in 0..k {
                        acc += x[row + dj] * win[wrow + dj];
                    }
                }
                y[out_plane + i * ow + j] = acc;
            }
        }
    }
    y
}

/// Adjoint of [`window_valid_fwd`]: gathers, per input pixel, the output
/// positions whose window covers it.
pub fn window_valid_bwd<S: Real>(
    dy: &[S],
    c: usize,
    h: usize,
    w: usize,
    win: &[S],
    k: usize,
) -> Vec<S> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut dx = vec![S::zero(); c * h * w];
    for cc in 0..c {
        let out_plane = cc * oh * ow;
        let plane = cc * h * w;
        for y in 0..h {
            let i_lo = (y + 1).saturating_sub(k);
            let i_hi = y.min(oh - 1);
            for x in 0..w {
                let j_lo = (x + 1).saturating_sub(k);
                let j_hi = x.min(ow - 1);
                let mut acc = S::zero();
                for i in i_lo..=i_hi {
                    for j in j_lo..=j_hi {
                        acc += dy[out_plane + i * ow + j] * win[(y - i) * k + (x - j)];
                    }
                }
                dx[plane + y * w + x] = acc;
            }
        }
    }
    dx
}

#[inline(always)]
fn clamp_idx(v: isize, max: usize) -> usize {
    v.clamp(0, max as isize - 1) as usize
}

/// Per-pixel convolution with replicate padding: every output pixel has its
/// own `k x k` kernel. `img [C,H,W]`, `ker [H*W, k*k]` -> `[C,H,W]`:
/// `out(c, p) = sum_t img(c, clamp(p + t)) * ker(p, t)`.
pub fn apply_blur_fwd<S: Real>(img: &[S], c: usize, h: usize, w: usize, ker: &[S], k: usize) -> Vec<S> {
    let r = (k / 2) as isize;
    let kk = k * k;
    let mut out = vec![S::zero(); c * h * w];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let kr = &ker[p * kk..(p + 1) * kk];
            for cc in 0..c {
                let plane = cc * h * w;
                let mut acc = S::zero();
                for a in 0..k {
                    let si = clamp_idx(i as isize + a as isize - r, h);
                    for b in 0..k {
                        let sj = clamp_idx(j as isize + b as isize - r, w);
                        acc += img[plane + si * w + sj] * kr[a * k + b];
                    }
                }
                out[plane + p] = acc;
            }
        }
    }
    out
}

/// Gradients of [`apply_blur_fwd`] w.r.t. image and kernels.
/// The image adjoint is a scatter over clamped taps and runs in a fixed
/// sequential order; the kernel adjoint is an independent gather per pixel.
pub fn apply_blur_bwd<S: Real>(
    dout: &[S],
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    ker: &[S],
    k: usize,
) -> (Vec<S>, Vec<S>) {
    let r = (k / 2) as isize;
    let kk = k * k;
    let mut dimg = vec![S::zero(); c * h * w];
    let mut dker = vec![S::zero(); h * w * kk];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let kr = &ker[p * kk..(p + 1) * kk];
            let dk = &mut dker[p * kk..(p + 1) * kk];
            for a in 0..k {
                let si = clamp_idx(i as isize + a as isize - r, h);
                for b in 0..k {
                    let sj = clamp_idx(j as isize + b as isize - r, w);
                    let src = si * w + sj;
                    let mut dk_acc = S::zero();
                    for cc in 0..c {
                        let plane = cc * h * w;
                        let g = dout[plane + p];
                        dimg[plane + src] += g * kr[a * k + b];
                        dk_acc += g * img[plane + src];
                    }
                    dk[a * k + b] += dk_acc;
                }
            }
        }
    }
    (dimg, dker)
}

/// Softmax along a middle axis expressed as `[outer, axis, inner]`, with the
/// usual max subtraction for stability.
pub fn softmax_fwd<S: Real>(x: &[S], outer: usize, axis: usize, inner: usize) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * axis * inner + inn;
            let mut mx = S::neg_infinity();
            for a in 0..axis {
                mx = mx.max(x[base + a * inner]);
            }
            let mut sum = S::zero();
            for a in 0..axis {
                let e = (x[base + a * inner] - mx).exp();
                y[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis {
                y[base + a * inner] /= sum;
            }
        }
    }
    y
}

/// Backward of softmax: `dx = y * (dy - sum(dy * y))` per slice.
pub fn softmax_bwd<S: Real>(y: &[S], dy: &[S], outer: usize, axis: usize, inner: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * axis * inner + inn;
            let mut dot = S::zero();
            for a in 0..axis {
                let idx = base + a * inner;
                dot += dy[idx] * y[idx];
            }
            for a in 0..axis {
                let idx = base + a * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: six explicit loops over output channel, spatial
    /// position, input channel, and kernel taps, with zero padding.
    fn conv_oracle(
        x: &[f64],
        c: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        bias: &[f64],
        o: usize,
        k: usize,
    ) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut y = vec![0.0; o * h * w];
        for oc in 0..o {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = bias[oc];
                    for cc in 0..c {
                        for di in 0..k as isize {
                            for dj in 0..k as isize {
                                let si = i + di - pad;
                                let sj = j + dj - pad;
                                if si < 0 || si >= h as isize || sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                acc += x[cc * h * w + si as usize * w + sj as usize]
                                    * wgt[((oc * c + cc) * k + di as usize) * k + dj as usize];
                            }
                        }
                    }
                    y[oc * h * w + i as usize * w + j as usize] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, h, w, o, k) in &[(1, 5, 5, 1, 3), (3, 8, 6, 4, 5), (2, 7, 7, 3, 3)] {
            let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wgt: Vec<f64> = (0..o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d_fwd(&x, c, h, w, &wgt, &bias, o, k);
            let want = conv_oracle(&x, c, h, w, &wgt, &bias, o, k);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "conv2d deviates from oracle: {g} vs {e}");
            }
        }
    }

    /// Finite-difference check of both conv backward paths.
    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, h, w, o, k) = (2, 6, 5, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wgt: Vec<f64> = (0..o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Loss = weighted sum of outputs with fixed random weights.
        let lw: Vec<f64> = (0..o * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[f64], wgt: &[f64], bias: &[f64]| -> f64 {
            conv2d_fwd(x, c, h, w, wgt, bias, o, k)
                .iter()
                .zip(&lw)
                .map(|(a, b)| a * b)
                .sum()
        };

        let dx = conv2d_bwd_input(&lw, c, h, w, &wgt, o, k);
        let (dw, db) = conv2d_bwd_params(&lw, &x, c, h, w, o, k);

        let eps = 1e-6;
        let probe = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let num = (plus - minus) / (2.0 * eps);
            assert!(
                (analytic - num).abs() <= 1e-6 * analytic.abs().max(num.abs()).max(1.0),
                "{what}: analytic {analytic} vs numeric {num}"
            );
        };
        for idx in [0usize, 7, c * h * w - 1] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            probe(dx[idx], loss(&xp, &wgt, &bias), loss(&xm, &wgt, &bias), "d_input");
        }
        for idx in [0usize, 13, o * c * k * k - 1] {
            let mut wp = wgt.clone();
            wp[idx] += eps;
            let mut wm = wgt.clone();
            wm[idx] -= eps;
            probe(dw[idx], loss(&x, &wp, &bias), loss(&x, &wm, &bias), "d_weight");
        }
        for idx in 0..o {
            let mut bp = bias.clone();
            bp[idx] += eps;
            let mut bm = bias.clone();
            bm[idx] -= eps;
            probe(db[idx], loss(&x, &wgt, &bp), loss(&x, &wgt, &bm), "d_bias");
        }
    }

    #[test]
    fn gaussian_window_sums_to_one_and_is_symmetric() {
        let win: Vec<f64> = gaussian_window(11, 1.5);
        let sum: f64 = win.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..11 {
            for j in 0..11 {
                let a = win[i * 11 + j];
                let b = win[(10 - i) * 11 + (10 - j)];
                assert!((a - b).abs() < 1e-15);
            }
        }
        // Center is the max.
        let center = win[5 * 11 + 5];
        assert!(win.iter().all(|&v| v <= center));
    }

    #[test]
    fn window_valid_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, k) = (2, 9, 8, 5);
        let win: Vec<f64> = gaussian_window(k, 1.5);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oh = h - k + 1;
        let ow = w - k + 1;
        let lw: Vec<f64> = (0..c * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| -> f64 {
            window_valid_fwd(x, c, h, w, &win, k)
                .iter()
                .zip(&lw)
                .map(|(a, b)| a * b)
                .sum()
        };
        let dx = window_valid_bwd(&lw, c, h, w, &win, k);
        let eps = 1e-6;
        for idx in [0usize, 17, 40, c * h * w - 1] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(
                (dx[idx] - num).abs() < 1e-7,
                "window_valid d_input[{idx}]: {} vs {num}",
                dx[idx]
            );
        }
    }

    /// Independent oracle for the per-pixel convolution: six explicit loops
    /// (channel, output row/col, kernel row/col, plus the clamp), written
    /// directly from the definition with replicate padding.
    fn apply_blur_oracle(img: &[f64], c: usize, h: usize, w: usize, ker: &[f64], k: usize) -> Vec<f64> {
        let r = k as isize / 2;
        let mut out = vec![0.0; c * h * w];
        for cc in 0..c {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for a in 0..k as isize {
                        for b in 0..k as isize {
                            let si = (i + a - r).clamp(0, h as isize - 1) as usize;
                            let sj = (j + b - r).clamp(0, w as isize - 1) as usize;
                            acc += img[cc * h * w + si * w + sj]
                                * ker[(i as usize * w + j as usize) * k * k
                                    + (a * k as isize + b) as usize];
                        }
                    }
                    out[cc * h * w + i as usize * w + j as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn apply_blur_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, h, w, k) = (3, 7, 6, 5);
        let img: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ker: Vec<f64> = (0..h * w * k * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let got = apply_blur_fwd(&img, c, h, w, &ker, k);
        let want = apply_blur_oracle(&img, c, h, w, &ker, k);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-10, "apply_blur deviates from oracle: {g} vs {e}");
        }
    }

    #[test]
    fn apply_blur_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (c, h, w, k) = (2, 5, 6, 3);
        let img: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ker: Vec<f64> = (0..h * w * k * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let lw: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |img: &[f64], ker: &[f64]| -> f64 {
            apply_blur_fwd(img, c, h, w, ker, k)
                .iter()
                .zip(&lw)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dimg, dker) = apply_blur_bwd(&lw, &img, c, h, w, &ker, k);
        let eps = 1e-6;
        // Borders exercise the replicate-padding adjoint (corner pixel 0).
        for idx in [0usize, 4, 11, c * h * w - 1] {
            let mut p = img.clone();
            p[idx] += eps;
            let mut m = img.clone();
            m[idx] -= eps;
            let num = (loss(&p, &ker) - loss(&m, &ker)) / (2.0 * eps);
            assert!(
                (dimg[idx] - num).abs() < 1e-7,
                "apply_blur d_img[{idx}]: {} vs {num}",
                dimg[idx]
            );
        }
        for idx in [0usize, 9, 100, h * w * k * k - 1] {
            let mut p = ker.clone();
            p[idx] += eps;
            let mut m = ker.clone();
            m[idx] -= eps;
            let num = (loss(&img, &p) - loss(&img, &m)) / (2.0 * eps);
            assert!(
                (dker[idx] - num).abs() < 1e-7,
                "apply_blur d_ker[{idx}]: {} vs {num}",
                dker[idx]
            );
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_logits() {
        let x = vec![1000.0f64, 1001.0, 1002.0, -5.0, 0.0, 5.0];
        let y = softmax_fwd(&x, 2, 3, 1);
        for row in 0..2 {
            let s: f64 = y[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {row} sums to {s}");
        }
        assert!(y.iter().all(|v| v.is_finite()));
        // Frozen oracle for the second row: softmax(-5, 0, 5).
        let e: Vec<f64> = [-5.0f64, 0.0, 5.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((y[3 + i] - e[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (outer, axis, inner) = (3, 4, 2);
        let n = outer * axis * inner;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| -> f64 {
            softmax_fwd(x, outer, axis, inner)
                .iter()
                .zip(&lw)
                .map(|(a, b)| a * b)
                .sum()
        };
        let y = softmax_fwd(&x, outer, axis, inner);
        let dx = softmax_bwd(&y, &lw, outer, axis, inner);
        let eps = 1e-6;
        for idx in 0..n {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let num = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!(
                (dx[idx] - num).abs() < 1e-8,
                "softmax d_x[{idx}]: {} vs {num}",
                dx[idx]
            );
        }
    }
}
