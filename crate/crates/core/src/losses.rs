//! Training loss (photometric + structural + mask sparsity) and evaluation
//! metrics (PSNR, SSIM).
//!
//! The structural term uses the standard Gaussian-windowed SSIM (11x11
//! window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on a [0,1] value range),
//! restricted to windows that fit entirely inside the image so no padding
//! convention leaks into the statistics. The training objective is
//! `photo * L1 + dssim * (1 - SSIM)/2 + mask * mean(m)`, with weights
//! configurable and nonnegative.

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::real::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weights must be nonnegative, got photo={photo} dssim={dssim} mask={mask}")]
    NegativeWeight { photo: f64, dssim: f64, mask: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub photo: f64,
    pub dssim: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photo: 0.8,
            dssim: 0.2,
            mask: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.photo < 0.0 || self.dssim < 0.0 || self.mask < 0.0 {
            return Err(LossError::NegativeWeight {
                photo: self.photo,
                dssim: self.dssim,
                mask: self.mask,
            });
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1<S: Real>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `(1 - SSIM(a, b)) / 2` over valid (fully interior) windows, averaged
/// across channels. Inputs are `[C, H, W]` with H, W >= the window size.
pub fn d_ssim<S: Real>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var, TensorError> {
    let (sa, sb) = (
        tape.value(a).shape().to_vec(),
        tape.value(b).shape().to_vec(),
    );
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op: "d_ssim",
            lhs: sa,
            rhs: sb,
        });
    }
    let c1 = S::from_f64(SSIM_C1);
    let c2 = S::from_f64(SSIM_C2);
    let two = S::from_f64(2.0);

    let mu_a = tape.gaussian_window_valid(a, SSIM_WINDOW, SSIM_SIGMA)?;
    let mu_b = tape.gaussian_window_valid(b, SSIM_WINDOW, SSIM_SIGMA)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let m_aa = tape.gaussian_window_valid(aa, SSIM_WINDOW, SSIM_SIGMA)?;
    let m_bb = tape.gaussian_window_valid(bb, SSIM_WINDOW, SSIM_SIGMA)?;
    let m_ab = tape.gaussian_window_valid(ab, SSIM_WINDOW, SSIM_SIGMA)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(m_aa, mu_a2)?;
    let var_b = tape.sub(m_bb, mu_b2)?;
    let cov = tape.sub(m_ab, mu_ab)?;

    // ((2 mu_a mu_b + C1)(2 cov + C2)) / ((mu_a^2 + mu_b^2 + C1)(var_a + var_b + C2))
    let n1 = tape.mul_scalar(mu_ab, two)?;
    let n1 = tape.add_scalar(n1, c1)?;
    let n2 = tape.mul_scalar(cov, two)?;
    let n2 = tape.add_scalar(n2, c2)?;
    let num = tape.mul(n1, n2)?;
    let d1 = tape.add(mu_a2, mu_b2)?;
    let d1 = tape.add_scalar(d1, c1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, c2)?;
    let den = tape.mul(d1, d2)?;
    let ssim_map = tape.div(num, den)?;
    let mean_ssim = tape.mean(ssim_map)?;

    // (1 - ssim) / 2
    let neg = tape.neg(mean_ssim)?;
    let one_minus = tape.add_scalar(neg, S::one())?;
    tape.mul_scalar(one_minus, S::from_f64(0.5))
}

/// Mean of the mask (L1 on nonnegative entries).
pub fn mask_sparsity<S: Real>(tape: &mut Tape<S>, m: Var) -> Result<Var, TensorError> {
    tape.mean(m)
}

/// Individual terms of the training objective plus their weighted total,
/// kept separate so the trainer can log each component.
pub struct LossTerms {
    pub l1: Var,
    pub dssim: Var,
    pub mask: Var,
    pub total: Var,
}

pub fn total_loss<S: Real>(
    tape: &mut Tape<S>,
    c_out: Var,
    c_obs: Var,
    mask: Var,
    weights: &LossWeights,
) -> Result<LossTerms, LossError> {
    weights.validate()?;
    let l1_term = l1(tape, c_out, c_obs)?;
    let dssim_term = d_ssim(tape, c_out, c_obs)?;
    let mask_term = mask_sparsity(tape, mask)?;
    let a = tape.mul_scalar(l1_term, S::from_f64(weights.photo))?;
    let b = tape.mul_scalar(dssim_term, S::from_f64(weights.dssim))?;
    let c = tape.mul_scalar(mask_term, S::from_f64(weights.mask))?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms {
        l1: l1_term,
        dssim: dssim_term,
        mask: mask_term,
        total,
    })
}

/// Peak signal-to-noise ratio in dB for [0,1]-range images; infinite for
/// identical inputs. Accumulates in f64 regardless of the image scalar.
pub fn psnr<S: Real>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr inputs must have equal length");
    assert!(!a.is_empty(), "psnr of empty images");
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = Real::to_f64(*x) - Real::to_f64(*y);
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Plain SSIM metric for evaluation (same windowing as [`d_ssim`]).
pub fn ssim_metric<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    let mut tape = Tape::<S>::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let d = d_ssim(&mut tape, av, bv).expect("ssim metric inputs");
    1.0 - 2.0 * Real::to_f64(tape.scalar_value(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn as_var(tape: &mut Tape<f64>, data: Vec<f64>, h: usize, w: usize) -> Var {
        tape.constant(Tensor::new(vec![3, h, w], data))
    }

    #[test]
    fn l1_of_identical_images_is_zero_and_of_complements_is_one() {
        let mut tape = Tape::<f64>::new();
        let a = as_var(&mut tape, vec![0.3; 3 * 64], 8, 8);
        let z = as_var(&mut tape, vec![0.0; 3 * 64], 8, 8);
        let o = as_var(&mut tape, vec![1.0; 3 * 64], 8, 8);
        let same = l1(&mut tape, a, a).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);
        let full = l1(&mut tape, z, o).unwrap();
        assert_eq!(tape.scalar_value(full), 1.0);
    }

    #[test]
    fn l1_gradient_matches_finite_differences_away_from_ties() {
        let (h, w) = (6, 6);
        let a0 = image(h, w, 1);
        let b0 = image(h, w, 2);
        let loss_of = |av: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::new(vec![3, h, w], av.to_vec()), true);
            let b = tape.constant(Tensor::new(vec![3, h, w], b0.clone()));
            let loss = l1(&mut tape, a, b).unwrap();
            let v = tape.scalar_value(loss);
            if !want_grad {
                return (v, Vec::new());
            }
            tape.backward(loss).unwrap();
            (v, tape.grad(a).unwrap().to_vec())
        };
        let (_, analytic) = loss_of(&a0, true);
        let probes: Vec<_> = (0..3 * h * w).step_by(7).map(|i| (0, i)).collect();
        let mut eval = |p: &[Vec<f64>]| loss_of(&p[0], false).0;
        let report = check_gradients(
            &mut eval,
            &[a0.clone()],
            &[analytic],
            &probes,
            1e-6,
            1e-8,
        );
        assert!(report.max_rel < 1e-6, "worst {:?}", report.worst);
    }

    #[test]
    fn dssim_is_zero_for_identical_and_symmetric() {
        let (h, w) = (16, 16);
        let mut tape = Tape::<f64>::new();
        let a = as_var(&mut tape, image(h, w, 3), h, w);
        let b = as_var(&mut tape, image(h, w, 4), h, w);
        let same = d_ssim(&mut tape, a, a).unwrap();
        assert!(tape.scalar_value(same).abs() < 1e-12);
        let ab = d_ssim(&mut tape, a, b).unwrap();
        let ba = d_ssim(&mut tape, b, a).unwrap();
        assert!((tape.scalar_value(ab) - tape.scalar_value(ba)).abs() < 1e-12);
        // Nondegenerate distinct images score strictly above zero and the
        // whole range stays within [0, 1].
        let v = tape.scalar_value(ab);
        assert!(v > 0.0 && v <= 1.0, "d_ssim out of range: {v}");
    }

    /// Constant 0 vs constant 1: means 0 and 1, variances 0, covariance 0,
    /// so SSIM = C1 / (1 + C1) from the closed form.
    #[test]
    fn dssim_of_black_vs_white_matches_closed_form() {
        let (h, w) = (16, 16);
        let mut tape = Tape::<f64>::new();
        let black = as_var(&mut tape, vec![0.0; 3 * h * w], h, w);
        let white = as_var(&mut tape, vec![1.0; 3 * h * w], h, w);
        let d = d_ssim(&mut tape, black, white).unwrap();
        let want = (1.0 - SSIM_C1 / (1.0 + SSIM_C1)) / 2.0;
        assert!(
            (tape.scalar_value(d) - want).abs() < 1e-12,
            "{} vs {want}",
            tape.scalar_value(d)
        );
    }

    #[test]
    fn dssim_rejects_undersized_images() {
        let mut tape = Tape::<f64>::new();
        let a = as_var(&mut tape, vec![0.5; 3 * 100], 10, 10);
        assert!(d_ssim(&mut tape, a, a).is_err());
    }

    #[test]
    fn mask_sparsity_means() {
        let mut tape = Tape::<f64>::new();
        for (fill, want) in [(0.0, 0.0), (1.0, 1.0)] {
            let m = tape.constant(Tensor::new(vec![4, 4], vec![fill; 16]));
            let s = mask_sparsity(&mut tape, m).unwrap();
            assert_eq!(tape.scalar_value(s), want);
        }
        let mut half = vec![0.0; 16];
        half[..8].fill(1.0);
        let m = tape.constant(Tensor::new(vec![4, 4], half));
        let s = mask_sparsity(&mut tape, m).unwrap();
        assert_eq!(tape.scalar_value(s), 0.5);
    }

    #[test]
    fn total_loss_composes_terms() {
        let (h, w) = (16, 16);
        let img = image(h, w, 5);
        let mut tape = Tape::<f64>::new();
        let a = as_var(&mut tape, img.clone(), h, w);
        let m0 = tape.constant(Tensor::new(vec![h, w], vec![0.0; h * w]));
        let zero = total_loss(&mut tape, a, a, m0, &LossWeights::default()).unwrap();
        assert_eq!(tape.scalar_value(zero.total), 0.0);

        // (1, 0, 0) reduces to plain L1.
        let b = as_var(&mut tape, image(h, w, 6), h, w);
        let m = tape.constant(Tensor::new(vec![h, w], vec![0.3; h * w]));
        let w100 = LossWeights {
            photo: 1.0,
            dssim: 0.0,
            mask: 0.0,
        };
        let t = total_loss(&mut tape, a, b, m, &w100).unwrap();
        let plain = l1(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar_value(t.total), tape.scalar_value(plain));

        // Affine in the mask weight: slope is exactly mean(m).
        let w_lo = LossWeights {
            mask: 0.0,
            ..Default::default()
        };
        let w_hi = LossWeights {
            mask: 2.0,
            ..Default::default()
        };
        let lo = total_loss(&mut tape, a, b, m, &w_lo).unwrap();
        let hi = total_loss(&mut tape, a, b, m, &w_hi).unwrap();
        let slope = (tape.scalar_value(hi.total) - tape.scalar_value(lo.total)) / 2.0;
        assert!((slope - 0.3).abs() < 1e-12);

        let bad = LossWeights {
            photo: -0.1,
            ..Default::default()
        };
        assert!(matches!(
            total_loss(&mut tape, a, b, m, &bad),
            Err(LossError::NegativeWeight { .. })
        ));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let (h, w) = (16, 16);
        let a0 = image(h, w, 7);
        let b0 = image(h, w, 8);
        let weights = LossWeights::default();
        let loss_of = |av: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::new(vec![3, h, w], av.to_vec()), true);
            let b = tape.constant(Tensor::new(vec![3, h, w], b0.clone()));
            let m = tape.constant(Tensor::new(vec![h, w], vec![0.4; h * w]));
            let t = total_loss(&mut tape, a, b, m, &weights).unwrap();
            let v = tape.scalar_value(t.total);
            if !want_grad {
                return (v, Vec::new());
            }
            tape.backward(t.total).unwrap();
            (v, tape.grad(a).unwrap().to_vec())
        };
        let (_, analytic) = loss_of(&a0, true);
        let probes: Vec<_> = (0..3 * h * w).step_by(29).map(|i| (0, i)).collect();
        let mut eval = |p: &[Vec<f64>]| loss_of(&p[0], false).0;
        let report = check_gradients(&mut eval, &[a0.clone()], &[analytic], &probes, 1e-6, 1e-8);
        assert!(report.max_rel < 1e-5, "worst {:?}", report.worst);
    }

    #[test]
    fn psnr_closed_forms_and_oracle() {
        // MSE of 0.01 is exactly 20 dB.
        let a = vec![0.0f64; 100];
        let b = vec![0.1f64; 100];
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a), f64::INFINITY);

        let x = image(8, 8, 9);
        let y = image(8, 8, 10);
        let mse: f64 =
            x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&x, &y) - want).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let (h, w) = (12, 12);
        let base = image(h, w, 11);
        let mean_at = |amp: f64| -> f64 {
            let mut acc = 0.0;
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let noisy: Vec<f64> = base
                    .iter()
                    .map(|v| (v + rng.gen_range(-amp..amp)).clamp(0.0, 1.0))
                    .collect();
                acc += psnr(&base, &noisy);
            }
            acc / 10.0
        };
        let (p1, p2, p3) = (mean_at(0.05), mean_at(0.1), mean_at(0.2));
        assert!(p1 > p2 && p2 > p3, "psnr not monotone: {p1} {p2} {p3}");
    }

    #[test]
    fn ssim_metric_agrees_with_dssim() {
        let (h, w) = (16, 16);
        let a = Tensor::new(vec![3, h, w], image(h, w, 12));
        let b = Tensor::new(vec![3, h, w], image(h, w, 13));
        let m = ssim_metric(&a, &b);
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let d = d_ssim(&mut tape, av, bv).unwrap();
        assert!((m - (1.0 - 2.0 * tape.scalar_value(d))).abs() < 1e-12);
        assert!(m < 1.0 && m > -1.0);
    }
}
