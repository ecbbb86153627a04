//! Adam optimizer with per-tensor state.

use crate::real::Real;

/// First/second moment buffers plus the step counter for one parameter
/// tensor. State rows can be remapped when the parameter set changes size
/// (the density controller clones, splits, and prunes Gaussians).
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Rebuild the state for a resized parameter tensor: row `i` of the new
    /// state copies old row `keep[i]`, and `extra` fresh rows of zeros are
    /// appended. `stride` is the number of scalars per row (e.g. 3 for
    /// positions, 4 for rotations).
    pub fn remap_rows(&mut self, keep: &[usize], extra: usize, stride: usize) {
        let n = (keep.len() + extra) * stride;
        let mut m = vec![S::zero(); n];
        let mut v = vec![S::zero(); n];
        for (new_row, &old_row) in keep.iter().enumerate() {
            let (src, dst) = (old_row * stride, new_row * stride);
            m[dst..dst + stride].copy_from_slice(&self.m[src..src + stride]);
            v[dst..dst + stride].copy_from_slice(&self.v[src..src + stride]);
        }
        self.m = m;
        self.v = v;
    }

    pub(crate) fn raw(&self) -> (&[S], &[S], u64) {
        (&self.m, &self.v, self.t)
    }

    pub(crate) fn from_raw(m: Vec<S>, v: Vec<S>, t: u64) -> Self {
        assert_eq!(m.len(), v.len());
        AdamState { m, v, t }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<S: Real>(
    param: &mut [S],
    grad: &[S],
    state: &mut AdamState<S>,
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
) {
    assert_eq!(param.len(), grad.len(), "adam_step: param/grad length");
    assert_eq!(param.len(), state.m.len(), "adam_step: param/state length");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = S::one() - beta1.powi(t);
    let bc2 = S::one() - beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (S::one() - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (S::one() - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: the scalar Adam recurrence evaluated step by step with plain
    /// f64 arithmetic, written independently of the implementation above.
    fn scalar_adam_oracle(grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, p0: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn matches_scalar_recurrence_oracle() {
        let grads = [0.3, -0.1, 0.25, 0.05, -0.4];
        let want = scalar_adam_oracle(&grads, 0.01, 0.9, 0.999, 1e-8, 1.0);

        let mut p = [1.0f64];
        let mut st = AdamState::new(1);
        for &g in &grads {
            adam_step(&mut p, &[g], &mut st, 0.01, 0.9, 0.999, 1e-8);
        }
        assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);
    }

    /// With beta1 = beta2 = 0 the update degenerates to
    /// p -= lr * g / (|g| + eps): a signed step of magnitude ~lr.
    #[test]
    fn zero_betas_reduce_to_sign_steps() {
        let mut p = [0.0f64, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.5], &mut st, 0.1, 0.0, 0.0, 1e-8);
        assert!((p[0] - (-0.1)).abs() < 1e-8);
        assert!((p[1] - 0.1).abs() < 1e-8);
    }

    /// First step with defaults: bias correction makes the step magnitude
    /// lr regardless of gradient scale (m_hat = g, v_hat = g^2).
    #[test]
    fn first_step_magnitude_is_lr() {
        for &g in &[1e-6, 0.1, 50.0] {
            let mut p = [0.0f64];
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, 0.01, 0.9, 0.999, 0.0);
            assert!(
                (p[0] + 0.01).abs() < 1e-12,
                "gradient {g} gave step {}",
                p[0]
            );
        }
    }

    #[test]
    fn remap_rows_keeps_selected_moments_and_zeros_new() {
        let mut st = AdamState::new(6); // 3 rows, stride 2
        let mut p = vec![0.0f64; 6];
        adam_step(
            &mut p,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            &mut st,
            0.1,
            0.9,
            0.999,
            1e-8,
        );
        let row1_m = st.m[2..4].to_vec();
        st.remap_rows(&[1], 2, 2); // keep row 1, add 2 zero rows
        assert_eq!(st.len(), 6);
        assert_eq!(&st.m[..2], row1_m.as_slice());
        assert_eq!(&st.m[2..], &[0.0; 4]);
        assert_eq!(&st.v[2..], &[0.0; 4]);
    }
}
