//! Central finite-difference gradient verification.
//!
//! Used by unit tests throughout the crate and by the gradient-integrity
//! check in the acceptance suite. Probing is by explicit `(tensor, element)`
//! pairs so callers can check every element of small tensors and a seeded
//! sample of large ones, keeping runtime bounded.

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest guarded relative error seen across all probes.
    pub max_rel: f64,
    /// `(tensor index, element index, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub probes: usize,
}

/// Guarded relative error: `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// near-zero gradients (where relative error is meaningless and finite
/// differences are all roundoff) from dominating the report.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients against central differences of `eval`.
///
/// `params` are the current parameter tensors (flattened); `eval` must
/// recompute the scalar loss from scratch for any perturbed copy of them;
/// `analytic[t][i]` is the gradient the implementation under test produced.
pub fn check_gradients(
    eval: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    probes: &[(usize, usize)],
    eps: f64,
    floor: f64,
) -> GradReport {
    assert_eq!(params.len(), analytic.len(), "tensor count mismatch");
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut report = GradReport {
        max_rel: 0.0,
        worst: None,
        probes: probes.len(),
    };
    for &(t, i) in probes {
        let orig = work[t][i];
        work[t][i] = orig + eps;
        let plus = eval(&work);
        work[t][i] = orig - eps;
        let minus = eval(&work);
        work[t][i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[t][i];
        let rel = rel_err(a, numeric, floor);
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = Some((t, i, a, numeric));
        }
    }
    report
}

/// Deterministic probe plan: every element of tensors at or below
/// `full_below`, and `sample_per_tensor` evenly spaced elements of larger
/// ones. Deterministic by construction (no RNG) so failures reproduce.
pub fn probe_plan(
    sizes: &[usize],
    full_below: usize,
    sample_per_tensor: usize,
) -> Vec<(usize, usize)> {
    let mut probes = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        if n == 0 {
            continue;
        }
        if n <= full_below {
            probes.extend((0..n).map(|i| (t, i)));
        } else {
            let step = n / sample_per_tensor;
            probes.extend((0..sample_per_tensor).map(|i| (t, (i * step + i % 7).min(n - 1))));
        }
    }
    probes
}
