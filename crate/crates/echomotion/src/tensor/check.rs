//! Central finite-difference gradient checking.
//!
//! Used by unit tests and the acceptance suite to validate every analytic
//! backward pass against an independent numeric derivative.

use ndarray::ArrayD;

/// Outcome of a gradient check: worst relative error observed.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare an analytic gradient against central finite differences of `f`.
///
/// `f` maps the perturbed copies of `inputs` to a scalar. Relative error per
/// coordinate is `|a - n| / max(|n|, floor)`; coordinates where both sides are
/// below `abs_floor` are counted as exact.
pub fn finite_diff_check<F>(
    mut f: F,
    inputs: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    h: f64,
) -> GradCheck
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let abs_floor = 1e-8;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        assert_eq!(input.shape(), analytic[idx].shape(), "gradient shape mismatch");
        let len = input.len();
        for flat in 0..len {
            let orig = input.as_slice().unwrap()[flat];
            work[idx].as_slice_mut().unwrap()[flat] = orig + h;
            let fp = f(&work);
            work[idx].as_slice_mut().unwrap()[flat] = orig - h;
            let fm = f(&work);
            work[idx].as_slice_mut().unwrap()[flat] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[idx].as_slice().unwrap()[flat];
            checked += 1;
            if a.abs() < abs_floor && numeric.abs() < abs_floor {
                continue;
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        checked,
    }
}
