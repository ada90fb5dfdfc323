//! Central-difference verification of reverse-mode gradients.

use super::{NumericError, Result, Scalar};

/// Compares an analytic gradient against central differences of `f` at
/// `theta`, returning the worst relative error over `coords`.
///
/// The error metric is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), so tiny
/// gradients are judged absolutely and large ones relatively.
///
/// `f` must be deterministic; it is evaluated twice at `theta` and any
/// difference between the two results is a contract error.
pub fn finite_diff_check<S, F>(
    f: F,
    theta: &[S],
    analytic: &[S],
    h: S,
    coords: &[usize],
) -> Result<S>
where
    S: Scalar,
    F: Fn(&[S]) -> Result<S>,
{
    if analytic.len() != theta.len() {
        return Err(NumericError::Dimension(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    if h <= S::zero() {
        return Err(NumericError::Contract("step size must be positive".into()));
    }
    let base = f(theta)?;
    let again = f(theta)?;
    if base != again {
        return Err(NumericError::Contract(
            "objective is not deterministic: two evaluations at the same point differ".into(),
        ));
    }
    let mut worst = S::zero();
    let mut point = theta.to_vec();
    for &i in coords {
        if i >= theta.len() {
            return Err(NumericError::Index(format!(
                "coordinate {i} outside {} parameters",
                theta.len()
            )));
        }
        let saved = point[i];
        point[i] = saved + h;
        let up = f(&point)?;
        point[i] = saved - h;
        let down = f(&point)?;
        point[i] = saved;
        let fd = (up - down) / (S::lit(2.0) * h);
        let ad = analytic[i];
        let denom = S::one().max(ad.abs()).max(fd.abs());
        let rel = (ad - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// Deterministically samples up to `max_count` distinct coordinates out of
/// `len`, spreading them evenly with a seeded offset. Used to keep gradient
/// checks over large parameter groups affordable.
pub fn sample_coords(len: usize, max_count: usize, seed: u64) -> Vec<usize> {
    if len == 0 || max_count == 0 {
        return Vec::new();
    }
    if len <= max_count {
        return (0..len).collect();
    }
    let stride = len / max_count;
    let offset = (seed as usize) % stride.max(1);
    (0..max_count).map(|i| (offset + i * stride) % len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Result;

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum(x^2), grad = 2x.
        let theta = vec![0.5, -1.5, 2.0];
        let grad: Vec<f64> = theta.iter().map(|&x| 2.0 * x).collect();
        let f = |x: &[f64]| -> Result<f64> { Ok(x.iter().map(|&v| v * v).sum()) };
        let err = finite_diff_check(f, &theta, &grad, 1e-5, &[0, 1, 2]).unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = vec![1.0, 2.0];
        let wrong = vec![2.0, 3.0]; // true grad of sum(x^2) at x=2 is 4
        let f = |x: &[f64]| -> Result<f64> { Ok(x.iter().map(|&v| v * v).sum()) };
        let err = finite_diff_check(f, &theta, &wrong, 1e-5, &[0, 1]).unwrap();
        assert!(err > 0.2, "error {err} should expose the bad coordinate");
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let f = |_: &[f64]| -> Result<f64> {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        let err = finite_diff_check(f, &[1.0], &[0.0], 1e-5, &[0]).unwrap_err();
        assert!(err.to_string().contains("deterministic"), "{err}");
    }

    #[test]
    fn relative_metric_handles_large_gradients() {
        // f(x) = c*x with huge c: absolute fd error grows, relative stays tiny.
        let c = 3.0e8;
        let theta = vec![0.1];
        let f = move |x: &[f64]| -> Result<f64> { Ok(c * x[0]) };
        let err = finite_diff_check(f, &theta, &[c], 1e-5, &[0]).unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn sample_coords_is_deterministic_and_bounded() {
        let a = sample_coords(1000, 8, 7);
        let b = sample_coords(1000, 8, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|&i| i < 1000));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8, "coordinates must be distinct");
    }

    #[test]
    fn sample_coords_small_group_returns_all() {
        assert_eq!(sample_coords(3, 8, 99), vec![0, 1, 2]);
    }

    #[test]
    fn out_of_range_coordinate_is_an_index_error() {
        let f = |x: &[f64]| -> Result<f64> { Ok(x[0]) };
        let err = finite_diff_check(f, &[1.0], &[1.0], 1e-5, &[5]).unwrap_err();
        assert!(matches!(err, crate::numeric::NumericError::Index(_)));
    }
}
