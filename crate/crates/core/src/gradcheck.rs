//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor so coordinates with vanishing gradients compare on an
/// absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn central_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| numeric_partial(&f, &mut x, i, step))
        .collect()
}

fn numeric_partial<F: Fn(&[f64]) -> f64>(f: &F, x: &mut [f64], i: usize, step: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Compares `analytic` against central differences of `f` at `point` over
/// every coordinate.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, analytic, &coords, step)
}

/// Like [`grad_check`] but only over the listed coordinates.
pub fn grad_check_coords<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let numeric = numeric_partial(&f, &mut x, i, step);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.checked == 1 {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
