//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn record(&mut self, param: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((param, coord));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport, param_offset: usize) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.map(|(p, c)| (p + param_offset, c));
        }
        self.coordinates += other.coordinates;
    }
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)` for one coordinate of `values[param]`.
pub fn central_difference<F>(f: &mut F, values: &mut [Tensor], param: usize, coord: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let orig = values[param].data()[coord];
    values[param].data_mut()[coord] = orig + eps;
    let plus = f(values)?;
    values[param].data_mut()[coord] = orig - eps;
    let minus = f(values)?;
    values[param].data_mut()[coord] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

/// Checks the tape gradient of a scalar function against central differences
/// over every coordinate of every parameter.
///
/// `build` records the function on a fresh tape given one leaf per parameter
/// and returns the scalar output node.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check needs eps > 0");
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let analytic = tape.grad(out, &leaves)?;

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.leaf(p.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).item())
    };
    let mut values = params.to_vec();
    let mut report = GradCheckReport::default();
    for (p, grad) in analytic.iter().enumerate() {
        for c in 0..grad.len() {
            let numeric = central_difference(&mut eval, &mut values, p, c, eps)?;
            report.record(p, c, grad.data()[c], numeric);
        }
    }
    Ok(report)
}
