//! Central finite-difference oracle for analytic gradients. Always runs in
//! double precision.

use super::graph::{Graph, Var};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − central| / (|analytic| + |central| + 1e-12)
    pub max_rel_error: f64,
    /// max |analytic − central|
    pub max_abs_error: f64,
    pub coords: Vec<CoordError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub central: f64,
}

impl CoordError {
    pub fn rel(&self) -> f64 {
        (self.analytic - self.central).abs() / (self.analytic.abs() + self.central.abs() + 1e-12)
    }

    pub fn abs(&self) -> f64 {
        (self.analytic - self.central).abs()
    }
}

impl GradCheckReport {
    /// Every coordinate is within `rel_tol` relative error, or its absolute
    /// discrepancy is below `abs_floor` (the round-off level of the central
    /// difference, for gradients that are analytically zero).
    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.coords.iter().all(|c| c.rel() < rel_tol || c.abs() < abs_floor)
    }

    pub fn worst(&self, abs_floor: f64) -> Option<&CoordError> {
        self.coords
            .iter()
            .filter(|c| c.abs() >= abs_floor)
            .max_by(|a, b| a.rel().total_cmp(&b.rel()))
    }
}

/// Max relative error between the analytic gradient of scalar `f` at `x` and
/// its central difference with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_error)
}

/// Gradient check over several inputs at once. `coords_per_input` limits how
/// many (evenly spaced) coordinates of each input are perturbed; `None` checks
/// all of them.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    coords_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::Double);
        let vars = values
            .iter()
            .map(|t| g.param(t))
            .collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(g.value(root).item())
    };

    let mut g = Graph::new(Precision::Double);
    let vars = inputs
        .iter()
        .map(|t| g.param(t))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut coords = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, t) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = match coords_per_input {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for index in (0..n).step_by(stride) {
            let orig = t.data()[index];
            work[input].data_mut()[index] = orig + h;
            let plus = eval(&work)?;
            work[input].data_mut()[index] = orig - h;
            let minus = eval(&work)?;
            work[input].data_mut()[index] = orig;
            coords.push(CoordError {
                input,
                index,
                analytic: analytic[input].data()[index],
                central: (plus - minus) / (2.0 * h),
            });
        }
    }
    let max_rel_error = coords.iter().map(CoordError::rel).fold(0.0, f64::max);
    let max_abs_error = coords.iter().map(CoordError::abs).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        coords,
    })
}
