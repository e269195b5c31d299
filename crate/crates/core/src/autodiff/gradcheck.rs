use super::{AutodiffError, Graph, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of a scalar function at `point` with central
/// differences of half-width `step`.
///
/// `f` builds the function on a fresh graph from the input variable it is
/// handed; it is called once for the analytic pass and twice per coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidArgument { op: "grad_check", detail: format!("step must be positive, got {step}") });
    }
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let y = f(&mut g, x)?;
    let value = g.value(y).item();
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { coordinate: 0, value });
    }
    let analytic = g.backward(y)?.take(x).expect("input requires grad").into_data();

    let eval = |p: Tensor| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        if g.value(y).len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: g.value(y).shape().to_vec() });
        }
        Ok(g.value(y).item())
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        for v in [fp, fm] {
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite { coordinate: i, value: v });
            }
        }
        let d = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - d).abs() / analytic[i].abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(d);
    }
    Ok(GradCheckReport { max_relative_error: worst.0, worst_coordinate: worst.1, analytic, numeric })
}
