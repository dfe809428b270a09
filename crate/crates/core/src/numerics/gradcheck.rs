//! Central-difference gradient checking, always in 64-bit.

use super::{backward, NumericsError, Result, Tensor};

/// One named parameter block handed to [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GradCheckParam {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols);
        GradCheckParam { name: name.into(), rows, cols, values }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all parameter entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_err: f64,
    pub worst_param: String,
    pub evaluations: usize,
}

fn leaves(params: &[GradCheckParam], grad: bool) -> Vec<Tensor<f64>> {
    params
        .iter()
        .map(|p| Tensor::leaf(p.rows, p.cols, p.values.clone(), grad))
        .collect()
}

/// Compare analytic gradients of a scalar-valued `f` against central finite
/// differences with step `h`. `f` must be deterministic; two baseline
/// evaluations that differ bitwise abort with a contract error.
pub fn grad_check<F>(f: F, params: &[GradCheckParam], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let base1 = f(&leaves(params, false))?.value();
    let base2 = f(&leaves(params, false))?.value();
    if base1.to_bits() != base2.to_bits() {
        return Err(NumericsError::NonDeterministic);
    }

    let grad_leaves = leaves(params, true);
    let loss = f(&grad_leaves)?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = grad_leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    let mut evaluations = 2;
    let mut work: Vec<GradCheckParam> = params.to_vec();
    for pi in 0..params.len() {
        for vi in 0..params[pi].values.len() {
            let orig = work[pi].values[vi];
            work[pi].values[vi] = orig + h;
            let plus = f(&leaves(&work, false))?.value();
            work[pi].values[vi] = orig - h;
            let minus = f(&leaves(&work, false))?.value();
            work[pi].values[vi] = orig;
            evaluations += 2;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][vi];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{}[{}]", params[pi].name, vi);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_param, evaluations })
}
