//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// One element whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub max_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            let worst = &self.mismatches[0];
            Err(Error::Gradcheck(format!(
                "{} of {} elements exceed {:e}; input {} element {}: analytic {:e}, numeric {:e}",
                self.mismatches.len(),
                self.checked,
                self.tolerance,
                worst.input,
                worst.index,
                worst.analytic,
                worst.numeric
            )))
        }
    }
}

/// Error measure between an analytic and a numeric derivative:
/// `|a - n| / max(1, |a|, |n|)`, relative for large gradients and absolute
/// below unit magnitude.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares backpropagated gradients of a scalar function against
/// `(f(x + h) - f(x - h)) / 2h` for every element of every input.
///
/// `f` receives a fresh graph and one trainable [`Var`] per input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let numeric = numeric_gradient(&f, inputs, step)?;
    let mut report = GradcheckReport {
        step,
        tolerance,
        checked: 0,
        max_error: 0.0,
        mismatches: Vec::new(),
    };
    for (input, (grad, num)) in analytic.iter().zip(&numeric).enumerate() {
        for (index, (&a, &numeric)) in grad.data().iter().zip(num.data()).enumerate() {
            let error = gradient_error(a, numeric);
            report.checked += 1;
            report.max_error = report.max_error.max(error);
            if !(error < tolerance) {
                report.mismatches.push(Mismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    error,
                });
            }
        }
    }
    report
        .mismatches
        .sort_by(|a, b| b.error.total_cmp(&a.error));
    Ok(report)
}

fn with_element(t: &Tensor<f64>, index: usize, value: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}


/// Central differences `(f(x + h) - f(x - h)) / 2h` for every element of every input.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (input, t) in inputs.iter().enumerate() {
        let mut grad = Vec::with_capacity(t.numel());
        for index in 0..t.numel() {
            let original = t.data()[index];
            work[input] = with_element(t, index, original + step);
            let plus = eval(&work)?;
            work[input] = with_element(t, index, original - step);
            let minus = eval(&work)?;
            grad.push((plus - minus) / (2.0 * step));
        }
        work[input] = t.clone();
        out.push(Tensor::new(t.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest [`gradient_error`] between central differences at `step` and at
/// `step / 10`. Truncation error shrinks a hundredfold between the two, so
/// this estimates how far the `step` differences are from the true
/// derivative. It is large near kinks and in regions of high curvature,
/// where a comparison against analytic gradients says nothing about them.
pub fn finite_difference_spread<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coarse = numeric_gradient(&f, inputs, step)?;
    let fine = numeric_gradient(&f, inputs, step / 10.0)?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .flat_map(|(c, f)| c.data().iter().zip(f.data()).map(|(&a, &b)| gradient_error(a, b)))
        .fold(0.0, f64::max))
}
