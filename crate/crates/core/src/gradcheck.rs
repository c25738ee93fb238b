//! Central finite-difference verification of tape gradients.

use crate::autograd::{Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rtol: 1e-3,
            atol: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every coordinate of every input. All `inputs` are
/// registered as parameters, in order.
pub fn check_gradients<F>(inputs: &[Matrix], f: F, cfg: GradCheck) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |values: &[Matrix]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.param(m.clone())).collect();
        let loss = f(&mut g, &vars);
        g.scalar(loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let mut report = GradCheckReport::default();
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[input]);
        for index in 0..inputs[input].data().len() {
            let original = inputs[input].data()[index];
            work[input].data_mut()[index] = original + cfg.step;
            let plus = eval(&work);
            work[input].data_mut()[index] = original - cfg.step;
            let minus = eval(&work);
            work[input].data_mut()[index] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[index];
            let err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(err);
            if err > cfg.atol + cfg.rtol * numeric.abs() {
                report.mismatches.push(Mismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}
