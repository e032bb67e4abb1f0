//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::gemm::Precision;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub step: f64,
    /// Floor applied to the denominator of the relative error so entries whose
    /// true gradient is ~0 are compared absolutely.
    pub denom_floor: f64,
    /// Upper bound on checked entries per input (`None` checks all).
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            denom_floor: 1e-6,
            max_entries_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat entry)` of the worst relative error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of a scalar-valued `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, always at 64-bit precision.
///
/// `f` receives a fresh graph whose first `inputs.len()` nodes are trainable
/// leaves holding the inputs, and must return a scalar node.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    f: F,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new(Precision::F64);
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return arg_err("finite_difference_check", "function must return a scalar");
        }
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match options.max_entries_per_input {
            Some(k) if k < input.len() => sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for e in entries {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + options.step;
            let (gp, _, op) = eval(&work)?;
            let fp = gp.value(op).item();
            work[i].data_mut()[e] = orig - options.step;
            let (gm, _, om) = eval(&work)?;
            let fm = gm.value(om).item();
            work[i].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * options.step);
            let a = analytic[i].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(options.denom_floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}
