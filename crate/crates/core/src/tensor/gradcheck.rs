//! Central finite-difference check of [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs_floor: f64,
    /// Input values at which the function is not differentiable; probes within
    /// `step` of one are skipped.
    pub kinks: Vec<f64>,
    /// Probe at most this many elements per input (evenly spaced); `None`
    /// probes every element.
    pub max_probes_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            kinks: Vec::new(),
            max_probes_per_input: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst_rel_error = self.worst_rel_error.max(other.worst_rel_error);
        self.failures.extend(other.failures);
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(x+h) - f(x-h)) / 2h` for every probed input element.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = opts
            .max_probes_per_input
            .map_or(1, |cap| n.div_ceil(cap.max(1)).max(1));
        for e in (0..n).step_by(stride) {
            let x0 = input.data()[e];
            if opts.kinks.iter().any(|k| (x0 - k).abs() <= opts.step) {
                report.skipped += 1;
                continue;
            }
            probe[i].data_mut()[e] = x0 + opts.step;
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = x0 - opts.step;
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = x0;

            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i].data()[e];
            let diff = (a - numeric).abs();
            report.checked += 1;
            if diff <= opts.abs_floor {
                continue;
            }
            let rel = diff / a.abs().max(numeric.abs());
            report.worst_rel_error = report.worst_rel_error.max(rel);
            if rel > opts.rel_tol {
                report.failures.push(GradCheckFailure {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued output to a scalar by a fixed random weighting so
/// every output element contributes a distinct sensitivity.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}
