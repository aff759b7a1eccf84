//! Central finite-difference oracle for tape gradients.

use super::array::DiffArray;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Smaller steps retried for an element whose error exceeds
    /// `retry_above`; guards against a ReLU kink inside `[x-h, x+h]`.
    pub retry_steps: Vec<f64>,
    pub retry_above: f64,
    /// Check at most this many elements per input (evenly strided).
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-3,
            retry_steps: Vec::new(),
            retry_above: f64::INFINITY,
            max_elements: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    /// (input, element) of the worst element.
    pub worst_at: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients of `f` against central differences.
///
/// `f` builds a scalar on the given tape from one `Var` per input.
pub fn check_gradients<F>(inputs: &[DiffArray<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<DiffArray<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x.shape()))
        .collect();
    drop(tape);

    let eval = |xs: &[DiffArray<f64>]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&t, &vs)?;
        t.item(r)
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let n = x.len();
        let stride = opts.max_elements.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for e in (0..n).step_by(stride) {
            let a = analytic[which].data()[e];
            let mut best = f64::INFINITY;
            let mut best_num = 0.0;
            for &h in std::iter::once(&opts.h).chain(&opts.retry_steps) {
                let orig = x.data()[e];
                work[which].data_mut()[e] = orig + h;
                let fp = eval(&work)?;
                work[which].data_mut()[e] = orig - h;
                let fm = eval(&work)?;
                work[which].data_mut()[e] = orig;
                let num = (fp - fm) / (2.0 * h);
                let err = rel_error(a, num, opts.floor);
                if err < best {
                    best = err;
                    best_num = num;
                }
                if best <= opts.retry_above {
                    break;
                }
            }
            report.checked += 1;
            if best > report.worst_rel || report.checked == 1 {
                report.worst_rel = best;
                report.worst_at = (which, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = best_num;
            }
        }
    }
    Ok(report)
}
