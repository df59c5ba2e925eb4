//! Central finite-difference checking of tape gradients, in `f64`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Summary of one gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared against finite differences.
    pub checked: usize,
    /// Coordinates skipped because the ±ε probe crossed a ReLU or max kink.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &Self) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Central-difference formula used by [`check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+ε) - f(x-ε)) / 2ε`, truncation error O(ε²).
    ThreePoint,
    /// `(f(x-2ε) - 8f(x-ε) + 8f(x+ε) - f(x+2ε)) / 12ε`, truncation error O(ε⁴).
    FivePoint,
}

/// Options for [`check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub stencil: Stencil,
    /// Magnitude under which both gradients are treated as zero when forming
    /// the relative error denominator.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords_per_input: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            stencil: Stencil::FivePoint,
            abs_floor: 1e-6,
            max_coords_per_input: usize::MAX,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences for every input tensor.
///
/// `f` receives a fresh tape and one leaf per input (all requiring grad) and
/// must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item()?, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(&inputs[i]));
        let stride = n.div_ceil(opts.max_coords_per_input.min(n).max(1));
        for j in (0..n).step_by(stride.max(1)) {
            let orig = inputs[i].data()[j];
            let offsets: &[f64] = match opts.stencil {
                Stencil::ThreePoint => &[1.0, -1.0],
                Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
            };
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (slot, &o) in f.iter_mut().zip(offsets) {
                probe[i].data_mut()[j] = orig + o * opts.eps;
                let (val, sig) = eval(&probe)?;
                *slot = val;
                crossed |= sig != base_sig;
            }
            probe[i].data_mut()[j] = orig;
            if crossed {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = match opts.stencil {
                Stencil::ThreePoint => (f[0] - f[1]) / (2.0 * opts.eps),
                Stencil::FivePoint => (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * opts.eps),
            };
            let err = relative_error(analytic.data()[j], numeric, opts.abs_floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
