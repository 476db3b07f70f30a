//! Central finite-difference checking of tape gradients.

use crate::matrix::Matrix;
use crate::tape::{Precision, Result, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose `±step` probes cross a kink of a non-smooth op.
    pub excluded: usize,
    /// `(input, flat entry)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Compare the analytic gradient of `f` at `inputs` with central differences.
///
/// `f` receives a fresh 64-bit tape and one leaf per input and must return a
/// 1x1 loss. An entry is excluded (not counted in `max_rel_err`) when the
/// sign pattern of the inputs to `leaky_relu`/`prelu`/`elu` differs between
/// the base point and either probe, since the central difference then
/// straddles a non-differentiable point.
pub fn grad_check<F>(f: F, inputs: &[Matrix], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Matrix]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = xs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).get(0, 0), tape.kink_pattern()))
    };

    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_kinks = tape.kink_pattern();
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
    };
    let mut probe: Vec<Matrix> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + step;
            let (plus, kp) = eval(&probe)?;
            probe[i].data_mut()[k] = orig - step;
            let (minus, km) = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            if kp != base_kinks || km != base_kinks {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, k));
            }
        }
    }
    Ok(report)
}
