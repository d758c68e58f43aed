//! Central finite-difference check of tape gradients.

use crate::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` builds the function on a fresh `f64` tape from the input leaf and
/// returns the scalar output. The result is the largest relative error
/// `|analytic - numeric| / (|numeric| + 1e-8)` over all input elements.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(TensorError::InvalidArgument(format!(
            "step {h} outside [1e-5, 1e-3]"
        )));
    }
    let eval = |input: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(input.clone());
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        v.item().ok_or_else(|| TensorError::NotScalar(v.shape().to_vec()))
    };

    let base = eval(x)?;
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministicF);
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).expect("leaf requires grad").clone();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
