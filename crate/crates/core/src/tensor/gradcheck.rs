use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// `f` records its computation on the given tape starting from the leaf for
/// `x` and returns the scalar output.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(&x.clone().with_requires_grad());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        let val = t.value(o);
        if val.len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(val[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
