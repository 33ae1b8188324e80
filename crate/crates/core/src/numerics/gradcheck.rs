use super::{DiffTensor, Real, Tape, Var};
use crate::error::{Error, Result};

fn default_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 + 0.5 * (i as f64 * 1.7 + 0.3).sin()).collect()
}

/// Compares the tape's analytic gradient of `op` against central finite
/// differences, returning `max |analytic − numeric| / max(1, |analytic|)`
/// over every entry of every input.
///
/// Non-scalar outputs are contracted with fixed, non-uniform weights so ops
/// whose plain sum is constant (softmax) still get a meaningful check.
pub fn grad_check<T, F>(op: F, inputs: &[DiffTensor<T>], epsilon: f64) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    grad_check_with_weights(op, inputs, epsilon, None)
}

pub fn grad_check_with_weights<T, F>(
    op: F,
    inputs: &[DiffTensor<T>],
    epsilon: f64,
    weights: Option<&[f64]>,
) -> Result<f64>
where
    T: Real,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-6, 1e-2]")));
    }
    // Forward + weighted reduction evaluated in f64 outside the tape.
    let evaluate = |tensors: &[DiffTensor<T>]| -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let vars = tensors
            .iter()
            .map(|t| tape.input(t.shape().to_vec(), t.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let out = op(&mut tape, &vars)?;
        let vals = tape.value(out);
        let w = weights.map(<[f64]>::to_vec).unwrap_or_else(|| default_weights(vals.len()));
        if w.len() != vals.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} outputs",
                w.len(),
                vals.len()
            )));
        }
        let s: f64 = vals.iter().zip(&w).map(|(v, w)| v.as_f64() * w).sum();
        if !s.is_finite() {
            return Err(Error::Numeric {
                op: "grad_check",
                detail: "non-finite objective".into(),
            });
        }
        Ok((s, vals.len()))
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.shape().to_vec(), t.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let out = op(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let w = weights.map(<[f64]>::to_vec).unwrap_or_else(|| default_weights(n_out));
    let wv = tape.constant(tape.shape(out).to_vec(), w.iter().map(|&x| T::from_f64(x)).collect())?;
    let prod = tape.mul(out, wv)?;
    let objective = tape.sum(prod)?;
    let grads = tape.backward(objective)?;

    let mut worst = 0f64;
    let mut perturbed: Vec<DiffTensor<T>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; inputs[which].len()],
        };
        for (e, &a) in analytic.iter().enumerate() {
            let orig = inputs[which].values()[e];
            let plus = orig + T::from_f64(epsilon);
            let minus = orig - T::from_f64(epsilon);
            perturbed[which].values_mut()[e] = plus;
            let (fp, _) = evaluate(&perturbed)?;
            perturbed[which].values_mut()[e] = minus;
            let (fm, _) = evaluate(&perturbed)?;
            perturbed[which].values_mut()[e] = orig;
            // Use the step actually representable in T.
            let h = (plus.as_f64() - minus.as_f64()).max(f64::MIN_POSITIVE);
            let numeric = (fp - fm) / h;
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::Numeric {
                    op: "grad_check",
                    detail: format!("non-finite error at input {which} entry {e}"),
                });
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_op_has_zero_error() {
        let x = DiffTensor::<f64>::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let err = grad_check(
            |t, _v| t.constant(vec![1], vec![3.0]),
            &[x],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_epsilon_out_of_range() {
        let x = DiffTensor::<f64>::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), std::slice::from_ref(&x), 0.5).is_err());
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-9).is_err());
    }

    #[test]
    fn matmul_small_f32() {
        let a = DiffTensor::<f32>::new(vec![2, 3], vec![0.1, -0.4, 0.7, 0.3, 0.9, -0.2]).unwrap();
        let b = DiffTensor::<f32>::new(vec![3, 2], vec![0.5, 0.2, -0.3, 0.8, 0.6, -0.1]).unwrap();
        let err = grad_check(|t, v| t.matmul(v[0], v[1]), &[a, b], 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn softmax_row_f64() {
        let x = DiffTensor::<f64>::new(vec![1, 7], vec![0.3, -1.2, 0.8, 2.0, -0.5, 0.0, 1.1]).unwrap();
        let err = grad_check(|t, v| t.softmax_rows(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
