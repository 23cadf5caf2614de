use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// max over coordinates of |analytic − numeric| / max(1, |analytic|)
pub fn max_relative_error<T: Element>(analytic: &[T], numeric: &[T]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, returning the maximum relative error.
///
/// `f` receives a fresh tape and the leaf holding the evaluation point.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let v = tape.value(y).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: function value {v}")));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).expect("point is a gradient leaf").clone();

    let mut numeric = vec![0.0; point.len()];
    let mut probe = point.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(max_relative_error(analytic.data(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::from_vec([2], vec![0.5, -0.5]).unwrap();
        let err = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0);
                let s = t.sum(z);
                Ok(t.add_scalar(s, 4.0))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_is_error() {
        let p = Tensor::from_vec([1], vec![1.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.sum(x);
                Ok(t.add_scalar(s, f64::INFINITY))
            },
            &p,
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
