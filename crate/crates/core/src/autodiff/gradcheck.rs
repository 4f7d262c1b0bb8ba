//! Central finite differences as an oracle for analytic adjoints.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step used throughout the verification suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, optionally restricted to `coords`
/// (entries outside the subset are left at zero).
pub fn central_differences<F>(mut f: F, x: &[f64], h: f64, coords: Option<&[usize]>) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = vec![0.0; x.len()];
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    for &i in coords {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericFault {
                op: "finite_diff".into(),
                detail: format!("non-finite function value around coordinate {i}"),
            });
        }
        out[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// max_i |analytic_i − numeric_i| / max(1, |numeric_i|)
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape adjoint of the scalar program `f` against central
/// differences at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_coords(f, x, h, None)
}

/// As [`finite_diff_check`] over a subset of coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor<f64>, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.param(x.clone())?;
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .map(|g| g.to_f64_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let shape = x.shape().to_vec();
    let numeric = central_differences(
        |p| {
            let mut tape = Tape::new();
            let input = tape.constant(Tensor::new(shape.clone(), p.to_vec())?)?;
            let out = f(&mut tape, input)?;
            tape.value(out).item()
        },
        x.data(),
        h,
        coords,
    )?;
    let (a, n): (Vec<f64>, Vec<f64>) = match coords {
        Some(c) => c.iter().map(|&i| (analytic[i], numeric[i])).unzip(),
        None => (analytic, numeric),
    };
    Ok(max_relative_error(&a, &n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");

        let mut tape = Tape::new();
        let v = tape.param(x).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detects_wrong_gradient() {
        let numeric = central_differences(|p| Ok(p[0] * p[0]), &[3.0], DEFAULT_STEP, None).unwrap();
        assert!(max_relative_error(&[-6.0], &numeric) > 1.0);
        assert!(max_relative_error(&[6.0], &numeric) < 1e-8);
    }

    #[test]
    fn non_finite_function_is_fault() {
        let r = central_differences(|p| Ok(p[0].ln()), &[0.0], DEFAULT_STEP, None);
        assert!(matches!(r, Err(Error::NumericFault { .. })));
    }
}
