//! Central-finite-difference gradient oracle.
//!
//! The analytic path runs the real f32 forward/backward; the oracle
//! re-evaluates the same f32 forward at perturbed inputs and forms the
//! difference quotient in f64 against the actually-representable step, so
//! the only noise left is the forward's own rounding.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Max relative error between analytic and central-difference gradients of
/// a scalar-valued function w.r.t. `x`.
///
/// Relative error per element is |analytic − central| / max(1, |central|).
pub fn gradcheck<F>(mut f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let errs = gradcheck_multi(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Like [`gradcheck`] but checks the gradient w.r.t. every listed input in
/// one analytic pass. Returns one max relative error per input.
pub fn gradcheck_multi<F>(mut f: F, xs: &[Tensor], eps: f32) -> Result<Vec<f32>>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::contract("gradcheck", format!("eps {eps} outside [1e-4, 1e-2]")));
    }
    for x in xs {
        if x.numel() > 1000 {
            return Err(Error::contract(
                "gradcheck",
                format!("probe has {} elements, limit is 1000", x.numel()),
            ));
        }
    }

    // Analytic gradients.
    let leaves: Vec<Tensor> = xs
        .iter()
        .map(|x| Tensor::param(x.data().to_vec(), x.shape()).unwrap())
        .collect();
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    let y = f(&mut tape, &leaves)?;
    if y.numel() != 1 {
        return Err(Error::contract(
            "gradcheck",
            format!("function must be scalar-valued, got shape {:?}", y.shape()),
        ));
    }
    tape.backward(&y)?;
    let analytic: Vec<Vec<f32>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    // Central differences, one probe element at a time.
    let mut max_err = vec![0.0f32; xs.len()];
    for (xi, x) in xs.iter().enumerate() {
        let base = x.data().to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let yp = eval_at(&mut f, xs, xi, plus.clone(), x.shape())?;
            let ym = eval_at(&mut f, xs, xi, minus.clone(), x.shape())?;
            if !yp.is_finite() || !ym.is_finite() {
                return Err(Error::contract(
                    "gradcheck",
                    format!("non-finite oracle value at input {xi} element {i}"),
                ));
            }
            // Use the actually-representable step.
            let step = plus[i] as f64 - minus[i] as f64;
            let central = (yp - ym) / step;
            let rel = (analytic[xi][i] as f64 - central).abs() / central.abs().max(1.0);
            max_err[xi] = max_err[xi].max(rel as f32);
        }
    }
    Ok(max_err)
}

fn eval_at<F>(
    f: &mut F,
    xs: &[Tensor],
    replace: usize,
    data: Vec<f32>,
    shape: &[usize],
) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut probe: Vec<Tensor> = xs.iter().map(|x| x.detach()).collect();
    probe[replace] = Tensor::from_vec(data, shape)?;
    let mut tape = Tape::no_grad();
    tape.set_check_finite(true);
    Ok(f(&mut tape, &probe)?.item_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = Rng::new(0, "gc-sum");
        let x = Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng);
        let err = gradcheck(|t, x| t.sum(x), &x, 1e-3).unwrap();
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn sum_of_softmax_is_constant() {
        // The true gradient is zero. The central difference sees the f32
        // rounding of each softmax output (~1e-7 per lane), so over a 2e-3
        // step the quotient floor sits near 1e-4; 2e-4 is the honest bound
        // for a 32-bit forward.
        let mut rng = Rng::new(1, "gc-softmax-const");
        let x = Tensor::randn(&[2, 5], 0.0, 1.0, &mut rng);
        let err = gradcheck(
            |t, x| {
                let s = t.softmax(x, 1)?;
                t.sum(&s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 2e-4, "err {err}");
    }

    #[test]
    fn mean_of_conv_output() {
        let mut rng = Rng::new(2, "gc-conv");
        let x = Tensor::randn(&[1, 2, 6, 6], 0.0, 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.0, 0.5, &mut rng).detach();
        let b = Tensor::randn(&[3], 0.0, 0.5, &mut rng).detach();
        let err = gradcheck(
            |t, x| {
                let y = t.conv2d(x, &w, &b, 1, 1)?;
                t.mean(&y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-2, "err {err}");
    }

    #[test]
    fn eps_and_size_preconditions() {
        let x = Tensor::zeros(&[2]);
        assert!(gradcheck(|t, x| t.sum(x), &x, 1e-5).is_err());
        let big = Tensor::zeros(&[2000]);
        assert!(gradcheck(|t, x| t.sum(x), &big, 1e-3).is_err());
    }
}
