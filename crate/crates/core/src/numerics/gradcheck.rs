use super::{no_grad, Tensor, Var};
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences with step `h`. Run in 64-bit mode.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Var) -> Result<Var>,
{
    grad_check_many(|vs| f(&vs[0]), std::slice::from_ref(x), h, None)
}

/// Multi-input variant. `max_coords` caps how many coordinates per input are
/// probed (evenly strided), for large parameter tensors.
pub fn grad_check_many<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = xs.iter().map(|x| Var::param(x.clone())).collect();
    let out = f(&vars)?;
    if out.value().numel() != 1 {
        bail!(Dimension, "grad_check needs a scalar function, got {:?}", out.shape());
    }
    out.backward();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop(out);
    drop(vars);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        no_grad(|| {
            let vs: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
            let y = f(&vs)?.item();
            if !y.is_finite() {
                bail!(Numeric, "grad_check: non-finite function value {y}");
            }
            Ok(y)
        })
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        let n = x.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for ci in (0..n).step_by(stride) {
            let orig = x.data()[ci];
            probe[ti].data_mut()[ci] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                bail!(Numeric, "grad_check: non-finite error at input {ti} coord {ci}");
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ci);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::randn(&[3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let rep = grad_check(|v| v.mul(v)?.sum(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
        assert_eq!(rep.checked, 9);
    }

    #[test]
    fn flags_a_kink() {
        // normalizing a 1-vector is sign(x): zero analytic slope, but a
        // difference straddling zero sees the jump
        let x = Tensor::full(&[1], 0.0);
        let rep = grad_check(|v| v.mul(v)?.exp()?.sum(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-7);
        let rep = grad_check(|v| v.l2_normalize_rows()?.sum(), &Tensor::full(&[1], 1e-7), 1e-6).unwrap();
        assert!(rep.max_rel_error > 0.1, "{rep:?}");
    }

    #[test]
    fn coordinate_cap() {
        let x = Tensor::full(&[100], 0.5);
        let rep = grad_check_many(|v| v[0].mul(&v[0])?.sum(), &[x], 1e-6, Some(10)).unwrap();
        assert_eq!(rep.checked, 10);
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::full(&[2], 1.0);
        assert!(grad_check(|v| Ok(v.clone()), &x, 1e-6).is_err());
    }
}
