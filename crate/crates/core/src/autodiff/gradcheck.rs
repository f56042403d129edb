//! Central-difference gradient checking in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Absolute differences below this are central-difference round-off, not
/// gradient error. Structurally zero gradients (for example a key projection
/// attending over a single token) would otherwise score a relative error of 1.
pub const NOISE_FLOOR: f64 = 1e-9;

/// `|a - n| / (|a| + |n| + 1e-12)`, or 0 when `|a - n|` is under
/// [`NOISE_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < NOISE_FLOOR {
        0.0
    } else {
        diff / (analytic.abs() + numeric.abs() + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub(crate) fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        }
    }

    pub(crate) fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if err > self.max_rel_error || self.coords_checked == 1 {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn eval_scalar<Fun>(f: &Fun, x: &Tensor<f64>) -> Result<f64>
where
    Fun: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, tape.constant(x.clone()))?;
    let v = out.value();
    if !v.is_scalar() {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// over every coordinate of `x`.
pub fn finite_diff_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    Fun: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&tape, input)?;
    if !out.value().is_scalar() {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(input)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport::empty();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record(i, analytic.data()[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// Checks the gradient of a scalar function of the parameters at the listed
/// `(parameter, flat index)` coordinates. `worst_index` in the report
/// indexes `coords`.
pub fn param_grad_check<Fun>(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    eps: f64,
    f: Fun,
) -> Result<GradCheckReport>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Result<Var<'t, f64>>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, s)?;
        if !out.value().is_scalar() {
            return Err(Error::contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Option<&[f64]>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        analytic[id.0] = Some(g);
    }

    let mut report = GradCheckReport::empty();
    let mut probe = store.clone();
    for (k, &(id, i)) in coords.iter().enumerate() {
        let orig = probe.value(id).data()[i];
        probe.get_mut(id).value.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig;
        let a = analytic[id.0].map_or(0.0, |g| g[i]);
        report.record(k, a, (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::concat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = crate::tensor::numel(shape);
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn check<Fun>(f: Fun, x: Tensor<f64>, tol: f64)
    where
        Fun: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
    {
        let r = finite_diff_check(f, &x, DEFAULT_EPS).unwrap();
        assert!(r.passes(tol), "{r:?}");
    }

    #[test]
    fn sum_of_squares() {
        check(|_, x| Ok(x.mul(x)?.sum()), random(&[5], 1), 1e-7);
    }

    #[test]
    fn softmax_cross_entropy() {
        check(|_, x| x.cross_entropy(&[2, 0, 1]), random(&[3, 4], 2), 1e-6);
    }

    // Every differentiable op, composed with a fixed random weighting so the
    // upstream gradient is not uniform.
    fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
        let w = tape.constant(random(&y.shape(), seed));
        Ok(y.mul(w)?.sum())
    }

    #[test]
    fn each_op_matches_central_differences() {
        let tol = 1e-6;
        check(|t, x| weighted(t, x.softmax(), 10), random(&[2, 5], 11), tol);
        check(|t, x| weighted(t, x.gelu(), 12), random(&[7], 13), tol);
        check(|t, x| weighted(t, x.softplus(), 14), random(&[7], 15), tol);
        check(|t, x| weighted(t, x.abs(), 16), random(&[7], 17), tol);
        check(|t, x| weighted(t, x.scale(-0.7), 18), random(&[3], 19), tol);
        check(
            |t, x| {
                let g = t.constant(random(&[4], 20));
                let b = t.constant(random(&[4], 21));
                weighted(t, x.layer_norm(g, b)?, 22)
            },
            random(&[3, 4], 23),
            tol,
        );
        check(
            |t, x| {
                let w = t.constant(random(&[4, 3], 24));
                weighted(t, x.matmul(w)?, 25)
            },
            random(&[2, 2, 4], 26),
            tol,
        );
        check(
            |t, x| {
                let a = t.constant(random(&[2, 3, 4], 27));
                weighted(t, a.matmul(x)?, 28)
            },
            random(&[2, 4, 5], 29),
            tol,
        );
        check(
            |t, x| {
                let b = t.constant(random(&[4], 30));
                weighted(t, x.mul(b)?.add(b)?.sub(x.mul(x)?)?, 31)
            },
            random(&[3, 4], 32),
            tol,
        );
        check(
            |t, x| weighted(t, x.permute(&[2, 0, 1])?.reshape(&[4, 6])?, 33),
            random(&[2, 3, 4], 34),
            tol,
        );
        check(|t, x| weighted(t, x.expand(&[3, 2, 4])?, 35), random(&[2, 1], 36), tol);
        check(
            |t, x| weighted(t, concat(&[x, x.scale(2.0)], 1)?.narrow(1, 1, 3)?, 37),
            random(&[2, 3], 38),
            tol,
        );
        check(|t, x| weighted(t, x.pairwise_distance()?, 39), random(&[4, 3], 40), tol);
        check(|t, x| weighted(t, x.gather(&[0, 5, 5, 2])?, 41), random(&[2, 3], 42), tol);
    }
}
