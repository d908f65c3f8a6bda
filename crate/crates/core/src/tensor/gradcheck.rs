//! Central-difference gradient checks for anything built on a [`Tape`].

use super::store::{Bindings, ParamStore};
use super::tape::{Array, Tape, Var};
use super::{Result, TensorError};

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(TensorError::Precondition(format!(
            "finite-difference step must lie in (0, 1e-2], got {eps}"
        )))
    }
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let a = tape.value(v);
    if a.len() != 1 {
        return Err(TensorError::Precondition(format!(
            "gradient check needs a scalar output, got shape {:?}",
            a.shape
        )));
    }
    Ok(a.data[0])
}

fn max_rel_err(analytic: &[f64], mut eval: impl FnMut(usize, f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Max relative error between the reverse-mode gradient of `f` at `point`
/// and central differences `(f(x+eps) - f(x-eps)) / (2 eps)`, with the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    scalar(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    max_rel_err(
        &analytic,
        |i, delta| {
            let mut p = point.clone();
            p.data[i] += delta;
            let mut t = Tape::new();
            let xv = t.leaf(p, false);
            let yv = f(&mut t, xv)?;
            scalar(&t, yv)
        },
        eps,
    )
}

/// Gradient check of a model-level scalar with respect to one named
/// parameter of `store`; every other parameter is held at its stored value.
pub fn grad_check_param<F>(store: &ParamStore, name: &str, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    check_eps(eps)?;
    let base = store.tensor(name)?.to_array();
    let mut tape = Tape::new();
    let b = store.bind_with(&mut tape, |n, _| n == name, |_| None);
    let y = f(&mut tape, &b)?;
    scalar(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(b.get(name)?)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; base.len()]);

    max_rel_err(
        &analytic,
        |i, delta| {
            let mut p = base.clone();
            p.data[i] += delta;
            let mut t = Tape::new();
            let bb = store.bind_with(&mut t, |_, _| false, |n| (n == name).then(|| p.clone()));
            let yv = f(&mut t, &bb)?;
            scalar(&t, yv)
        },
        eps,
    )
}
