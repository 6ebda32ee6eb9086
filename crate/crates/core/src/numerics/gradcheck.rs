//! Central finite-difference oracle for tape gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-2).contains(&eps) {
        return Err(Error::Domain(format!("grad_check eps {eps} outside [1e-7, 1e-2]")));
    }
    Ok(())
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(value: f64, index: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            index,
            detail: format!("function value {value} during finite differencing"),
        })
    }
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let input = tape.input(x.clone());
    let out = f(&tape, input)?;
    let analytic = tape
        .backward(out)?
        .wrt(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if let Some(index) = analytic.first_non_finite() {
        return Err(Error::Numeric {
            index,
            detail: "non-finite analytic gradient".into(),
        });
    }

    let eval = |t: &Tensor, index: usize| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        eval_scalar(f(&tape, v)?.item(), index)
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for index in 0..x.len() {
        let orig = probe.data()[index];
        probe.data_mut()[index] = orig + eps;
        let plus = eval(&probe, index)?;
        probe.data_mut()[index] = orig - eps;
        let minus = eval(&probe, index)?;
        probe.data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_error(analytic.data()[index], numeric));
    }
    Ok(worst)
}

/// Same check over every scalar of every parameter in `store`. `f` binds
/// whatever parameters it needs on the tape it is given.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let grads = tape.backward(out)?.for_store(store);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    let mut probe = store.clone();
    let mut flat = 0;
    for (id, name, tensor) in store.iter() {
        for index in 0..tensor.len() {
            let orig = tensor.data()[index];
            probe.get_mut(id).data_mut()[index] = orig + eps;
            let plus = eval_scalar(f(&Tape::new(), &probe)?.item(), flat)?;
            probe.get_mut(id).data_mut()[index] = orig - eps;
            let minus = eval_scalar(f(&Tape::new(), &probe)?.item(), flat)?;
            probe.get_mut(id).data_mut()[index] = orig;

            let analytic = grads[id.index()].data()[index];
            if !analytic.is_finite() {
                return Err(Error::Numeric {
                    index: flat,
                    detail: format!("non-finite analytic gradient for {name}[{index}]"),
                });
            }
            let err = rel_error(analytic, (plus - minus) / (2.0 * eps));
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.to_string();
                report.worst_index = index;
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    Ok(report)
}
