//! Central finite-difference gradient oracle.

use super::graph::{Graph, Var};
use super::registry::{ParameterRegistry, Params};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Denominator floor for relative errors. Below this magnitude both
/// gradients are treated as absolute differences.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub values_checked: usize,
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR);
    (a - b).abs() / denom
}

fn eval<T: Scalar, F>(f: &F, registry: &ParameterRegistry<T>) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &Params) -> Result<Var>,
{
    let mut g = Graph::new();
    let params = registry.bind(&mut g);
    let out = f(&mut g, &params)?;
    let v = g.scalar_value(out).to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v} during gradient check")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, one parameter component at a time.
pub fn grad_check<T: Scalar, F>(f: F, registry: &ParameterRegistry<T>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &Params) -> Result<Var>,
{
    if !(eps > 1e-8 && eps < 1e-3) {
        return Err(Error::Config(format!("finite-difference step {eps} outside (1e-8, 1e-3)")));
    }
    let mut g = Graph::new();
    let params = registry.bind(&mut g);
    let out = f(&mut g, &params)?;
    if !g.scalar_value(out).is_finite() {
        return Err(Error::Numeric("non-finite loss during gradient check".into()));
    }
    g.backward(out)?;
    let analytic = registry.collect_grads(&g, &params);

    let mut work = registry.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        values_checked: 0,
    };
    let names: Vec<String> = registry.names().map(str::to_owned).collect();
    for name in names {
        let len = registry.get(&name).map_or(0, |t| t.len());
        for i in 0..len {
            let orig = registry.get(&name).expect("name from registry").data()[i];
            set(&mut work, &name, i, orig + T::lit(eps));
            let plus = eval(&f, &work)?;
            set(&mut work, &name, i, orig - T::lit(eps));
            let minus = eval(&f, &work)?;
            set(&mut work, &name, i, orig);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[&name].data()[i].to_f64_lossy();
            let err = relative_error(a, numeric);
            report.values_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn set<T: Scalar>(r: &mut ParameterRegistry<T>, name: &str, i: usize, v: T) {
    if let Some(t) = r.get_mut(name) {
        t.data_mut()[i] = v;
    }
}
