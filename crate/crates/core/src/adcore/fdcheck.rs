use super::{AdError, Order, ParamSet, Tape, Var, VarSet};

/// Central-difference gradient check of a tape-built scalar function.
///
/// `f` receives a fresh tape (in `order` mode) with `params` placed as leaves and
/// must return the scalar loss. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, h: f64, order: Order) -> Result<f64, AdError>
where
    F: for<'t> Fn(&'t Tape, &VarSet<'t>) -> Result<Var<'t>, AdError>,
{
    let value = |p: &ParamSet| -> Result<f64, AdError> {
        let tape = Tape::new(order);
        let vars = p.to_vars(&tape);
        f(&tape, &vars)?.item()
    };
    let gradient = |p: &ParamSet| -> Result<ParamSet, AdError> {
        let tape = Tape::new(order);
        let vars = p.to_vars(&tape);
        let loss = f(&tape, &vars)?;
        let grads = tape.gradients(loss, &vars.vars())?;
        Ok(vars.name_tensors(grads))
    };
    finite_diff_check_with(value, gradient, params, h)
}

/// Same check for functions whose gradient is assembled outside a single tape.
pub fn finite_diff_check_with(
    value: impl Fn(&ParamSet) -> Result<f64, AdError>,
    gradient: impl Fn(&ParamSet) -> Result<ParamSet, AdError>,
    params: &ParamSet,
    h: f64,
) -> Result<f64, AdError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(AdError::Invalid(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let analytic = gradient(params)?.flatten();
    let base = params.flatten();
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for k in 0..base.len() {
        probe[k] = base[k] + h;
        let up = value(&params.unflatten(&probe)?)?;
        probe[k] = base[k] - h;
        let down = value(&params.unflatten(&probe)?)?;
        probe[k] = base[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(AdError::NonFinite(format!("function value at coordinate {k}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
