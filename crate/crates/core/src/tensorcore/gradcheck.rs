use std::collections::BTreeMap;

use super::{GradientMap, Graph, Scalar, Tensor, TensorError, Var};

/// Parameter nodes handed to a loss closure, keyed by id.
pub type ParamVars<'g, S> = BTreeMap<String, Var<'g, S>>;

/// Pins a closure to the higher-ranked signature expected by
/// [`finite_diff_check`]; closures stored in a `let` otherwise infer a single
/// concrete lifetime.
pub fn loss_fn<S, F>(f: F) -> F
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &ParamVars<'g, S>) -> Result<Var<'g, S>, TensorError>,
{
    f
}

fn evaluate<S, F>(loss: &F, params: &BTreeMap<String, Tensor<S>>) -> Result<S, TensorError>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &ParamVars<'g, S>) -> Result<Var<'g, S>, TensorError>,
{
    let graph = Graph::new();
    let vars = params.iter().map(|(k, v)| (k.clone(), graph.param(k, v.clone()))).collect();
    let out = loss(&graph, &vars)?;
    Ok(out.item())
}

/// Central-difference gradient of a deterministic scalar closure.
pub fn central_differences<S, F>(loss: &F, params: &BTreeMap<String, Tensor<S>>, eps: S) -> Result<GradientMap<S>, TensorError>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &ParamVars<'g, S>) -> Result<Var<'g, S>, TensorError>,
{
    let two = S::lit(2.0);
    let mut probe = params.clone();
    let mut out = GradientMap::new();
    for (name, base) in params {
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.len() {
            let x = base.data()[i];
            probe.get_mut(name).expect("probe has every key").data_mut()[i] = x + eps;
            let up = evaluate(loss, &probe)?;
            probe.get_mut(name).expect("probe has every key").data_mut()[i] = x - eps;
            let down = evaluate(loss, &probe)?;
            probe.get_mut(name).expect("probe has every key").data_mut()[i] = x;
            grad.data_mut()[i] = (up - down) / (two * eps);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Worst coordinate-wise `|a - b| / max(|a|, |b|, 1e-8)` over the keys of
/// `reference`; keys absent from `analytic` count as zero gradients.
pub fn max_relative_error<S: Scalar>(analytic: &GradientMap<S>, reference: &GradientMap<S>) -> S {
    let floor = S::lit(1e-8);
    let mut worst = S::zero();
    for (name, r) in reference.iter() {
        for (i, &b) in r.data().iter().enumerate() {
            let a = analytic.get(name).map_or(S::zero(), |t| t.data()[i]);
            let denom = a.abs().max(b.abs()).max(floor);
            worst = worst.max((a - b).abs() / denom);
        }
    }
    worst
}

/// Compares the analytic gradient of `loss` against central differences and
/// returns the worst relative error.
pub fn finite_diff_check<S, F>(loss: F, params: &BTreeMap<String, Tensor<S>>, eps: S) -> Result<S, TensorError>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &ParamVars<'g, S>) -> Result<Var<'g, S>, TensorError>,
{
    if !(eps > S::zero()) {
        return Err(TensorError::Contract("finite difference step must be positive".into()));
    }
    if params.is_empty() {
        return Err(TensorError::Contract("no parameters to check".into()));
    }
    let graph = Graph::new();
    let vars: ParamVars<'_, S> = params.iter().map(|(k, v)| (k.clone(), graph.param(k, v.clone()))).collect();
    let out = loss(&graph, &vars)?;
    let ids: Vec<&str> = params.keys().map(String::as_str).collect();
    let analytic = graph.backward(out, &ids, false)?;

    let first = out.item();
    let second = evaluate(&loss, params)?;
    if first == second {
        let numeric = central_differences(&loss, params, eps)?;
        Ok(max_relative_error(&analytic, &numeric))
    } else {
        Err(TensorError::NonDeterministic { first: first.to_f64().unwrap_or(f64::NAN), second: second.to_f64().unwrap_or(f64::NAN) })
    }
}
