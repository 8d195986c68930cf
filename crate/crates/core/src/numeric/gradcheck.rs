//! Central finite-difference validation of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
#[cfg(test)]
use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords: usize,
}

/// `|a − n| / max(1e−8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients of `f` with central differences
/// `(f(p+eps) − f(p−eps)) / 2eps`, coordinate by coordinate, over every
/// parameter in `store`.
pub fn grad_check<B>(store: &ParamStore<f64>, eps: f64, f: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, eps, f)
}

/// As [`grad_check`], restricted to `ids`.
pub fn grad_check_params<B>(store: &ParamStore<f64>, ids: &[ParamId], eps: f64, f: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords: 0,
    };
    for &id in ids {
        let analytic: Vec<f64> = match grads.param(id) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; store.get(id).len()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.coords += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
fn build_weighted(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    assert_eq!(g.shape(out), weights.shape(), "weights must match the output shape");
    (g, vars, out)
}

/// Analytic gradients of `Σ w ⊙ build(inputs)` with respect to each input.
#[cfg(test)]
pub(crate) fn input_grads(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Vec<Vec<f64>> {
    let (mut g, vars, out) = build_weighted(inputs, weights, build);
    let w = g.constant(weights.clone());
    let wy = g.mul(out, w).unwrap();
    let loss = g.sum_all(wy);
    let grads = g.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

/// Checks the adjoint of `build` with respect to free inputs, scalarized as
/// `Σ w ⊙ y` with fixed `weights`. The numeric side differences each output
/// before weighting, so outputs untouched by a perturbation contribute
/// exactly zero. Returns the maximum relative error.
#[cfg(test)]
pub(crate) fn check_inputs(
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    eps: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let analytic = input_grads(inputs, weights, &build);
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (j, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[j].data()[i];
            work[j].data_mut()[i] = orig + eps;
            let (g1, _, o1) = build_weighted(&work, weights, &build);
            work[j].data_mut()[i] = orig - eps;
            let (g2, _, o2) = build_weighted(&work, weights, &build);
            work[j].data_mut()[i] = orig;
            let numeric = g1
                .value(o1)
                .data()
                .iter()
                .zip(g2.value(o2).data())
                .zip(weights.data())
                .map(|((p, m), w)| w * (p - m))
                .sum::<f64>()
                / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::<f64>::new();
        let x = store
            .add("x", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let report = grad_check(&store, 1e-5, |g, s| {
            let v = g.param(s, x);
            let sq = g.mul(v, v)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.coords, 3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-9) - 5e-10).abs() < 1e-15);
    }
}
