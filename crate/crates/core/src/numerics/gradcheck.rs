use rayon::prelude::*;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every element.
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar program against central
/// differences with step `eps`, element by element over every parameter.
///
/// `program` receives the graph and one variable per parameter, in order,
/// and must return a scalar variable. It has to be deterministic.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = program(&mut g, &vars)?;
    check_scalar(g.value(loss))?;
    let mut grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |pi: usize, ei: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut t = p.clone();
                if i == pi {
                    t.data_mut()[ei] += delta;
                }
                g.constant(t)
            })
            .collect();
        let loss = program(&mut g, &vars)?;
        check_scalar(g.value(loss))
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |ei| (pi, ei)))
        .collect();
    let errors: Vec<Result<f64>> = coords
        .par_iter()
        .map(|&(pi, ei)| {
            let plus = eval(pi, ei, eps)?;
            let minus = eval(pi, ei, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            Ok((a - numeric).abs() / numeric.abs().max(1.0))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: coords.len(),
    };
    for (err, &coord) in errors.into_iter().zip(&coords) {
        let err = err?;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = coord;
        }
    }
    Ok(report)
}

fn check_scalar(t: &Tensor<f64>) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar program, got {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical("program value is not finite".into()));
    }
    Ok(v)
}
