//! Central finite-difference verification of analytic gradients.

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Default perturbation for finite differences.
pub const GRAD_CHECK_EPS: f64 = 1e-5;
/// Default acceptance tolerance on the max relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Compare the analytic gradient of a scalar function against central finite
/// differences, coordinate by coordinate, over every tensor in `params`.
///
/// `build` receives a fresh graph plus one leaf per parameter tensor and must
/// return the scalar loss variable. Returns the maximum relative error
/// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over all
/// coordinates.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "grad_check requires eps > 0");

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| graph.leaf(t.clone())).collect();
        let loss = build(&mut graph, &vars)?;
        Ok(graph.value(loss).item())
    };

    // Analytic pass.
    let mut graph = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| graph.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| graph.grad(v).expect("backward fills every leaf").to_vec())
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let original = param.data()[ci];
            work[pi].data_mut()[ci] = original + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = original - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_up_to_rounding() {
        let w = Tensor::vector(vec![0.3, -1.2, 0.8, 2.0, -0.1]);
        let err = grad_check(
            |g, vars| {
                let coeffs = g.constant(Tensor::vector(vec![2.0, -3.0, 0.5, 1.0, 4.0]));
                let prod = g.hadamard(vars[0], coeffs)?;
                Ok(g.sum(prod))
            },
            &[w],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "linear map rel err {err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::matrix(
            3,
            4,
            vec![
                0.2, -0.5, 1.3, 0.7, //
                -1.1, 0.4, 0.0, 2.2, //
                0.9, 0.9, -0.3, 0.1,
            ],
        )
        .unwrap();
        let err = grad_check(
            |g, vars| g.softmax_cross_entropy(vars[0], &[2, 3, 0]),
            &[logits],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "cross-entropy rel err {err}");
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::vector(vec![3.0]);
        let err = grad_check(
            |g, vars| {
                let y = g.relu(vars[0]);
                Ok(g.sum(y))
            },
            &[x],
            GRAD_CHECK_EPS,
        )
        .unwrap();
        // d relu/dx at x=3 is exactly 1; central difference agrees to rounding.
        assert!(err < 1e-10, "relu rel err {err}");
    }
}
