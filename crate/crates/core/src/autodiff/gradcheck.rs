//! Central finite-difference verification of reverse rules.
//!
//! Analytic gradients are computed in the precision under test. The numeric
//! side always evaluates the same graph in `f64`, so the oracle's own
//! rounding error stays far below the tolerances being checked.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::kernels::{self, OpKind};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Builds a scalar loss from parameter tensors.
pub trait LossBuilder {
    /// Returns the loss node and, for every entry of `params`, the node whose
    /// gradient is that parameter's gradient.
    fn build<F: Real>(&self, graph: &mut Graph<F>, params: &[Tensor<F>]) -> Result<(NodeId, Vec<NodeId>)>;
}

/// Per-parameter outcome.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub precision: &'static str,
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    /// Op kinds whose local reverse rule disagrees with finite differences.
    /// Only populated when some parameter failed.
    pub suspects: Vec<OpKind>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Largest absolute deviation, relative to the larger of the two gradients'
/// magnitudes (floored at `1e-8`).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
}

/// Numeric gradient of the builder's loss with respect to each parameter.
pub fn numeric_gradients<B: LossBuilder>(builder: &B, params: &[Tensor<f64>], epsilon: f64) -> Result<Vec<Vec<f64>>> {
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let (loss, _) = builder.build(&mut g, ps)?;
        Ok(g.value(loss).item())
    };
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Vec::with_capacity(params[p].len());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + epsilon;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - epsilon;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            grad.push((up - down) / (2.0 * epsilon));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compare analytic gradients in precision `F` against central differences.
///
/// `corrupt` injects a fault into one op kind's reverse rule.
pub fn finite_diff_check<F: Real, B: LossBuilder>(
    builder: &B,
    params: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
    corrupt: Option<OpKind>,
) -> Result<GradCheckReport> {
    let cast: Vec<Tensor<F>> = params.iter().map(Tensor::cast).collect();
    let mut graph = Graph::<F>::new();
    if let Some(kind) = corrupt {
        graph.corrupt_reverse_rule(kind);
    }
    let (loss, nodes) = builder.build(&mut graph, &cast)?;
    graph.backward(loss)?;
    let numeric = numeric_gradients(builder, params, epsilon)?;
    let mut checks = Vec::with_capacity(params.len());
    for (index, (node, num)) in nodes.iter().zip(&numeric).enumerate() {
        let analytic: Vec<f64> = match graph.grad(*node) {
            Some(g) => g.data().iter().map(|v| v.to_f64_lossy()).collect(),
            None => vec![0.0; num.len()],
        };
        let err = relative_error(&analytic, num);
        checks.push(ParamCheck { index, max_rel_error: err, passed: err <= tolerance && err.is_finite() });
    }
    let mut report = GradCheckReport { precision: F::NAME, epsilon, tolerance, params: checks, suspects: Vec::new() };
    if !report.passed() {
        report.suspects = local_suspects(&graph, tolerance.max(1e-4));
    }
    Ok(report)
}

/// Check each node's reverse rule in isolation against finite differences of
/// `<u, op(inputs)>` for a random cotangent `u`.
pub fn local_suspects<F: Real>(graph: &Graph<F>, tolerance: f64) -> Vec<OpKind> {
    const PROBES: usize = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut bad = BTreeSet::new();
    let nodes = graph.nodes();
    for node in nodes {
        if node.inputs.is_empty() || !node.requires_grad {
            continue;
        }
        let kind = node.op.kind();
        if bad.contains(&kind) {
            continue;
        }
        let inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|id| &nodes[id.0].value).collect();
        let needs = vec![true; inputs.len()];
        let u_data: Vec<f64> = (0..node.value.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u64t = Tensor::new(node.value.shape().to_vec(), u_data).expect("same shape");
        let mut analytic = kernels::backward(&node.op, &inputs, &node.value, &node.saved, &u64t.cast(), &needs);
        if graph.fault() == Some(kind) {
            for g in analytic.iter_mut().flatten() {
                *g = g.map(|v| v * F::of(1.5));
            }
        }
        let op64 = node.op.cast::<f64>();
        let mut ins64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
        let probe = |ins: &[Tensor<f64>]| -> Option<f64> {
            let refs: Vec<&Tensor<f64>> = ins.iter().collect();
            let (y, _) = kernels::forward(&op64, &refs).ok()?;
            Some(y.data().iter().zip(u64t.data()).map(|(a, b)| a * b).sum())
        };
        for (j, g) in analytic.iter().enumerate() {
            let Some(g) = g else { continue };
            let len = ins64[j].len();
            let idx: Vec<usize> = if len <= PROBES {
                (0..len).collect()
            } else {
                (0..PROBES).map(|_| rng.random_range(0..len)).collect()
            };
            let eps = 1e-6;
            let mut a = Vec::with_capacity(idx.len());
            let mut n = Vec::with_capacity(idx.len());
            for &i in &idx {
                let orig = ins64[j].data()[i];
                ins64[j].data_mut()[i] = orig + eps;
                let up = probe(&ins64);
                ins64[j].data_mut()[i] = orig - eps;
                let down = probe(&ins64);
                ins64[j].data_mut()[i] = orig;
                if let (Some(up), Some(down)) = (up, down) {
                    a.push(g.data()[i].to_f64_lossy());
                    n.push((up - down) / (2.0 * eps));
                }
            }
            if relative_error(&a, &n) > tolerance {
                bad.insert(kind);
            }
        }
    }
    bad.into_iter().collect()
}

/// Loss builder that turns every parameter into a graph variable and hands
/// the variables to a generic body.
pub trait VariableLoss {
    fn loss<F: Real>(&self, graph: &mut Graph<F>, vars: &[NodeId]) -> Result<NodeId>;
}

impl<T: VariableLoss> LossBuilder for T {
    fn build<F: Real>(&self, graph: &mut Graph<F>, params: &[Tensor<F>]) -> Result<(NodeId, Vec<NodeId>)> {
        let vars: Vec<NodeId> = params.iter().map(|p| graph.variable(p.clone())).collect();
        let loss = self.loss(graph, &vars)?;
        Ok((loss, vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean squared error of a line fit on four points.
    struct LinearRegression;

    const XS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
    const YS: [f64; 4] = [1.0, 2.5, 2.9, 4.2];

    impl VariableLoss for LinearRegression {
        fn loss<F: Real>(&self, g: &mut Graph<F>, vars: &[NodeId]) -> Result<NodeId> {
            let x = g.constant(Tensor::from_f64([4, 1], &XS)?);
            let y = g.constant(Tensor::from_f64([4, 1], &YS)?);
            let pred = g.dense(x, vars[0], Some(vars[1]))?;
            let r = g.sub(pred, y)?;
            let sq = g.mul(r, r)?;
            g.mean(sq)
        }
    }

    #[test]
    fn linear_regression_matches_closed_form() {
        let w = Tensor::from_f64([1, 1], &[0.7]).unwrap();
        let b = Tensor::from_f64([1], &[0.2]).unwrap();
        let report = finite_diff_check::<f64, _>(&LinearRegression, &[w, b], 1e-6, 1e-6, None).unwrap();
        assert!(report.passed(), "{report:?}");

        // Closed form: dL/dw = 2/n Σ (w x + b − y) x, dL/db = 2/n Σ (w x + b − y).
        let mut g = Graph::<f64>::new();
        let ps = [Tensor::from_f64([1, 1], &[0.7]).unwrap(), Tensor::from_f64([1], &[0.2]).unwrap()];
        let (l, nodes) = LinearRegression.build(&mut g, &ps).unwrap();
        g.backward(l).unwrap();
        let resid: Vec<f64> = XS.iter().zip(YS).map(|(x, y)| 0.7 * x + 0.2 - y).collect();
        let dw: f64 = resid.iter().zip(XS).map(|(r, x)| r * x).sum::<f64>() / 2.0;
        let db: f64 = resid.iter().sum::<f64>() / 2.0;
        assert!((g.grad(nodes[0]).unwrap().item() - dw).abs() < 1e-12);
        assert!((g.grad(nodes[1]).unwrap().item() - db).abs() < 1e-12);
    }

    #[test]
    fn corrupted_rule_is_named() {
        let w = Tensor::from_f64([1, 1], &[0.7]).unwrap();
        let b = Tensor::from_f64([1], &[0.2]).unwrap();
        let report = finite_diff_check::<f64, _>(&LinearRegression, &[w, b], 1e-6, 1e-6, Some(OpKind::Dense)).unwrap();
        assert!(!report.passed());
        assert_eq!(report.suspects, vec![OpKind::Dense]);
    }
}
