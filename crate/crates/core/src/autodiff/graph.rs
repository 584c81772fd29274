//! Define-by-run computation graph with reverse-mode differentiation.

use std::collections::BTreeMap;

use super::kernels::{self, Op, OpKind, Saved};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a node in its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<F> {
    pub(crate) op: Op<F>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor<F>,
    pub(crate) saved: Saved<F>,
    pub(crate) requires_grad: bool,
    /// Parameter slot, for leaves created with [`Graph::param`].
    pub(crate) param: Option<usize>,
}

/// Activations and gradients captured at named taps.
#[derive(Clone, Debug, Default)]
pub struct FeatureTaps<F = f32> {
    entries: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Real> FeatureTaps<F> {
    pub fn new() -> Self {
        FeatureTaps { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, activation: Tensor<F>, gradient: Tensor<F>) -> Result<()> {
        if activation.shape() != gradient.shape() {
            return Err(Error::shape(
                "feature-taps",
                format!("activation {:?} vs gradient {:?}", activation.shape(), gradient.shape()),
            ));
        }
        self.entries.insert(name.into(), (activation, gradient));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&Tensor<F>, &Tensor<F>)> {
        self.entries.get(name).map(|(a, g)| (a, g)).ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn activation(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name).map(|(a, _)| a)
    }

    pub fn gradient(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name).map(|(_, g)| g)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A tape of operations. Nodes are stored in insertion order, which is a
/// topological order because every op's inputs must already exist.
#[derive(Clone, Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    taps: Vec<(String, NodeId)>,
    grads: Option<Vec<Option<Tensor<F>>>>,
    fault: Option<OpKind>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), taps: Vec::new(), grads: None, fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool, param: Option<usize>) -> NodeId {
        self.grads = None;
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, saved: Saved::Nothing, requires_grad, param });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false, None)
    }

    /// A leaf whose gradient is computed by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, true, None)
    }

    /// A trainable leaf tied to parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor<F>) -> NodeId {
        self.leaf(value, true, Some(slot))
    }

    /// Append an op node after running its forward kernel.
    pub fn apply(&mut self, op: Op<F>, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("node {} does not exist", bad.0)));
        }
        let values: Vec<&Tensor<F>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, saved) = kernels::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.grads = None;
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value, saved, requires_grad, param: None });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op<F> {
        &self.nodes[id.0].op
    }

    pub(crate) fn nodes(&self) -> &[Node<F>] {
        &self.nodes
    }

    /// Batch mean and (biased) variance computed by a training-mode batch norm.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[F], &[F])> {
        match (&self.nodes[id.0].op, &self.nodes[id.0].saved) {
            (Op::BatchNormTrain { .. }, Saved::Norm { mean, var, .. }) => Some((mean, var)),
            _ => None,
        }
    }

    /// Register `id` under `name` so its gradient can be read back after
    /// backward.
    pub fn tap(&mut self, name: impl Into<String>, id: NodeId) {
        let name = name.into();
        self.taps.retain(|(n, _)| *n != name);
        self.taps.push((name, id));
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.iter().map(|(n, _)| n.as_str())
    }

    /// Scale the reverse rule of every `kind` node by 1.5. Used only as a
    /// negative control for gradient checking.
    #[doc(hidden)]
    pub fn corrupt_reverse_rule(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub(crate) fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier runs are
    /// discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape.to_vec(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let mut local = kernels::backward(&node.op, &inputs, &node.value, &node.saved, &gout, &needs);
            if self.fault == Some(node.op.kind()) {
                for g in local.iter_mut().flatten() {
                    *g = g.map(|v| v * F::of(1.5));
                }
            }
            for (&input, g) in node.inputs.iter().zip(local) {
                if let Some(g) = g {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        // Reachable nodes that got no contribution have zero gradient.
        for (i, slot) in grads.iter_mut().enumerate().take(loss.0 + 1) {
            if slot.is_none() && self.nodes[i].requires_grad {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape().to_vec()));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn has_gradients(&self) -> bool {
        self.grads.is_some()
    }

    /// Gradient of the last loss with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.as_ref()?.get(id.0)?.as_ref()
    }

    /// `(slot, gradient)` for every parameter leaf in the graph.
    pub fn param_grads(&self) -> Vec<(usize, &Tensor<F>)> {
        let Some(grads) = &self.grads else { return Vec::new() };
        self.nodes.iter().zip(grads).filter_map(|(n, g)| Some((n.param?, g.as_ref()?))).collect()
    }

    /// Snapshot activations and gradients of the named taps.
    pub fn tap_gradients<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureTaps<F>> {
        let grads = self.grads.as_ref().ok_or(Error::NoGradients)?;
        let mut taps = FeatureTaps::new();
        for name in names {
            let name = name.as_ref();
            let id = self
                .taps
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, id)| id)
                .ok_or_else(|| Error::UnknownTap(name.to_string()))?;
            let act = self.nodes[id.0].value.clone();
            let grad = grads.get(id.0).and_then(Option::clone).unwrap_or_else(|| Tensor::zeros(act.shape().to_vec()));
            taps.insert(name, act, grad)?;
        }
        Ok(taps)
    }

    // ── builders ─────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.apply(Op::Conv2d { stride, padding }, &ins)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.apply(Op::Dense, &ins)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MaxPool2, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn batch_norm_train(&mut self, x: NodeId, scale: NodeId, shift: NodeId, eps: F) -> Result<NodeId> {
        self.apply(Op::BatchNormTrain { eps }, &[x, scale, shift])
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<NodeId> {
        let op = Op::BatchNormEval { mean: mean.to_vec(), var: var.to_vec(), eps };
        self.apply(op, &[x, scale, shift])
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Normalize, &[x])
    }

    pub fn pairwise_cosine(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::PairwiseCosine, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> Result<NodeId> {
        self.apply(Op::Scale(s), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, s: F) -> Result<NodeId> {
        self.apply(Op::AddScalar(s), &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum_last_axis(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SumLastAxis, &[x])
    }

    pub fn bilinear_resize(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        self.apply(Op::BilinearResize { height, width }, &[x])
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::GatherRows(idx), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatRows, parts)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape), &[x])
    }

    /// Weighted sum of scalar nodes, skipping zero weights.
    pub fn weighted_sum(&mut self, terms: &[(F, NodeId)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, id) in terms {
            let scaled = self.scale(id, w)?;
            acc = Some(match acc {
                Some(a) => self.add(a, scaled)?,
                None => scaled,
            });
        }
        acc.ok_or_else(|| Error::invalid("weighted_sum of no terms"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_sum_gradient_uses_zero_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2, 2], &[-1., 2., 0., 3.]));
        let r = g.relu(x).unwrap();
        g.tap("relu", r);
        let l = g.sum(r).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1., 0., 1.]);
        let taps = g.tap_gradients(&["relu"]).unwrap();
        let (a, gr) = taps.get("relu").unwrap();
        assert_eq!(a.data(), &[0., 2., 0., 3.]);
        // d(sum r)/dr is one everywhere; the ReLU mask applies below the tap.
        assert_eq!(gr.data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn half_square_norm_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1., -2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., -2.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::ones(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn taps_require_backward_and_registration() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::ones(vec![2]));
        let r = g.relu(x).unwrap();
        g.tap("a", r);
        assert!(matches!(g.tap_gradients(&["a"]), Err(Error::NoGradients)));
        let l = g.sum(r).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.tap_gradients(&["b"]), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn tap_snapshots_are_independent() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64([2], &[1., 2.]).unwrap());
        let a = g.scale(x, 2.0).unwrap();
        let b = g.scale(x, 3.0).unwrap();
        g.tap("a", a);
        g.tap("b", b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        let taps = g.tap_gradients(&["a", "b"]).unwrap();
        // Later mutation of the graph must not leak into the snapshot.
        let l2 = g.scale(l, 10.0).unwrap();
        g.backward(l2).unwrap();
        assert_eq!(taps.activation("a").unwrap().data(), &[2., 4.]);
        assert_eq!(taps.activation("b").unwrap().data(), &[3., 6.]);
        assert_eq!(taps.gradient("a").unwrap().data(), &[1., 1.]);
        assert_eq!(g.tap_gradients(&["a"]).unwrap().gradient("a").unwrap().data(), &[10., 10.]);
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64([1, 1, 3, 3], &[0.1, -0.3, 0.5, 0.2, 0.9, -0.7, 0.4, 0.0, 0.6]).unwrap());
        let w = g.param(0, Tensor::from_f64([1, 1, 2, 2], &[0.3, -0.2, 0.5, 0.1]).unwrap());
        let c = g.conv2d(x, w, None, 1, 0).unwrap();
        let e = g.exp(c).unwrap();
        let l = g.mean(e).unwrap();
        g.backward(l).unwrap();
        let first: Vec<f32> = g.grad(w).unwrap().data().to_vec();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), first.as_slice());
        assert_eq!(g.param_grads().len(), 1);
    }
}
