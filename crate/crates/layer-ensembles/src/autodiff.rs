//! Reverse-mode autodiff over a per-pass tape.
//!
//! A `Graph` is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse walk over
//! node ids. Parameters enter the tape as leaves tagged with a parameter id;
//! after `backward` their gradients are read back through `Gradients`.

use crate::error::{LeError, Result};
use crate::losses;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Conv2d { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    SoftmaxCh,
    Upsample { factor: usize },
    Downsample { factor: usize, in_h: usize, in_w: usize },
    Add,
    Mul,
    ConcatCh { left_channels: usize },
    BatchNormTrain { eps: f64 },
    BatchNormEval { eps: f64, rmean: Tensor, rvar: Tensor },
    Lincomb { coeffs: Vec<f64> },
    SumAll,
    GeneralizedDice { labels: Vec<u32> },
    WeightedCe { labels: Vec<u32>, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Bn { mean: Tensor, var: Tensor },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
    aux: Aux,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a parameter id, if that parameter was used in the pass.
    pub fn param(&self, pid: usize) -> Option<&Tensor> {
        self.param_nodes
            .iter()
            .find(|(p, _)| *p == pid)
            .and_then(|(_, n)| self.grads[n.0].as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Batch statistics computed by a train-mode batchnorm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&Tensor, &Tensor)> {
        match &self.nodes[id.0].aux {
            Aux::Bn { mean, var } => Some((mean, var)),
            Aux::None => None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool, aux: Aux) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value, false, Aux::None)
    }

    /// Differentiable leaf without a parameter id (for tests and probes).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value, true, Aux::None)
    }

    /// Differentiable leaf holding a model parameter.
    pub fn param(&mut self, pid: usize, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: Some(pid) }, vec![], value, true, Aux::None)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(kernel), self.value(bias), stride, pad)?;
        let ng = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, kernel, bias], v, ng, Aux::None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(Op::Relu, vec![x], v, ng, Aux::None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(Op::Sigmoid, vec![x], v, ng, Aux::None)
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let v = ops::softmax_channels(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(Op::SoftmaxCh, vec![x], v, ng, Aux::None)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> NodeId {
        let v = ops::upsample_nearest(self.value(x), factor);
        let ng = self.any_grad(&[x]);
        self.push(Op::Upsample { factor }, vec![x], v, ng, Aux::None)
    }

    pub fn downsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let sh = self.value(x).shape();
        let (in_h, in_w) = (sh[2], sh[3]);
        let v = ops::downsample_nearest(self.value(x), factor)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(Op::Downsample { factor, in_h, in_w }, vec![x], v, ng, Aux::None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(LeError::ShapeMismatch {
                context: "add".into(),
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        let mut v = self.value(a).clone();
        v.axpy(1.0, self.value(b));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add, vec![a, b], v, ng, Aux::None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(LeError::ShapeMismatch {
                context: "mul".into(),
                expected: self.value(a).shape().to_vec(),
                got: self.value(b).shape().to_vec(),
            });
        }
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= *y;
        }
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul, vec![a, b], v, ng, Aux::None))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let left_channels = self.value(a).shape()[1];
        let v = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Op::ConcatCh { left_channels }, vec![a, b], v, ng, Aux::None))
    }

    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (v, mean, var) = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps);
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Op::BatchNormTrain { eps },
            vec![x, gamma, beta],
            v,
            ng,
            Aux::Bn { mean, var },
        )
    }

    pub fn batchnorm_eval(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, rmean: &Tensor, rvar: &Tensor, eps: f64) -> NodeId {
        let v = ops::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), rmean, rvar, eps);
        let ng = self.any_grad(&[x, gamma, beta]);
        self.push(
            Op::BatchNormEval {
                eps,
                rmean: rmean.clone(),
                rvar: rvar.clone(),
            },
            vec![x, gamma, beta],
            v,
            ng,
            Aux::None,
        )
    }

    /// Elementwise linear combination sum_i c_i * x_i of same-shape nodes.
    pub fn lincomb(&mut self, ids: &[NodeId], coeffs: &[f64]) -> Result<NodeId> {
        if ids.is_empty() || ids.len() != coeffs.len() {
            return Err(LeError::InvalidArgument(
                "lincomb needs equally many nodes and coefficients".into(),
            ));
        }
        let shape = self.value(ids[0]).shape().to_vec();
        let mut v = Tensor::zeros(&shape);
        for (&id, &c) in ids.iter().zip(coeffs) {
            if self.value(id).shape() != shape {
                return Err(LeError::ShapeMismatch {
                    context: "lincomb".into(),
                    expected: shape,
                    got: self.value(id).shape().to_vec(),
                });
            }
            v.axpy(c, self.value(id));
        }
        let ng = self.any_grad(ids);
        Ok(self.push(
            Op::Lincomb {
                coeffs: coeffs.to_vec(),
            },
            ids.to_vec(),
            v,
            ng,
            Aux::None,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.any_grad(&[x]);
        self.push(Op::SumAll, vec![x], v, ng, Aux::None)
    }

    /// Generalized Dice loss of probability maps against integer labels.
    pub fn generalized_dice(&mut self, probs: NodeId, labels: &[u32]) -> Result<NodeId> {
        let v = losses::gdl_forward(self.value(probs), labels)?;
        let ng = self.any_grad(&[probs]);
        Ok(self.push(
            Op::GeneralizedDice {
                labels: labels.to_vec(),
            },
            vec![probs],
            Tensor::scalar(v),
            ng,
            Aux::None,
        ))
    }

    /// Weighted cross-entropy of probability maps against integer labels.
    pub fn weighted_ce(&mut self, probs: NodeId, labels: &[u32], weights: &[f64]) -> Result<NodeId> {
        let v = losses::wce_forward(self.value(probs), labels, weights)?;
        let ng = self.any_grad(&[probs]);
        Ok(self.push(
            Op::WeightedCe {
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            vec![probs],
            Tensor::scalar(v),
            ng,
            Aux::None,
        ))
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(LeError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let ins = &node.inputs;
            let needs = |k: usize| self.nodes[ins[k].0].needs_grad;
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { stride, pad } => {
                    let x = &self.nodes[ins[0].0].value;
                    let k = &self.nodes[ins[1].0].value;
                    if needs(0) {
                        let dx = ops::conv2d_grad_input(&g, k, *stride, *pad, x.shape()[2], x.shape()[3]);
                        Self::accumulate(&mut grads, ins[0], dx);
                    }
                    if needs(1) {
                        let dk = ops::conv2d_grad_kernel(&g, x, k.shape(), *stride, *pad);
                        Self::accumulate(&mut grads, ins[1], dk);
                    }
                    if needs(2) {
                        Self::accumulate(&mut grads, ins[2], ops::conv2d_grad_bias(&g));
                    }
                }
                Op::Relu => {
                    if needs(0) {
                        let dx = ops::relu_grad(&self.nodes[ins[0].0].value, &g);
                        Self::accumulate(&mut grads, ins[0], dx);
                    }
                }
                Op::Sigmoid => {
                    if needs(0) {
                        let dx = ops::sigmoid_grad(&node.value, &g);
                        Self::accumulate(&mut grads, ins[0], dx);
                    }
                }
                Op::SoftmaxCh => {
                    if needs(0) {
                        let dx = ops::softmax_channels_grad(&node.value, &g);
                        Self::accumulate(&mut grads, ins[0], dx);
                    }
                }
                Op::Upsample { factor } => {
                    if needs(0) {
                        Self::accumulate(&mut grads, ins[0], ops::upsample_nearest_grad(&g, *factor));
                    }
                }
                Op::Downsample { factor, in_h, in_w } => {
                    if needs(0) {
                        Self::accumulate(&mut grads, ins[0], ops::downsample_nearest_grad(&g, *factor, *in_h, *in_w));
                    }
                }
                Op::Add => {
                    if needs(0) {
                        Self::accumulate(&mut grads, ins[0], g.clone());
                    }
                    if needs(1) {
                        Self::accumulate(&mut grads, ins[1], g.clone());
                    }
                }
                Op::Mul => {
                    for (a, b) in [(0, 1), (1, 0)] {
                        if needs(a) {
                            let mut d = g.clone();
                            for (x, y) in d.data_mut().iter_mut().zip(self.nodes[ins[b].0].value.data()) {
                                *x *= *y;
                            }
                            Self::accumulate(&mut grads, ins[a], d);
                        }
                    }
                }
                Op::ConcatCh { left_channels } => {
                    let (da, db) = ops::concat_channels_grad(&g, *left_channels);
                    if needs(0) {
                        Self::accumulate(&mut grads, ins[0], da);
                    }
                    if needs(1) {
                        Self::accumulate(&mut grads, ins[1], db);
                    }
                }
                Op::BatchNormTrain { eps } => {
                    let Aux::Bn { mean, var } = &node.aux else {
                        unreachable!()
                    };
                    let (dx, dgamma, dbeta) = ops::batchnorm_train_grad(
                        &self.nodes[ins[0].0].value,
                        &self.nodes[ins[1].0].value,
                        mean,
                        var,
                        *eps,
                        &g,
                    );
                    if needs(0) {
                        Self::accumulate(&mut grads, ins[0], dx);
                    }
                    if needs(1) {
                        Self::accumulate(&mut grads, ins[1], dgamma);
                    }
                    if needs(2) {
                        Self::accumulate(&mut grads, ins[2], dbeta);
                    }
                }
                Op::BatchNormEval { eps, rmean, rvar } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_eval_grad(
                        &self.nodes[ins[0].0].value,
                        &self.nodes[ins[1].0].value,
                        rmean,
                        rvar,
                        *eps,
                        &g,
                    );
                    if needs(0) {
                        Self::accumulate(&mut grads, ins[0], dx);
                    }
                    if needs(1) {
                        Self::accumulate(&mut grads, ins[1], dgamma);
                    }
                    if needs(2) {
                        Self::accumulate(&mut grads, ins[2], dbeta);
                    }
                }
                Op::Lincomb { coeffs } => {
                    for (&id, &c) in ins.iter().zip(coeffs) {
                        if self.nodes[id.0].needs_grad {
                            let mut d = g.clone();
                            for x in d.data_mut() {
                                *x *= c;
                            }
                            Self::accumulate(&mut grads, id, d);
                        }
                    }
                }
                Op::SumAll => {
                    if needs(0) {
                        let shape = self.nodes[ins[0].0].value.shape().to_vec();
                        Self::accumulate(&mut grads, ins[0], Tensor::full(&shape, g.item()));
                    }
                }
                Op::GeneralizedDice { labels } => {
                    if needs(0) {
                        let mut d = losses::gdl_backward(&self.nodes[ins[0].0].value, labels);
                        for x in d.data_mut() {
                            *x *= g.item();
                        }
                        Self::accumulate(&mut grads, ins[0], d);
                    }
                }
                Op::WeightedCe { labels, weights } => {
                    if needs(0) {
                        let mut d = losses::wce_backward(&self.nodes[ins[0].0].value, labels, weights);
                        for x in d.data_mut() {
                            *x *= g.item();
                        }
                        Self::accumulate(&mut grads, ins[0], d);
                    }
                }
            }
            grads[i] = None;
        }
        // Recover leaf gradients dropped during the sweep bookkeeping.
        let mut out = Gradients {
            grads: vec![None; self.nodes.len()],
            param_nodes: vec![],
        };
        // Re-run collection: leaves kept their slot above.
        for i in 0..self.nodes.len() {
            if let Op::Leaf { param } = &self.nodes[i].op {
                if let Some(pid) = param {
                    out.param_nodes.push((*pid, NodeId(i)));
                }
            }
        }
        out.grads = grads;
        Ok(out)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between an analytic and a numeric gradient.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-4);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(&[1, 1, 2, 2], 0));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn linear_map_gradient_is_exact() {
        // loss = sum(w * x) for constant x  =>  dloss/dw = x
        let mut g = Graph::new();
        let x_val = rand_t(&[1, 1, 3, 3], 1);
        let w = g.leaf(rand_t(&[1, 1, 3, 3], 2));
        let x = g.constant(x_val.clone());
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), x_val.data());
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn relu_gradient_is_indicator() {
        let x_val = Tensor::new(vec![1, 1, 2, 2], vec![-1.5, 2.0, 0.5, -0.1]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(x_val);
        let y = g.relu(x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(&[1, 2, 4, 4], 5));
        let y = g.sigmoid(x);
        let loss = g.sum_all(y);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        assert_eq!(g1.wrt(x).unwrap().data(), g2.wrt(x).unwrap().data());
    }

    /// Finite-difference check for a single-input op.
    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let x0 = rand_t(shape, seed);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        let numeric = finite_difference(&x0, 1e-3, |probe| {
            let mut g2 = Graph::new();
            let x2 = g2.leaf(probe.clone());
            let y2 = build(&mut g2, x2);
            let l2 = g2.sum_all(y2);
            g2.value(l2).item()
        });
        let err = max_relative_error(grads.wrt(x).unwrap(), &numeric);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn gradient_check_activations_and_resampling() {
        check_unary(&[1, 2, 4, 4], 11, |g, x| g.sigmoid(x));
        check_unary(&[1, 3, 4, 4], 12, |g, x| g.softmax_channels(x));
        check_unary(&[1, 2, 4, 4], 13, |g, x| g.upsample_nearest(x, 2));
        check_unary(&[1, 2, 4, 4], 14, |g, x| g.downsample_nearest(x, 2).unwrap());
        // relu at random points has kinks at 0; offset away from them
        check_unary(&[1, 2, 4, 4], 15, |g, x| g.relu(x));
    }

    #[test]
    fn gradient_check_conv2d_all_inputs() {
        let x0 = rand_t(&[2, 2, 7, 7], 21);
        let k0 = rand_t(&[3, 2, 3, 3], 22);
        let b0 = rand_t(&[3], 23);
        let run = |x_v: &Tensor, k_v: &Tensor, b_v: &Tensor| -> (f64, Option<(Tensor, Tensor, Tensor)>) {
            let mut g = Graph::new();
            let x = g.leaf(x_v.clone());
            let k = g.leaf(k_v.clone());
            let b = g.leaf(b_v.clone());
            let y = g.conv2d(x, k, b, 2, 1).unwrap();
            let s = g.sigmoid(y);
            let loss = g.sum_all(s);
            let v = g.value(loss).item();
            let grads = g.backward(loss).unwrap();
            (
                v,
                Some((
                    grads.wrt(x).unwrap().clone(),
                    grads.wrt(k).unwrap().clone(),
                    grads.wrt(b).unwrap().clone(),
                )),
            )
        };
        let (_, g) = run(&x0, &k0, &b0);
        let (dx, dk, db) = g.unwrap();
        let ndx = finite_difference(&x0, 1e-3, |p| run(p, &k0, &b0).0);
        let ndk = finite_difference(&k0, 1e-3, |p| run(&x0, p, &b0).0);
        let ndb = finite_difference(&b0, 1e-3, |p| run(&x0, &k0, p).0);
        assert!(max_relative_error(&dx, &ndx) < 1e-3);
        assert!(max_relative_error(&dk, &ndk) < 1e-3);
        assert!(max_relative_error(&db, &ndb) < 1e-3);
    }

    #[test]
    fn gradient_check_batchnorm_train() {
        let x0 = rand_t(&[2, 2, 4, 4], 31);
        let g0 = rand_t(&[2], 32).map(|v| v + 1.5);
        let b0 = rand_t(&[2], 33);
        let run = |x_v: &Tensor, g_v: &Tensor, b_v: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(x_v.clone());
            let ga = g.leaf(g_v.clone());
            let be = g.leaf(b_v.clone());
            let y = g.batchnorm_train(x, ga, be, 1e-5);
            let s = g.sigmoid(y);
            let loss = g.sum_all(s);
            (g.value(loss).item(), g, x, ga, be, loss)
        };
        let (_, g, x, ga, be, loss) = run(&x0, &g0, &b0);
        let grads = g.backward(loss).unwrap();
        let ndx = finite_difference(&x0, 1e-3, |p| run(p, &g0, &b0).0);
        let ndg = finite_difference(&g0, 1e-3, |p| run(&x0, p, &b0).0);
        let ndb = finite_difference(&b0, 1e-3, |p| run(&x0, &g0, p).0);
        assert!(max_relative_error(grads.wrt(x).unwrap(), &ndx) < 1e-3);
        assert!(max_relative_error(grads.wrt(ga).unwrap(), &ndg) < 1e-3);
        assert!(max_relative_error(grads.wrt(be).unwrap(), &ndb) < 1e-3);
    }

    #[test]
    fn gradient_check_concat_add_lincomb() {
        let a0 = rand_t(&[1, 2, 4, 4], 41);
        let b0 = rand_t(&[1, 2, 4, 4], 42);
        let run = |a_v: &Tensor, b_v: &Tensor| {
            let mut g = Graph::new();
            let a = g.leaf(a_v.clone());
            let b = g.leaf(b_v.clone());
            let cat = g.concat_channels(a, b).unwrap();
            let s = g.sigmoid(cat);
            let sum = g.add(a, b).unwrap();
            let l1 = g.sum_all(s);
            let l2 = g.sum_all(sum);
            let loss = g.lincomb(&[l1, l2], &[0.7, 0.3]).unwrap();
            (g.value(loss).item(), g, a, b, loss)
        };
        let (_, g, a, b, loss) = run(&a0, &b0);
        let grads = g.backward(loss).unwrap();
        let nda = finite_difference(&a0, 1e-3, |p| run(p, &b0).0);
        let ndb = finite_difference(&b0, 1e-3, |p| run(&a0, p).0);
        assert!(max_relative_error(grads.wrt(a).unwrap(), &nda) < 1e-3);
        assert!(max_relative_error(grads.wrt(b).unwrap(), &ndb) < 1e-3);
    }
}
