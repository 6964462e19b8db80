//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvSpec, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for the threshold gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGradient {
    /// Exact subgradient: zero on the clamped branch, `σ'(A)` on the pass branch.
    #[default]
    Exact,
    /// Backpropagates `σ'(A)` everywhere, as if the clamp were absent.
    StraightThrough,
}

/// Half-width of the triangular kernel that stands in for the derivative of
/// the clamp indicator with respect to a learned threshold.
const THRESHOLD_SURROGATE_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub enum Threshold {
    Fixed(f64),
    /// A `[1,1,1,1]` node holding the threshold value.
    Node(NodeId),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    Sigmoid(NodeId),
    Gate {
        a: NodeId,
        threshold: Threshold,
        rule: GateGradient,
    },
    MulBroadcast {
        feature: NodeId,
        map: NodeId,
    },
    ChannelScale {
        input: NodeId,
        scale: NodeId,
    },
    UpsampleZeros {
        input: NodeId,
        m: usize,
    },
    GlobalAvgPool(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that takes a gradient but is not a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter from `store` as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("parameter `{name}` bound twice")));
        }
        let id = self.variable(store.require(name)?.clone());
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let v = tensor::conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Threshold gate over pre-sigmoid scores: `1` where `σ(a) ≥ t`, else `σ(a)`.
    pub fn gate(&mut self, a: NodeId, threshold: Threshold, rule: GateGradient) -> Result<NodeId> {
        let t = self.threshold_value(threshold);
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config(
                "threshold",
                format!("must lie in (0, 1), got {t}"),
            ));
        }
        let tv = T::lit(t);
        let v = self.value(a).map(|x| {
            let s = tensor::sigmoid_scalar(x);
            if s >= tv {
                T::one()
            } else {
                s
            }
        });
        let mut deps = vec![a];
        if let Threshold::Node(n) = threshold {
            deps.push(n);
        }
        let rg = self.rg(&deps);
        Ok(self.push(v, Op::Gate { a, threshold, rule }, rg))
    }

    fn threshold_value(&self, threshold: Threshold) -> f64 {
        match threshold {
            Threshold::Fixed(t) => t,
            Threshold::Node(n) => self.value(n).data()[0].as_f64(),
        }
    }

    pub fn mul_broadcast(&mut self, feature: NodeId, map: NodeId) -> Result<NodeId> {
        let v = tensor::mul_broadcast(self.value(feature), self.value(map))?;
        let rg = self.rg(&[feature, map]);
        Ok(self.push(v, Op::MulBroadcast { feature, map }, rg))
    }

    pub fn channel_scale(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let v = tensor::channel_scale(self.value(input), self.value(scale))?;
        let rg = self.rg(&[input, scale]);
        Ok(self.push(v, Op::ChannelScale { input, scale }, rg))
    }

    pub fn upsample_zeros(&mut self, input: NodeId, m: usize) -> Result<NodeId> {
        let v = tensor::upsample_zeros(self.value(input), m)?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::UpsampleZeros { input, m }, rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, argmax) = tensor::max_pool2(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn dense(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let v = tensor::dense(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let mut deps = vec![input, weights];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            v,
            Op::Dense {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Sum of all elements, as a `[1,1,1,1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from every path into a
    /// node are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in self.rule(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn rule(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            } => {
                let gr =
                    tensor::conv2d_backward(self.value(*input), self.value(*weights), spec, g)?;
                let mut v = vec![(*input, gr.input), (*weights, gr.weights)];
                if let (Some(b), Some(gb)) = (bias, gr.bias) {
                    v.push((*b, gb));
                }
                v
            }
            Op::Sigmoid(x) => vec![(*x, tensor::sigmoid_backward(&node.value, g)?)],
            Op::Gate { a, threshold, rule } => {
                let t = T::lit(self.threshold_value(*threshold));
                let av = self.value(*a);
                let sig = tensor::sigmoid(av);
                let ga = sig.zip_map(g, "gate_backward", |s, gv| {
                    let pass = s < t || *rule == GateGradient::StraightThrough;
                    if pass {
                        gv * s * (T::one() - s)
                    } else {
                        T::zero()
                    }
                })?;
                let mut v = vec![(*a, ga)];
                if let Threshold::Node(tn) = threshold {
                    let gt = match rule {
                        GateGradient::Exact => T::zero(),
                        GateGradient::StraightThrough => {
                            let width = T::lit(THRESHOLD_SURROGATE_WIDTH);
                            sig.data()
                                .iter()
                                .zip(g.data())
                                .map(|(&s, &gv)| {
                                    let k =
                                        (T::one() - (s - t).abs() / width).max(T::zero()) / width;
                                    -gv * (T::one() - s) * k
                                })
                                .sum()
                        }
                    };
                    v.push((*tn, Tensor::scalar(gt)));
                }
                v
            }
            Op::MulBroadcast { feature, map } => {
                let (gf, gm) =
                    tensor::mul_broadcast_backward(self.value(*feature), self.value(*map), g)?;
                vec![(*feature, gf), (*map, gm)]
            }
            Op::ChannelScale { input, scale } => {
                let (gi, gs) =
                    tensor::channel_scale_backward(self.value(*input), self.value(*scale), g)?;
                vec![(*input, gi), (*scale, gs)]
            }
            Op::UpsampleZeros { input, m } => {
                vec![(*input, tensor::upsample_zeros_backward(g, *m)?)]
            }
            Op::GlobalAvgPool(x) => vec![(
                *x,
                tensor::global_avg_pool_backward(self.value(*x).shape(), g)?,
            )],
            Op::MaxPool2 { input, argmax } => {
                vec![(
                    *input,
                    tensor::max_pool2_backward(self.value(*input).shape(), argmax, g),
                )]
            }
            Op::Relu(x) => vec![(*x, tensor::relu_backward(self.value(*x), g)?)],
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (gi, gw, gb) =
                    tensor::dense_backward(self.value(*input), self.value(*weights), g)?;
                let mut v = vec![(*input, gi), (*weights, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, g.mul(self.value(*b))?), (*b, g.mul(self.value(*a))?)],
            Op::Sum(x) => {
                let shape: Shape = self.value(*x).shape();
                vec![(*x, Tensor::full(shape, g.data()[0]))]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                vec![(
                    *logits,
                    tensor::softmax_cross_entropy_backward(probs, labels, g.data()[0]),
                )]
            }
        };
        Ok(out)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`, if that node tracks gradients.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.get(*id))
    }

    /// Gradient for every named parameter bound in the graph.
    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, id)| self.grads[id.0].take().map(|g| (name, g)))
            .collect()
    }
}
