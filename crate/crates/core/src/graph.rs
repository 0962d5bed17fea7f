//! Reverse-mode automatic differentiation over [`Tensor`] nodes.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! reverse of insertion order is a valid topological order for the
//! backward sweep. Each node's backward runs at most once.
//!
//! ```
//! use dcr_core::graph::Graph;
//! use dcr_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels;
use crate::maps;
use crate::shape::LandmarkShape;
use crate::sip::{self, SipConfig, SipRecord};
use crate::tensor::{Dims, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernels: Var, bias: Option<Var> },
    Deconv2d { input: Var, kernels: Var, bias: Option<Var> },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    FullyConnected { input: Var, weights: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    Scale { input: Var, factor: f64 },
    SpatialSoftmax { input: Var },
    SoftmaxLoss { logits: Var, grad: Tensor },
    ShapeIndexedPool { featmaps: Var, shapes: Var, record: SipRecord },
    SquaredError { input: Var, target: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    leaf_grad_scale: Option<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Test hook: scales every gradient delivered to a leaf, simulating a
    /// broken backward pass.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, factor: f64) {
        self.leaf_grad_scale = Some(factor);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.rg(&[input, kernels]) || bias.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(out, Op::Conv2d { input, kernels, bias }, rg))
    }

    pub fn deconv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::deconv2d_forward(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.rg(&[input, kernels]) || bias.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(out, Op::Deconv2d { input, kernels, bias }, rg))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu_forward(self.value(input));
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn fully_connected(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = kernels::fc_forward(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.rg(&[input, weights, bias]);
        Ok(self.push(out, Op::FullyConnected { input, weights, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape("mul", ta.dims(), tb.dims()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.dims(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let mut out = self.value(input).clone();
        out.scale(factor);
        let rg = self.rg(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// `Σ weights ⊙ input` with constant weights; used to reduce a tensor
    /// output to a scalar with a non-degenerate gradient.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let w = self.constant(weights);
        let prod = self.mul(input, w)?;
        Ok(self.sum(prod))
    }

    /// Per-plane softmax over `h x w`.
    pub fn spatial_softmax(&mut self, input: Var) -> Var {
        let out = maps::spatial_softmax_tensor(self.value(input));
        let rg = self.rg(&[input]);
        self.push(out, Op::SpatialSoftmax { input }, rg)
    }

    /// Summed cross-entropy between each logit plane and the matching
    /// target plane. `targets` has the logits' dims.
    pub fn softmax_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let a = self.value(logits);
        let d = a.dims();
        targets.expect_dims("softmax_loss", d)?;
        let mut grad = Tensor::zeros(d);
        let mut loss = 0.0;
        for n in 0..d.n {
            for c in 0..d.c {
                let (l, g) = maps::distribution_softmax_loss(a.plane(n, c), targets.plane(n, c))?;
                loss += l;
                grad.plane_mut(n, c).copy_from_slice(&g);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxLoss { logits, grad }, rg))
    }

    /// Shape-indexed pooling. `shapes` holds one flat shape per batch item
    /// (`n x 1 x 1 x 2p`) and receives zero gradient.
    pub fn shape_indexed_pool(&mut self, featmaps: Var, shapes: Var, cfg: &SipConfig) -> Result<Var> {
        let sd = self.value(shapes);
        let per_item: Vec<LandmarkShape> = (0..sd.dims().n)
            .map(|n| LandmarkShape::from_flat(sd.item(n).data()))
            .collect::<Result<_>>()?;
        let (out, record) = sip::shape_indexed_pool_batch(self.value(featmaps), &per_item, cfg)?;
        let rg = self.rg(&[featmaps]);
        Ok(self.push(out, Op::ShapeIndexedPool { featmaps, shapes, record }, rg))
    }

    /// `Σ (input - target)²` against a constant target.
    pub fn squared_error(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(input);
        target.expect_dims("squared_error", x.dims())?;
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                input,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Gradient of the last [`Graph::backward`] root w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out of the graph, leaving `None`.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ld = self.value(loss).dims();
        if ld.len() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar node of dims {ld}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(ld, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let contributions = self.node_backward(node, g);
            for (var, mut contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if let (Op::Leaf, Some(f)) = (&self.nodes[var.0].op, self.leaf_grad_scale) {
                    contrib.scale(f);
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernels, bias } => {
                let (gi, gk, gb) = kernels::conv2d_backward(val(*input), val(*kernels), g);
                let mut out = vec![(*input, gi), (*kernels, gk)];
                if let Some(b) = bias {
                    out.push((*b, gb.reshape(val(*b).dims()).expect("bias dims")));
                }
                out
            }
            Op::Deconv2d { input, kernels, bias } => {
                let (gi, gk, gb) = kernels::deconv2d_backward(val(*input), val(*kernels), g);
                let mut out = vec![(*input, gi), (*kernels, gk)];
                if let Some(b) = bias {
                    out.push((*b, gb.reshape(val(*b).dims()).expect("bias dims")));
                }
                out
            }
            Op::MaxPool2 { input, argmax } => {
                vec![(*input, kernels::maxpool2_backward(g, argmax, val(*input).dims()))]
            }
            Op::Relu { input } => vec![(*input, kernels::relu_backward(val(*input), g))],
            Op::FullyConnected { input, weights, bias } => {
                let (gx, gw, gb) = kernels::fc_backward(val(*input), val(*weights), g);
                vec![
                    (*input, gx),
                    (*weights, gw),
                    (*bias, gb.reshape(val(*bias).dims()).expect("bias dims")),
                ]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let prod = |x: &Tensor| {
                    let data = x.data().iter().zip(g.data()).map(|(p, q)| p * q).collect();
                    Tensor::from_vec(x.dims(), data).expect("mul dims")
                };
                vec![(*a, prod(val(*b))), (*b, prod(val(*a)))]
            }
            Op::Sum { input } => {
                vec![(*input, Tensor::filled(val(*input).dims(), g.data()[0]))]
            }
            Op::Scale { input, factor } => {
                let mut gi = g.clone();
                gi.scale(*factor);
                vec![(*input, gi)]
            }
            Op::SpatialSoftmax { input } => {
                vec![(*input, maps::spatial_softmax_backward(&node.value, g))]
            }
            Op::SoftmaxLoss { logits, grad } => {
                let mut gl = grad.clone();
                gl.scale(g.data()[0]);
                vec![(*logits, gl)]
            }
            Op::ShapeIndexedPool {
                featmaps,
                shapes,
                record,
            } => {
                let gf = sip::shape_indexed_pool_backward(g.data(), record).expect("sip record");
                vec![(*featmaps, gf), (*shapes, Tensor::zeros(val(*shapes).dims()))]
            }
            Op::SquaredError { input, target } => {
                let s = g.data()[0];
                let data = val(*input)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| 2.0 * s * (a - b))
                    .collect();
                vec![(*input, Tensor::from_vec(val(*input).dims(), data).expect("dims"))]
            }
        }
    }
}

/// Dims of a batch of flat shapes with `p` landmarks.
pub fn shape_batch_dims(n: usize, p: usize) -> Dims {
    Dims::vector(n, 2 * p)
}
