//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values live in
//! the graph's nodes and are addressed by the copyable handle [`Var`].
//! Calling [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every node that requires one.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;

use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::nn::{Param, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{Conv2dSpec, Padding};
pub use elementwise::sigmoid;
pub use pool::resize_bilinear_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    SumTo(Var),
    Broadcast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Matmul(Var, Var),
    Softmax(Var),
    RowNorm {
        input: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    ChannelNorm {
        input: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    FixedDepthwise3x3 {
        input: Var,
        kernel: [T; 9],
        padding: Padding,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var, usize),
    Resize(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    training: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A constant input that never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free variable that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter; repeated calls with the same parameter return the same node.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.params.insert(p.id(), v);
        v
    }

    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            ));
        }
        self.backward_with(output, Tensor::full(out.shape(), T::one()))
    }

    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, elementwise::reduce_to(g, self.shape(*a)));
                send(*b, elementwise::reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, elementwise::reduce_to(g, self.shape(*a)));
                send(*b, elementwise::reduce_to(&g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = elementwise::broadcast_zip(g, bv, |x, y| x * y);
                    send(*a, elementwise::reduce_to(&ga, av.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = elementwise::broadcast_zip(g, av, |x, y| x * y);
                    send(*b, elementwise::reduce_to(&gb, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = elementwise::broadcast_zip(g, bv, |x, y| x / y);
                    send(*a, elementwise::reduce_to(&ga, av.shape()));
                }
                if self.nodes[b.0].requires_grad {
                    // d(a/b)/db = -out / b
                    let t = elementwise::broadcast_zip(g, &node.value, |x, y| -x * y);
                    let gb = elementwise::broadcast_zip(&t, bv, |x, y| x / y);
                    send(*b, elementwise::reduce_to(&gb, bv.shape()));
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|v| v * *s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::Sigmoid(a) => {
                send(*a, g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y)));
            }
            Op::Ln(a) => send(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                send(
                    *a,
                    g.zip_map(x, |gv, xv| {
                        if xv < *lo || xv > *hi {
                            T::zero()
                        } else {
                            gv
                        }
                    }),
                );
            }
            Op::SumTo(a) => send(*a, elementwise::broadcast_to(g, self.shape(*a))),
            Op::Broadcast(a) => send(*a, elementwise::reduce_to(g, self.shape(*a))),
            Op::Reshape(a) => send(*a, g.reshape(self.shape(*a))?),
            Op::Permute(a, perm) => send(*a, linalg::permute_backward(g, perm)),
            Op::Concat(inputs, axis) => {
                let parts = elementwise::split(g, *axis, inputs.iter().map(|v| self.shape(*v)[*axis]));
                for (v, part) in inputs.iter().zip(parts) {
                    send(*v, part);
                }
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = linalg::matmul_backward(self.value(*a), self.value(*b), g);
                if self.nodes[a.0].requires_grad {
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, gb);
                }
            }
            Op::Softmax(a) => send(*a, linalg::softmax_backward(&node.value, g)),
            Op::RowNorm {
                input,
                xhat,
                inv_std,
            } => send(*input, norm::row_norm_backward(xhat, inv_std, g)),
            Op::ChannelNorm {
                input,
                xhat,
                inv_std,
            } => send(*input, norm::channel_norm_backward(xhat, inv_std, g)),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let need_x = self.nodes[input.0].requires_grad;
                let (gx, gw) = conv::conv2d_backward(x, w, g, spec, need_x);
                if let Some(gx) = gx {
                    send(*input, gx);
                }
                send(*weight, gw);
                if let Some(b) = bias {
                    send(*b, conv::bias_backward(g));
                }
            }
            Op::FixedDepthwise3x3 {
                input,
                kernel,
                padding,
            } => send(*input, conv::fixed3x3_backward(g, kernel, *padding)),
            Op::MaxPool { input, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*input));
                let d = gx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                send(*input, gx);
            }
            Op::AvgPool(a, k) => send(*a, pool::avg_pool_backward(g, self.shape(*a), *k)),
            Op::Resize(a) => send(*a, pool::resize_backward(g, self.shape(*a))),
        }
        Ok(())
    }
}
