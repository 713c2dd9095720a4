//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Every operation on a graph-attached tensor appends a node to its
//! [`Graph`]. Backward rules are themselves written with tensor operations,
//! so when [`grad`] is asked to retain the graph the returned gradients are
//! graph-attached and can be differentiated again. The attack needs exactly
//! this: a distance between parameter gradients, differentiated with
//! respect to the input that produced them.
//!
//! ```
//! use fedleak::tensor::{grad, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::scalar(3.0));
//! let y = x.square().unwrap();
//! let dy = grad(&y, &[&x], true).unwrap().remove(0);
//! assert_eq!(dy.item(), 6.0);
//! let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
//! assert_eq!(d2y.item(), 2.0);
//! ```

mod backward;
pub(crate) mod kernels;
mod ops;


use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::grad;
pub use ops::softmax_cross_entropy;

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn name(&self) -> String {
        match self {
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Tanh => "tanh".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(s) => format!("leakyrelu({s})"),
            Activation::Identity => "identity".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Square,
    Sqrt,
    Exp,
    MatMul,
    Transpose,
    Reshape(Rc<[usize]>),
    BroadcastTo(Rc<[usize]>),
    SumTo(Rc<[usize]>),
    Conv2d { stride: usize, padding: usize },
    Conv2dTranspose { stride: usize, padding: usize, in_h: usize, in_w: usize },
    Conv2dKernelGrad { stride: usize, padding: usize, k_h: usize, k_w: usize },
    Activation(Activation),
    LogSoftmax,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Rc<[usize]>,
    value: Rc<Vec<f64>>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only record of operations. Node ids are topologically ordered:
/// inputs always precede outputs.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a copy of `t` as a differentiable leaf of this graph.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone())
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, op: Op, inputs: Vec<usize>, shape: Rc<[usize]>, value: Rc<Vec<f64>>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            shape: shape.clone(),
            value: value.clone(),
        });
        Tensor {
            shape,
            data: value,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    /// Recomputes every non-leaf node from its inputs and checks the result
    /// against the stored value bit for bit.
    pub fn replay_matches(&self) -> bool {
        let inner = self.inner.borrow();
        inner.nodes.iter().all(|node| {
            if matches!(node.op, Op::Leaf | Op::Constant) {
                return true;
            }
            let ins: Vec<ops::Operand<'_>> = node
                .inputs
                .iter()
                .map(|&i| ops::Operand {
                    shape: &inner.nodes[i].shape,
                    data: &inner.nodes[i].value,
                })
                .collect();
            match ops::evaluate(&node.op, &ins) {
                Ok((shape, value)) => {
                    *shape == *node.shape
                        && value.len() == node.value.len()
                        && value
                            .iter()
                            .zip(node.value.iter())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                }
                Err(_) => false,
            }
        })
    }

    fn node_tensor(&self, id: usize) -> Tensor {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: usize,
}

/// An n-dimensional row-major array, optionally attached to a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<[usize]>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Builds a detached tensor from external data, rejecting NaN/Inf.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
                expected,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self::raw(shape.into(), data))
    }

    pub(crate) fn raw(shape: Rc<[usize]>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(Rc::from([]), vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.into(), vec![v; shape.iter().product()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    ///
    /// # Panics
    /// If the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Copy of the values with no graph attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }
}
