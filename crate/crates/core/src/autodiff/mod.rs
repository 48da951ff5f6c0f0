//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every backward function emits its work as new tape operations, so the
//! result of [`Graph::grad`] is itself differentiable. Gradient matching
//! (derivatives of per-parameter gradients) and trajectory matching
//! (derivatives through unrolled training steps) both rely on this.
//!
//! The tape is single-owner and not thread safe; heavy kernels (convolution)
//! parallelize internally over fixed batch chunks so results do not depend
//! on scheduling.

use ndarray::ArrayD;
use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub mod conv;
pub mod ops;


/// Handle to a value on the tape. Cheap to copy; only meaningful together
/// with the [`Graph`] that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Given the cotangent of a node's output, produce cotangents for each
/// parent (None when a parent receives no gradient). Implementations emit
/// tape operations, never raw arithmetic, so second derivatives work.
type BackwardFn = dyn Fn(&Graph, Var) -> Vec<Option<Var>>;

struct Node {
    value: Rc<ArrayD<f32>>,
    parents: Vec<Var>,
    backward: Option<Rc<BackwardFn>>,
}

/// Computation tape. Nodes are appended in topological order; ids never move.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bytes: Cell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::with_capacity(256)),
            bytes: Cell::new(0),
        }
    }

    /// Total bytes held by node values; used as a memory guard by callers
    /// that unroll long computations.
    pub fn bytes_used(&self) -> usize {
        self.bytes.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f32>,
        parents: Vec<Var>,
        backward: Option<Rc<BackwardFn>>,
    ) -> Var {
        self.bytes
            .set(self.bytes.get() + value.len() * std::mem::size_of::<f32>());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf holding a constant; receives gradients but propagates none.
    pub fn constant(&self, value: ArrayD<f32>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Copy of `v`'s value with the history severed.
    pub fn detach(&self, v: Var) -> Var {
        let val = self.value(v).as_ref().clone();
        self.constant(val)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f32 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().expect("empty node value")
    }

    /// Reverse pass from scalar `output` to each of `wrt`.
    ///
    /// Returns one cotangent per requested var; `None` means no path from
    /// `output` (a structural zero). The returned vars live on this tape and
    /// may be differentiated again.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(
            self.value(output).len(),
            1,
            "grad target must be a scalar node"
        );
        let live = output.0 + 1;
        let mut cot: Vec<Option<Var>> = vec![None; live];
        cot[output.0] = Some(self.constant(ndarray::arr0(1.0f32).into_dyn()));

        for id in (0..live).rev() {
            let Some(ct) = cot[id] else { continue };
            let (parents, backward) = {
                let nodes = self.nodes.borrow();
                let node = &nodes[id];
                (node.parents.clone(), node.backward.clone())
            };
            let Some(bw) = backward else { continue };
            let parent_grads = bw(self, ct);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (parent, grad) in parents.iter().zip(parent_grads) {
                let Some(g) = grad else { continue };
                cot[parent.0] = Some(match cot[parent.0] {
                    Some(acc) => self.add(acc, g),
                    None => g,
                });
            }
        }

        wrt.iter()
            .map(|v| cot.get(v.0).copied().flatten())
            .collect()
    }

    /// Like [`Graph::grad`] but materializes structural zeros, so every
    /// requested var gets an array of its own shape.
    pub fn grad_arrays(&self, output: Var, wrt: &[Var]) -> Vec<ArrayD<f32>> {
        self.grad(output, wrt)
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(g) => self.value(g).as_ref().clone(),
                None => ArrayD::zeros(self.shape(*v)),
            })
            .collect()
    }
}
