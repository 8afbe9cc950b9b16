//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its forward value
//! and a vector-Jacobian closure. [`Tape::backward`] walks the nodes in
//! reverse recording order and accumulates cotangents into parameter leaves.
//! Nodes whose inputs are all constants store no closure, so a tape used
//! purely for inference carries no backward state.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

type VjpFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    vjp: Option<VjpFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Parameters of a [`ParamStore`] bound as tape leaves.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    trainable: Vec<ParamId>,
}

impl<'t> std::ops::Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.index()]
    }
}

impl<'t> Bound<'t> {
    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Gradients of a scalar loss with respect to bound trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    unreached: Vec<ParamId>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Trainable parameters the loss does not depend on. Their entries are zero.
    pub fn unreached(&self) -> &[ParamId] {
        &self.unreached
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::new(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self` (used for gradient accumulation across batch items).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.accumulate(g),
                (None, Some(g)) => *slot = Some(g.clone()),
                _ => {}
            }
        }
        self.unreached.retain(|id| other.unreached.contains(id));
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            vjp: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A free leaf that requires a gradient but is not tied to a parameter store.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            vjp: None,
            requires_grad: true,
            param: None,
        })
    }

    /// Binds every parameter in `store`; those accepted by `trainable` become
    /// gradient leaves and the rest are recorded as constants.
    pub fn bind(&self, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Bound<'_> {
        let mut vars = Vec::with_capacity(store.len());
        let mut ids = Vec::new();
        for (id, name, value) in store.iter() {
            let train = trainable(name);
            if train {
                ids.push(id);
            }
            vars.push(self.push(Node {
                value: Rc::new(value.clone()),
                parents: Vec::new(),
                vjp: None,
                requires_grad: train,
                param: train.then_some(id),
            }));
        }
        Bound {
            tape: self,
            vars,
            trainable: ids,
        }
    }

    /// Records the result of a custom operation.
    ///
    /// `vjp` maps the output cotangent to one cotangent per parent, in order,
    /// each shaped like the corresponding parent value.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        vjp: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "operand from a different tape");
                nodes[p.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            vjp: requires_grad.then(|| Box::new(vjp) as VjpFn),
            requires_grad,
            param: None,
        })
    }

    /// Cotangents of every gradient-requiring leaf reachable from `loss`, keyed by node id.
    fn reverse(&self, loss: Var<'_>) -> Result<Vec<(usize, Tensor)>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut cot: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        cot[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        let mut leaves = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = cot[id].take() else { continue };
            let node = &nodes[id];
            let Some(vjp) = node.vjp.as_ref() else {
                if node.requires_grad {
                    leaves.push((id, g));
                }
                continue;
            };
            let parent_grads = vjp(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "vjp shape for node {p}");
                match cot[p].as_mut() {
                    Some(acc) => acc.accumulate(&pg),
                    None => cot[p] = Some(pg),
                }
            }
        }
        Ok(leaves)
    }

    /// Reverse pass from a scalar `loss` into the parameters bound from a store
    /// of `num_params` entries.
    pub fn backward(&self, loss: Var<'_>, num_params: usize) -> Result<Gradients> {
        let leaves = self.reverse(loss)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; num_params];
        for (id, g) in leaves {
            if let Some(pid) = nodes[id].param {
                grads[pid.index()] = Some(g);
            }
        }
        let mut unreached = Vec::new();
        for node in nodes.iter() {
            if let Some(pid) = node.param {
                if grads[pid.index()].is_none() {
                    unreached.push(pid);
                    grads[pid.index()] = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(Gradients { grads, unreached })
    }

    /// Cotangents of free leaves created with [`Tape::leaf`]; zero when unreachable.
    pub fn leaf_gradients(&self, loss: Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let found = self.reverse(loss)?;
        Ok(leaves
            .iter()
            .map(|l| {
                found
                    .iter()
                    .find(|(id, _)| *id == l.id)
                    .map(|(_, g)| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(&l.shape()))
            })
            .collect())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradients of this scalar w.r.t. all parameters bound from a store of `num_params` entries.
    pub fn backward(&self, num_params: usize) -> Result<Gradients> {
        self.tape.backward(*self, num_params)
    }
}
