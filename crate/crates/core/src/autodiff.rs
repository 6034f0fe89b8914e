//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Each [`Var`] is a node in an implicit DAG built during the forward pass.
//! [`backprop`] walks the graph in reverse creation order and accumulates
//! gradients into the [`Param`] leaves. The op set lives in [`crate::ops`];
//! anything outside it is out of contract.
//!
//! Graphs are confined to one thread (a single training stream); pure ops on
//! disjoint graphs are safe to run concurrently from different threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: maps the output gradient to one gradient per parent
/// (`None` for parents that need no gradient).
pub(crate) type BackFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>>>;

pub(crate) struct Node<E: Element> {
    id: u64,
    value: Tensor<E>,
    needs_grad: bool,
    parents: Vec<Var<E>>,
    backward: Option<BackFn<E>>,
    param: Option<Param<E>>,
}

/// A value in the autodiff graph.
#[derive(Clone)]
pub struct Var<E: Element>(Rc<Node<E>>);

impl<E: Element> Var<E> {
    /// Leaf that takes no gradient.
    pub fn constant(value: Tensor<E>) -> Self {
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            needs_grad: false,
            parents: Vec::new(),
            backward: None,
            param: None,
        }))
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor<E>, parents: Vec<Var<E>>, backward: BackFn<E>) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        Self(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            needs_grad,
            parents: if needs_grad { parents } else { Vec::new() },
            backward: if needs_grad { Some(backward) } else { None },
            param: None,
        }))
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Same value, cut off from the graph. No gradient flows through.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }
}

struct ParamInner<E: Element> {
    name: String,
    value: Tensor<E>,
    grad: Tensor<E>,
    momentum: Tensor<E>,
}

/// A trainable parameter: value, gradient accumulator and momentum buffer,
/// always of identical shape.
#[derive(Clone)]
pub struct Param<E: Element>(Rc<RefCell<ParamInner<E>>>);

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let shape = value.shape().to_vec();
        Self(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Tensor<E> {
        self.0.borrow().value.clone()
    }

    pub fn grad(&self) -> Tensor<E> {
        self.0.borrow().grad.clone()
    }

    pub fn set_value(&self, value: Tensor<E>) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.value.shape(), value.shape(), "param shape change");
        inner.value = value;
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad.fill(E::zero());
    }

    fn accumulate(&self, g: &Tensor<E>) {
        self.0.borrow_mut().grad.add_assign(g);
    }

    /// Graph leaf bound to this parameter; gradients land in `self.grad`.
    pub fn var(&self) -> Var<E> {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: self.value(),
            needs_grad: true,
            parents: Vec::new(),
            backward: None,
            param: Some(self.clone()),
        }))
    }

    /// Classic momentum update: `v <- momentum*v + grad; p <- p - lr*v`.
    pub fn sgd_momentum_step(&self, lr: E, momentum: E) {
        let mut inner = self.0.borrow_mut();
        let ParamInner {
            value,
            grad,
            momentum: buf,
            ..
        } = &mut *inner;
        let v = buf.data_mut();
        let p = value.data_mut();
        let g = grad.data();
        for i in 0..g.len() {
            v[i] = momentum * v[i] + g[i];
            p[i] = p[i] - lr * v[i];
        }
    }
}

/// Gradient reversal config: identity forward, `-coefficient * g` backward.
#[derive(Clone, Copy, Debug)]
pub struct GrlConfig {
    pub coefficient: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { coefficient: 1.0 }
    }
}

impl GrlConfig {
    pub fn new(coefficient: f64) -> Result<Self> {
        if coefficient < 0.0 || !coefficient.is_finite() {
            return Err(Error::Contract(format!(
                "GRL coefficient must be a finite nonnegative real, got {coefficient}"
            )));
        }
        Ok(Self { coefficient })
    }
}

/// Identity in the forward pass; negates (and scales) gradients backward.
pub fn gradient_reversal<E: Element>(x: &Var<E>, cfg: GrlConfig) -> Var<E> {
    let c = E::of(cfg.coefficient);
    Var::from_op(
        x.value().clone(),
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.map(|v| -(c * v)))]),
    )
}

/// Run reverse-mode accumulation from a scalar `loss` into every reachable
/// [`Param`]. Gradients *add* to whatever is already in the accumulators, so
/// several losses may be backpropagated before one optimizer step.
pub fn backprop<E: Element>(loss: &Var<E>) -> Result<()> {
    if !loss.value().is_scalar() {
        return Err(Error::Contract(format!(
            "backprop needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    loss.value().check_finite("loss")?;
    if !loss.0.needs_grad {
        return Ok(()); // nothing trainable upstream
    }

    // Reachable sub-graph, then reverse creation order. Creation order is a
    // topological order because ops only consume already-built vars.
    let mut nodes: Vec<Var<E>> = Vec::new();
    let mut seen: HashMap<u64, ()> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if seen.insert(v.0.id, ()).is_some() {
            continue;
        }
        for p in &v.0.parents {
            if p.0.needs_grad {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let mut grads: HashMap<u64, Tensor<E>> = HashMap::new();
    grads.insert(loss.0.id, Tensor::filled(loss.value().shape(), E::one()));

    for node in &nodes {
        let Some(out_grad) = grads.remove(&node.0.id) else {
            continue;
        };
        if let Some(param) = &node.0.param {
            param.accumulate(&out_grad);
            continue;
        }
        let Some(back) = &node.0.backward else {
            continue;
        };
        let parent_grads = back(&out_grad);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.0.needs_grad {
                continue;
            }
            if !pg.all_finite() {
                return Err(Error::Numeric("NaN/Inf in gradient".into()));
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
            match grads.get_mut(&parent.0.id) {
                Some(acc) => acc.add_assign(&pg),
                None => {
                    grads.insert(parent.0.id, pg);
                }
            }
        }
    }
    Ok(())
}

/// One classic-momentum SGD step over a parameter list, then zero the
/// gradient accumulators.
pub fn sgd_momentum_step<E: Element>(params: &[Param<E>], lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("lr must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Contract(format!(
            "momentum must be in [0,1), got {momentum}"
        )));
    }
    for p in params {
        p.sgd_momentum_step(E::of(lr), E::of(momentum));
        p.zero_grad();
    }
    Ok(())
}
