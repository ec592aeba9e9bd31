use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable tensor; trainable iff its gradient buffer is allocated.
    Weight,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named tensors of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn weight(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), ParamKind::Weight, tensor.requiring_grad())
    }

    pub fn buffer(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        tensor.set_requires_grad(false);
        self.push(name.into(), ParamKind::Buffer, tensor)
    }

    fn push(&mut self, name: String, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Freezes or unfreezes every weight whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.kind == ParamKind::Weight && p.name.starts_with(prefix) {
                p.tensor.set_requires_grad(trainable);
            }
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].tensor.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Number of scalars in weights (optionally only trainable ones) whose
    /// name starts with `prefix`.
    pub fn count(&self, prefix: &str, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(prefix))
            .filter(|p| !trainable_only || p.tensor.requires_grad())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Accumulates gradients and applies running-statistic updates collected
    /// during a forward pass.
    pub fn apply(&mut self, pending: Pending<T>, grads: Option<&Gradients<T>>) -> Result<()> {
        if let Some(grads) = grads {
            for (id, var) in &pending.bound {
                grads.accumulate_into(*var, &mut self.params[id.0].tensor)?;
            }
        }
        for (id, values) in pending.buffers {
            let t = &mut self.params[id.0].tensor;
            if t.numel() != values.len() {
                return Err(Error::dim("buffer update", self.params[id.0].name.clone()));
            }
            t.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    /// Copies values (not gradients) from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Invalid("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// State produced by a forward pass that must be written back to the store.
#[derive(Debug, Default)]
pub struct Pending<T> {
    pub bound: BTreeMap<ParamId, Var>,
    pub buffers: Vec<(ParamId, Vec<T>)>,
}

/// One forward evaluation: a fresh tape plus lazy binding of store tensors.
pub struct Forward<'s, T: Real> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    training: bool,
    pending: RefCell<Pending<T>>,
}

impl<'s, T: Real> Forward<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            training,
            pending: RefCell::new(Pending::default()),
        }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Leaf for a stored tensor, recorded once per forward pass.
    pub fn param(&self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.pending.borrow().bound.get(&id) {
            return Ok(*v);
        }
        let v = self.tape.leaf(self.store.get(id))?;
        self.pending.borrow_mut().bound.insert(id, v);
        Ok(v)
    }

    /// Binds every stored weight up front, in store order.
    pub fn bind_all(&self) -> Result<Vec<Var>> {
        self.store.iter().map(|(id, _)| self.param(id)).collect()
    }

    pub(crate) fn stage_buffer(&self, id: ParamId, values: Vec<T>) {
        self.pending.borrow_mut().buffers.push((id, values));
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)
    }

    pub fn finish(self) -> Pending<T> {
        self.pending.into_inner()
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}
