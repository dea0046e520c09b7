//! Named parameter storage, initialization and per-forward binding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Whether an entry is optimized or only carried along (running statistics,
/// fixed input scales).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Buffer,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(ParamKind::Weight),
            "buffer" => Some(ParamKind::Buffer),
            _ => None,
        }
    }
}

/// Ordered map from dotted names to tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, (ParamKind, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), (kind, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown parameter `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(k, _)| *k)
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid("param_store", format!("unknown parameter `{name}`")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("param_store", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_weights(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, k, _)| *k == ParamKind::Weight && n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, (k, t))| (n.clone(), (*k, t.cast()))).collect(),
        }
    }

    /// Exponential moving update of batch-norm running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let name = format!("{}.{suffix}", u.layer);
                let old = self.get(&name)?.clone();
                if old.len() != batch.len() {
                    return Err(Error::shape("bn_update", old.shape(), &[batch.len()]));
                }
                let new = Tensor::from_fn(old.shape(), |i| (T::one() - momentum) * old.data()[i] + momentum * batch[i]);
                self.set(&name, new)?;
            }
        }
        Ok(())
    }
}

/// Registers parameters under a name prefix with seeded initial values.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Rng,
    prefix: Vec<String>,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: rng::seeded(seed), prefix: Vec::new() }
    }

    pub fn name(&self, local: &str) -> String {
        let mut s = String::new();
        for p in &self.prefix {
            s.push_str(p);
            s.push('.');
        }
        s.push_str(local);
        s
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<R>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(scope.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, local: &str, kind: ParamKind, value: Tensor<T>) -> Result<String> {
        let name = self.name(local);
        self.store.insert(&name, kind, value)?;
        Ok(name)
    }

    /// He-normal weights with fan-in `shape[1..]`.
    pub fn kaiming(&mut self, local: &str, shape: &[usize]) -> Result<String> {
        let fan_in: usize = shape[1..].iter().product();
        let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
        let dist = Normal::new(0.0, std).map_err(|_| Error::invalid("init", "bad standard deviation"))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.add(local, ParamKind::Weight, t)
    }
}

/// Batch statistics of one batch-norm layer from a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-forward binding of stored parameters to tape nodes.
///
/// Weights become leaves the first time they are used, unless a trainable
/// prefix filter excludes them, in which case they enter as constants.
pub struct Ctx<'t, 's, T: Real> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    train: bool,
    trainable: Option<Vec<String>>,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'t, 's, T: Real> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            trainable: None,
            bound: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Restricts gradient tracking to weights under the given prefixes.
    pub fn trainable(mut self, prefixes: &[&str]) -> Self {
        self.trainable = Some(prefixes.iter().map(|p| p.to_string()).collect());
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn tracked(&self, name: &str) -> bool {
        self.trainable
            .as_ref()
            .is_none_or(|ps| ps.iter().any(|p| name.starts_with(p.as_str())))
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let var = if self.store.kind(name) == Some(ParamKind::Weight) && self.tracked(name) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store.get(name)
    }

    pub(crate) fn push_update(&self, update: BnUpdate<T>) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate<T>> {
        core::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of every tracked weight used in this forward pass.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}
