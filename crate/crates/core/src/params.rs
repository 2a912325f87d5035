//! Named parameter storage and binding of parameters onto a tape.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, resampled outside two sigma.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match self.init {
            Init::TruncNormal(std) => Tensor::from_fn(&self.shape, |_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            }),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Const(v) => Tensor::full(&self.shape, v),
        }
    }
}

/// Prefixed name, `"{prefix}.{name}"`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameters by name, in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in specs {
            if store.tensors.contains_key(&spec.name) {
                return Err(Error::Invalid(format!("duplicate parameter {}", spec.name)));
            }
            store.tensors.insert(spec.name.clone(), spec.sample(rng));
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Parameters of a [`ParamStore`] exposed as tape variables, created lazily
/// on first use so unused parameters never enter the tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    store: Option<&'t ParamStore>,
    trainable: bool,
    vars: RefCell<IndexMap<String, Var<'t>>>,
}

impl<'t> Bound<'t> {
    /// Parameters become leaves and receive gradients.
    pub fn trainable(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Bound {
            tape,
            store: Some(store),
            trainable: true,
            vars: RefCell::new(IndexMap::new()),
        }
    }

    /// Parameters are constants.
    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Bound {
            tape,
            store: Some(store),
            trainable: false,
            vars: RefCell::new(IndexMap::new()),
        }
    }

    /// Parameters resolved only from the given variables.
    pub fn from_vars(tape: &'t Tape, vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Bound {
            tape,
            store: None,
            trainable: false,
            vars: RefCell::new(vars.into_iter().collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let value = self
            .store
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))?
            .get(name)?
            .clone();
        let var = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Makes `name` resolve to `var` instead of the stored tensor.
    pub fn preset(&self, name: &str, var: Var<'t>) {
        self.vars.borrow_mut().insert(name.to_string(), var);
    }

    /// `get(join(prefix, name))`.
    pub fn param(&self, prefix: &str, name: &str) -> Result<Var<'t>> {
        self.get(&join(prefix, name))
    }

    /// Gradient for every parameter in the store, zeros for those unused.
    pub fn gradients(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        let vars = self.vars.borrow();
        let Some(store) = self.store else {
            return vars
                .iter()
                .map(|(n, v)| (n.clone(), grads.wrt(v)))
                .collect();
        };
        store
            .iter()
            .map(|(name, t)| {
                let g = vars
                    .get(name)
                    .map(|v| grads.wrt(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}
