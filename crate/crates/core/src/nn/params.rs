use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered, named collection of every trainable array in a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Param>", into = "Vec<Param>")]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl From<Vec<Param>> for ParamStore {
    fn from(params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        Self { params, index }
    }
}

impl From<ParamStore> for Vec<Param> {
    fn from(s: ParamStore) -> Self {
        s.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, tensor });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.values().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape {
                op: "assign_flat",
                detail: format!("{} values for {} slots", flat.len(), self.num_values()),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Overwrites parameters that share a name with `other`.
    pub fn copy_matching(&mut self, other: &ParamStore) {
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                if other.get(id).shape() == p.tensor.shape() {
                    p.tensor = other.get(id).clone();
                }
            }
        }
    }
}

/// Uniform Glorot draw in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-s..=s)).collect();
    Tensor::new(shape, v).expect("shape from extents")
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    entries: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self {
            entries: vec![None; n],
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries.get(id.0)?.as_deref()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.entries[id.0] = Some(g);
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.entries[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Adds `other` in place; the caller fixes the summation order.
    pub fn add_assign(&mut self, other: &Grads) {
        for (i, g) in other.entries.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.entries.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn norm_over(&self, ids: impl IntoIterator<Item = ParamId>) -> f64 {
        ids.into_iter()
            .filter_map(|id| self.get(id))
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Restricts to the given parameters.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.entries.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    /// Flattened in store order, zeros where no gradient flowed.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_values());
        for id in store.ids() {
            match self.get(id) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, store.get(id).len())),
            }
        }
        out
    }

    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        self.iter()
            .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
            .map(|(id, _)| store.name(id))
    }
}

/// A tape bound to a parameter store: parameters enter the tape lazily the
/// first time a forward pass touches them.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    frozen: Vec<bool>,
}

impl<'s> Graph<'s> {
    /// A graph whose parameters receive gradients.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
            frozen: vec![false; store.len()],
        }
    }

    /// A graph for evaluation: parameters are constants.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    /// Treats the given parameters as constants.
    pub fn freeze(mut self, ids: impl IntoIterator<Item = ParamId>) -> Self {
        for id in ids {
            self.frozen[id.0] = true;
        }
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(
            self.store.get(id).clone(),
            self.trainable && !self.frozen[id.0],
        );
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs the reverse pass and collects parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        let mut grads = Grads::new(self.store.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.tape.grad(v)) {
                grads.set(ParamId(i), g.to_vec());
            }
        }
        Ok(grads)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
