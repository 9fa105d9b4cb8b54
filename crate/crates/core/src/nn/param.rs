use serde::{Deserialize, Serialize};

use crate::data::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which forward passes read a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamScope {
    Shared,
    Branch(Domain),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub scope: ParamScope,
    pub value: Vec<f64>,
}

/// Flat registry of every learnable tensor. Layers hold [`ParamId`]s into it,
/// so a tensor referenced from two places is stored once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], scope: ParamScope, value: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "shape/value mismatch for {name}");
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, shape: shape.to_vec(), scope, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over parameters matching `pred`.
    pub fn count_where(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.len()).sum()
    }
}

/// Gradient buffers mirroring a [`ParamStore`]. A buffer exists only for
/// parameters that received gradient since the last [`Grads::clear`].
#[derive(Debug, Clone, Default)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self { bufs: vec![None; store.len()] }
    }

    pub fn acc(&mut self, store: &ParamStore, id: ParamId) -> &mut [f64] {
        let n = store.get(id).len();
        self.bufs[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs[id.0].as_deref()
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.bufs[id.0].is_some()
    }

    pub fn clear(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|b| b.iter().all(|g| g.is_finite()))
    }
}
