//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::BTreeMap;
use std::ops::Index;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Parameters keyed by canonical dotted names (`pe.gru.w_r`, ...), kept
/// sorted so every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every parameter into `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::usage(format!("{what}: missing tensor {name}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::dim(format!(
                        "{what}: tensor {name} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::usage(format!("{what}: unexpected tensor {extra}")));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Gradients of the trainable parameters after [`Graph::backward`].
    pub fn grads(&self, g: &Graph) -> GradStore {
        let mut out = GradStore::default();
        for (name, &v) in &self.vars {
            if let Some(gr) = g.grad(v) {
                out.grads.insert(name.clone(), gr.clone());
            }
        }
        out
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Summed gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn accumulate(&mut self, other: GradStore) {
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
