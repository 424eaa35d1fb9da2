//! Named parameter storage and its binding onto a [`Graph`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Zeroes every parameter whose name starts with one of `prefixes`.
    pub fn zero_matching(&mut self, prefixes: &[&str]) -> usize {
        let mut count = 0;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                value.data_mut().fill(0.0);
                count += 1;
            }
        }
        count
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        Bindings(self.values.iter().map(|v| graph.leaf(v.clone())).collect())
    }

    /// `param -= lr * grad` for every parameter that received a gradient.
    pub fn descend(&mut self, bindings: &Bindings, grads: &Gradients, lr: f64) {
        for (value, var) in self.values.iter_mut().zip(&bindings.0) {
            if let Some(g) = grads.get(*var) {
                *value = value.axpy(-lr, g);
            }
        }
    }
}

/// Graph variables for each parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matching_uses_prefixes() {
        let mut store = ParamStore::new();
        let a = store.add("isp.attn.wo", Tensor::full(&[2], 1.0));
        let b = store.add("isp.attn.wq", Tensor::full(&[2], 1.0));
        assert_eq!(store.zero_matching(&["isp.attn.wo"]), 1);
        assert_eq!(store.get(a).max_abs(), 0.0);
        assert_eq!(store.get(b).max_abs(), 1.0);
        assert_eq!(store.find("isp.attn.wq"), Some(b));
    }
}
