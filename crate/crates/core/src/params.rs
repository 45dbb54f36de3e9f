//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, Var};
use crate::rng::Rng;

/// Ordered map of parameter name to `[rows, cols]` tensor.
///
/// Iteration order is the lexical order of names, which keeps gradient
/// reduction, checkpointing and optimizer state stable across runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a tensor of normal draws with standard deviation `std`.
    pub fn insert_normal(&mut self, name: impl Into<String>, shape: (usize, usize), std: f64, rng: &mut Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        self.insert(name, Array2::from_shape_simple_fn(shape, || normal.sample(rng)));
    }

    /// Inserts a tensor drawn uniformly from `[-limit, limit]`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: (usize, usize), limit: f64, rng: &mut Rng) {
        self.insert(
            name,
            Array2::from_shape_simple_fn(shape, || rng.random_range(-limit..=limit)),
        );
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn n_elements(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    /// `self += other`, matching by name. Names missing from `other` are
    /// left alone.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (k, v) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(k) {
                *v += o;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.tensors.values_mut() {
            v.mapv_inplace(|x| x * c);
        }
    }

    /// Euclidean norm over every element.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Copies every tensor into `g`. Names for which `trainable` returns
    /// false are bound as constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable(k) {
                        g.param(v.clone())
                    } else {
                        g.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics when `name` was never registered; parameter names are fixed by
    /// the model layout, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects the gradient of every bound tensor (zeros when disconnected).
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> ParamStore {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), grads.wrt(g, v)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn bind_and_collect_gradients() {
        let mut p = ParamStore::new();
        p.insert("a", Array2::from_elem((1, 1), 3.0));
        p.insert("b", Array2::from_elem((1, 1), 2.0));
        let mut g = Graph::new();
        let bound = p.bind(&mut g, |n| n == "a");
        let a = bound.var("a");
        let b = bound.var("b");
        let ab = g.mul(a, b);
        let loss = g.mul(ab, a);
        let grads = g.backward(loss);
        let gp = bound.gradients(&g, &grads);
        assert_eq!(gp.get("a").unwrap()[[0, 0]], 12.0);
        assert_eq!(gp.get("b").unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn counts_and_norms() {
        let mut r = stream(0, Stream::Init, 0);
        let mut p = ParamStore::new();
        p.insert_normal("w", (3, 4), 1.0, &mut r);
        p.insert_uniform("v", (1, 5), 0.1, &mut r);
        assert_eq!(p.n_elements(), 17);
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["v", "w"]);
        let mut z = p.zeros_like();
        assert_eq!(z.global_norm(), 0.0);
        z.add_assign(&p);
        z.scale(2.0);
        assert!((z.global_norm() - 2.0 * p.global_norm()).abs() < 1e-12);
    }
}
