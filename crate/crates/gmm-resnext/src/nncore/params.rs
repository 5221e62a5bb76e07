//! Named parameter tree with per-leaf gradient buffers.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Scalar;

#[derive(Debug, Clone)]
pub struct Leaf<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
    /// Whether weight decay applies (off for biases and BN parameters).
    pub decay: bool,
}

/// Flat map of named parameter leaves. Iteration order is sorted by name,
/// which fixes the serialization and update order.
#[derive(Debug, Clone, Default)]
pub struct ParamTree<T> {
    leaves: BTreeMap<String, Leaf<T>>,
}

impl<T: Scalar> ParamTree<T> {
    pub fn new() -> Self {
        ParamTree {
            leaves: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool, decay: bool) {
        assert!(
            !self.leaves.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.leaves.insert(
            name.to_string(),
            Leaf {
                value,
                grad,
                trainable,
                decay,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Leaf<T> {
        self.leaves
            .get(name)
            .unwrap_or_else(|| panic!("no parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Leaf<T> {
        self.leaves
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.leaves.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Leaf<T>)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Leaf<T>)> {
        self.leaves.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for leaf in self.leaves.values_mut() {
            leaf.grad.fill(T::zero());
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, leaf) in self.leaves.iter_mut() {
            if name.starts_with(prefix) {
                leaf.trainable = false;
            }
        }
    }

    /// Number of trainable scalar parameters.
    pub fn n_trainable(&self) -> usize {
        self.leaves
            .values()
            .filter(|l| l.trainable)
            .map(|l| l.value.len())
            .sum()
    }

    /// Copy every leaf of `other` into this tree under `prefix`.
    pub fn adopt(&mut self, prefix: &str, other: &ParamTree<T>) {
        for (name, leaf) in other.iter() {
            self.insert(
                &format!("{prefix}{name}"),
                leaf.value.clone(),
                leaf.trainable,
                leaf.decay,
            );
        }
    }

    /// Extract the subtree under `prefix`, stripping the prefix from names.
    pub fn subtree(&self, prefix: &str) -> ParamTree<T> {
        let mut out = ParamTree::new();
        for (name, leaf) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, leaf.value.clone(), leaf.trainable, leaf.decay);
            }
        }
        out
    }
}
