//! Named learnable parameters and the optimizer step.

use std::collections::HashMap;

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Registry of named parameters living as `requires_grad` leaves in one
/// graph. Names are unique; registration order is the canonical order for
/// checkpoints and updates.
pub struct ParamRegistry<F: Real> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, usize>,
    /// Number of optimizer steps taken.
    pub iteration: u64,
}

struct ParamEntry<F: Real> {
    name: String,
    node: NodeId,
    velocity: Vec<F>,
}

impl<F: Real> Default for ParamRegistry<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamRegistry<F> {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
            by_name: HashMap::new(),
            iteration: 0,
        }
    }

    /// Create a `requires_grad` leaf in `graph` and register it.
    pub fn register(
        &mut self,
        graph: &mut Graph<F>,
        name: impl Into<String>,
        value: Tensor<F>,
    ) -> Result<NodeId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter `{name}`")));
        }
        let numel = value.numel();
        let node = graph.leaf(value, true);
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            node,
            velocity: vec![F::zero(); numel],
        });
        Ok(node)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).map(|&i| self.entries[i].node)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.node))
    }

    /// Momentum SGD over every registered parameter:
    /// `v <- momentum * v + grad; p <- p - lr * v`, then all parameter
    /// gradients are zeroed. Errors if any parameter has no gradient.
    pub fn sgd_step(&mut self, graph: &mut Graph<F>, lr: F, momentum: F) -> Result<()> {
        for entry in &self.entries {
            if graph.grad(entry.node).is_none() {
                return Err(Error::UninitializedGradient(entry.name.clone()));
            }
        }
        for entry in &mut self.entries {
            let grad = graph.grad(entry.node).unwrap().to_vec();
            let mut value = graph.value(entry.node).data().to_vec();
            for ((v, g), p) in entry.velocity.iter_mut().zip(&grad).zip(&mut value) {
                *v = momentum * *v + *g;
                *p = *p - lr * *v;
            }
            graph.set_leaf_value(entry.node, &value)?;
            graph.zero_grad(entry.node);
        }
        self.iteration += 1;
        Ok(())
    }

    /// Snapshot of every parameter value, in registration order.
    pub fn export(&self, graph: &Graph<F>) -> Vec<(String, Tensor<F>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), graph.value(e.node).clone()))
            .collect()
    }

    /// Overwrite parameter values by name. Every registered parameter
    /// must be present with a matching element count.
    pub fn import(
        &mut self,
        graph: &mut Graph<F>,
        values: &HashMap<String, Tensor<F>>,
    ) -> Result<()> {
        for entry in &self.entries {
            let tensor = values.get(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter `{}`", entry.name))
            })?;
            graph.set_leaf_value(entry.node, tensor.data())?;
        }
        Ok(())
    }
}
