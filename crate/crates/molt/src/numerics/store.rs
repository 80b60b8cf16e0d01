//! Named parameter storage with trainable flags, plus the session API that
//! binds parameters to graph leaves and extracts gradients.

use indexmap::IndexMap;

use crate::error::{MoltError, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered map from canonical dot-separated parameter path to tensor.
/// Iteration order is insertion order and therefore deterministic for a
/// deterministic construction sequence.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

pub type GradMap<T> = IndexMap<String, Tensor<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(MoltError::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| MoltError::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| MoltError::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.entries.insert(name.clone(), Param { tensor: p.tensor.cast(), trainable: p.trainable });
        }
        out
    }
}

/// One forward/backward episode: owns a graph, binds store parameters to
/// leaves on demand, and harvests trainable gradients at the end.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    bound: IndexMap<String, NodeId>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Session { graph: Graph::new(), params, bound: IndexMap::new() }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// Bind (or reuse) a parameter leaf.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self.params.get(name)?;
        let id = self.graph.leaf(p.tensor.clone(), p.trainable, name)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Non-trainable data leaf.
    pub fn input(&mut self, tensor: Tensor<T>, label: impl Into<String>) -> Result<NodeId> {
        self.graph.constant(tensor, label)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.graph.value(id)
    }

    /// Loss value without a backward sweep.
    pub fn loss_value(&self, loss: NodeId) -> Result<T> {
        let v = self.graph.value(loss);
        if v.numel() != 1 {
            return Err(MoltError::shape("loss", format!("expected scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    }

    /// Backward sweep. Returns the scalar loss plus one gradient tensor per
    /// trainable parameter in the store — parameters the graph never touched
    /// get zero gradients, non-trainable names are absent.
    pub fn backward(self, loss: NodeId) -> Result<(T, GradMap<T>)> {
        let loss_value = self.loss_value(loss)?;
        let mut node_grads = self.graph.backward(loss)?;
        let mut grads = GradMap::new();
        for (name, p) in self.params.iter() {
            if !p.trainable {
                continue;
            }
            let g = match self.bound.get(name) {
                Some(&id) => node_grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape())),
                None => Tensor::zeros(p.tensor.shape()),
            };
            grads.insert(name.clone(), g);
        }
        Ok((loss_value, grads))
    }
}

/// Run a graph-building closure and return `(loss, gradients)` for every
/// trainable parameter.
pub fn forward_backward<T: Scalar, F>(params: &ParamStore<T>, build: F) -> Result<(T, GradMap<T>)>
where
    F: FnOnce(&mut Session<T>) -> Result<NodeId>,
{
    let mut sess = Session::new(params);
    let loss = build(&mut sess)?;
    sess.backward(loss)
}

/// Loss-only evaluation of the same closure shape.
pub fn forward_loss<T: Scalar, F>(params: &ParamStore<T>, build: F) -> Result<T>
where
    F: FnOnce(&mut Session<T>) -> Result<NodeId>,
{
    let mut sess = Session::new(params);
    let loss = build(&mut sess)?;
    sess.loss_value(loss)
}
