//! Named learnable tensors and the forward-pass session that binds them to
//! a [`Graph`].

use std::collections::BTreeMap;

use crate::autograd::{Fault, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// What a parameter is, which decides whether the L2 penalty covers it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization affine parameters (gamma/beta).
    Norm,
    /// Relative position bias tables.
    PositionBias,
    /// Learned task log-variances of the loss.
    LossWeight,
}

/// A learnable tensor with a dotted-path name that fixes its checkpoint
/// identity.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub grad: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
    }
}

/// Registry of parameters and non-learnable buffers (batch-norm running
/// statistics), both kept sorted by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, LayerParams<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = vec![T::zero(); tensor.numel()];
        self.params.insert(
            name.clone(),
            LayerParams {
                name,
                tensor,
                kind,
                grad,
            },
        );
        Ok(())
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&LayerParams<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut LayerParams<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<T>> {
        self.params.values_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// One forward pass: a fresh graph plus lazily created parameter leaves.
pub struct Session<'s, T> {
    pub graph: Graph<T>,
    pub store: &'s mut ParamStore<T>,
    pub train: bool,
    leaves: BTreeMap<String, Var>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            train,
            leaves: BTreeMap::new(),
        }
    }

    pub fn with_fault(store: &'s mut ParamStore<T>, train: bool, fault: Fault) -> Self {
        Self {
            graph: Graph::with_fault(fault),
            store,
            train,
            leaves: BTreeMap::new(),
        }
    }

    /// Graph leaf for a named parameter; repeated calls share one leaf.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let tensor = self.store.get(name)?.tensor.clone();
        let v = self.graph.leaf(tensor, true);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Runs backward from `loss` and adds the resulting gradients into the
    /// store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (name, &v) in &self.leaves {
            if let Some(g) = self.graph.take_grad(v) {
                let p = self.store.get_mut(name)?;
                p.grad.iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
        }
        Ok(())
    }

    /// Names of parameters touched by this forward pass.
    pub fn touched(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.register("a.weight", Tensor::zeros([2]), ParamKind::Weight).unwrap();
        assert!(s.register("a.weight", Tensor::zeros([2]), ParamKind::Weight).is_err());
        assert!(s.register_buffer("a.weight", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn names_sorted() {
        let mut s = ParamStore::<f32>::new();
        for n in ["z", "b.c", "a"] {
            s.register(n, Tensor::zeros([1]), ParamKind::Bias).unwrap();
        }
        assert_eq!(s.names(), vec!["a", "b.c", "z"]);
    }

    #[test]
    fn session_accumulates_into_store() {
        let mut s = ParamStore::<f64>::new();
        s.register("w", Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), ParamKind::Weight)
            .unwrap();
        for _ in 0..2 {
            let mut sess = Session::new(&mut s, true);
            let w = sess.param("w").unwrap();
            let w2 = sess.param("w").unwrap();
            assert_eq!(w, w2);
            let y = sess.graph.mul(w, w2).unwrap();
            let l = sess.graph.sum_all(y).unwrap();
            sess.backward(l).unwrap();
        }
        assert_eq!(s.get("w").unwrap().grad, vec![4.0, 8.0]);
    }
}
