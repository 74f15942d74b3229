//! Dense tensors, reverse-mode differentiation, and the Adam optimizer.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;
pub mod vecops;

pub use graph::{AttnLayout, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;

/// Graph bound to a parameter store: each parameter is loaded as a trainable
/// leaf at most once per pass.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Session whose parameters are constants; nothing is retained for backward.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Gradients by parameter after `graph.backward`; `None` for parameters
    /// the pass never touched.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).map(|g| g.to_vec())))
            .collect()
    }
}
