//! Run configuration, training loop, checkpoints, and diagnostics.

pub mod checkpoint;
mod config;
mod gradcheck;
mod train;

pub use config::{DataConfig, LrSchedule, RunConfig, TrainConfig};
pub use gradcheck::{gradcheck, gradcheck_batch, relative_error, GradcheckReport, GroupCheck};
pub use train::{train, train_epoch, EpochLog, TrainState, ValMetrics};

use serde::Serialize;

use crate::tensor::vecops;

/// Summary printed by `inspect`.
#[derive(Debug, Clone, Serialize)]
pub struct Inspection {
    pub epoch: usize,
    pub pe: String,
    pub parameters: usize,
    pub tensors: usize,
    pub groups: Vec<(String, usize)>,
    pub tau: f64,
    pub prototype_norms: Vec<f64>,
}

pub fn inspect(state: &TrainState) -> Inspection {
    let store = &state.model.store;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (_, name, t) in store.iter() {
        let g = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, c)) => *c += t.len(),
            None => groups.push((g, t.len())),
        }
    }
    let v = store.get(state.model.prototypes.v);
    Inspection {
        epoch: state.epoch,
        pe: state.config.pe.to_string(),
        parameters: store.count(),
        tensors: store.len(),
        groups,
        tau: state.model.tau(),
        prototype_norms: (0..v.rows()).map(|k| vecops::norm(v.row(k)) as f64).collect(),
    }
}
