//! Vision and text transformers projecting into one shared embedding space.

mod config;
mod dual;
mod patch;
mod tokenizer;
mod transformer;

pub use config::EncoderConfig;
pub use dual::{standardize, DualEncoder, ImageBatch};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use tokenizer::{TokenSequence, Tokenizer, PAD_ID, SUMMARY_ID, UNK_ID};
pub use transformer::Block;

use rand::Rng;

use crate::rng::truncated_normal;
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// Registers a weight initialized from a ±2σ truncated normal with σ = 0.02.
pub(crate) fn weight<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: String,
    shape: &[usize],
) -> ParamId {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| truncated_normal(rng, 0.02)).collect();
    store.add(name, Tensor::from_f64(shape, &v).expect("shape"))
}

pub(crate) fn zeros<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::zeros(shape))
}

pub(crate) fn ones<T: Real>(store: &mut ParamStore<T>, name: String, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::full(shape, T::one()))
}
