use std::sync::Arc;

use rand::Rng;

use super::{ones, weight, zeros};
use crate::error::Result;
use crate::tensor::{AttnLayout, ParamId, ParamStore, Real, Session, Var};

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

fn linear<T: Real>(sess: &mut Session<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (sess.p(w), sess.p(b));
    let y = sess.graph.matmul(x, w)?;
    sess.graph.add_row(y, b)
}

pub(crate) fn layer_norm<T: Real>(
    sess: &mut Session<T>,
    x: Var,
    (g, b): (ParamId, ParamId),
) -> Result<Var> {
    let (g, b) = (sess.p(g), sess.p(b));
    sess.graph.layer_norm(x, g, b)
}

impl Block {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let ln = |store: &mut ParamStore<T>, n: &str| {
            (
                ones(store, format!("{prefix}.{n}.gain"), &[dim]),
                zeros(store, format!("{prefix}.{n}.bias"), &[dim]),
            )
        };
        let ln1 = ln(store, "ln1");
        let qkv = (
            weight(store, rng, format!("{prefix}.qkv.w"), &[dim, 3 * dim]),
            zeros(store, format!("{prefix}.qkv.b"), &[3 * dim]),
        );
        let proj = (
            weight(store, rng, format!("{prefix}.proj.w"), &[dim, dim]),
            zeros(store, format!("{prefix}.proj.b"), &[dim]),
        );
        let ln2 = ln(store, "ln2");
        let fc1 = (
            weight(store, rng, format!("{prefix}.fc1.w"), &[dim, hidden]),
            zeros(store, format!("{prefix}.fc1.b"), &[hidden]),
        );
        let fc2 = (
            weight(store, rng, format!("{prefix}.fc2.w"), &[hidden, dim]),
            zeros(store, format!("{prefix}.fc2.b"), &[dim]),
        );
        Self {
            ln1,
            qkv,
            proj,
            ln2,
            fc1,
            fc2,
        }
    }

    pub fn forward<T: Real>(
        &self,
        sess: &mut Session<T>,
        x: Var,
        layout: Arc<AttnLayout>,
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let h = layer_norm(sess, x, self.ln1)?;
        let qkv = linear(sess, h, self.qkv)?;
        let bias = bias.map(|b| sess.p(b));
        let a = sess.graph.attention(qkv, bias, layout)?;
        let a = linear(sess, a, self.proj)?;
        let x = sess.graph.add(x, a)?;
        let h = layer_norm(sess, x, self.ln2)?;
        let h = linear(sess, h, self.fc1)?;
        let h = sess.graph.gelu(h);
        let h = linear(sess, h, self.fc2)?;
        sess.graph.add(x, h)
    }
}
