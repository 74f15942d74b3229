use std::sync::Arc;

use rand::Rng;

use super::transformer::layer_norm;
use super::{ones, patchify, weight, zeros, Block, EncoderConfig, TokenSequence, PAD_ID};
use crate::dape::{image_descriptors, DapeConfig, PeStrategy, PositionalDescriptor, PositionalEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{AttnLayout, ParamId, ParamStore, Real, Session, Tensor, Var};

/// Floor on the per-image standard deviation used for standardization.
pub const MIN_PIXEL_STD: f64 = 1e-3;

/// Centering for the global brightness and log-contrast features.
const BRIGHTNESS_CENTER: f64 = 0.5;
const BRIGHTNESS_SCALE: f64 = 0.25;
const CONTRAST_CENTER: f64 = 0.05;

/// Patch pixels and positional descriptors for a batch of images, computed
/// outside the differentiation graph.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub count: usize,
    /// `[count·G² × P²]` row-major, standardized per image.
    pub patches: Vec<f32>,
    /// `[count × 2]`: centered brightness and log-contrast of each image.
    pub stats: Vec<f32>,
    pub descriptors: Option<Vec<PositionalDescriptor>>,
}

/// Per-image standardized copy of `pixels` plus its `[brightness, contrast]`
/// features.
pub fn standardize(pixels: &[f32]) -> (Vec<f32>, [f32; 2]) {
    let n = pixels.len().max(1) as f64;
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(MIN_PIXEL_STD);
    let out = pixels.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect();
    let feats = [
        ((mean - BRIGHTNESS_CENTER) / BRIGHTNESS_SCALE) as f32,
        (sd / CONTRAST_CENTER).ln() as f32,
    ];
    (out, feats)
}

#[derive(Debug, Clone)]
struct VisionParams {
    patch_w: ParamId,
    patch_b: ParamId,
    stats_w: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    proj: ParamId,
}

#[derive(Debug, Clone)]
struct TextParams {
    token: ParamId,
    position: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    proj: ParamId,
}

/// Vision encoder f(·) and text encoder g(·) sharing an embedding width.
/// Holds parameter handles only; values live in the caller's store.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub pe: PositionalEncoder,
    vision: VisionParams,
    text: TextParams,
}

impl DualEncoder {
    pub fn new<T: Real, R: Rng>(
        config: EncoderConfig,
        strategy: PeStrategy,
        dape: DapeConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let p2 = config.patch_size * config.patch_size;
        let vision = VisionParams {
            patch_w: weight(store, rng, "vision.patch.w".into(), &[p2, d]),
            patch_b: zeros(store, "vision.patch.b".into(), &[d]),
            stats_w: weight(store, rng, "vision.stats.w".into(), &[2, d]),
            blocks: (0..config.layers)
                .map(|l| Block::new(store, rng, &format!("vision.block{l}"), d, hidden))
                .collect(),
            ln_f: (
                ones(store, "vision.ln_f.gain".into(), &[d]),
                zeros(store, "vision.ln_f.bias".into(), &[d]),
            ),
            proj: weight(store, rng, "vision.proj".into(), &[d, d]),
        };
        let text = TextParams {
            token: weight(store, rng, "text.token".into(), &[config.vocab_size, d]),
            position: weight(store, rng, "text.position".into(), &[config.max_text_len, d]),
            blocks: (0..config.layers)
                .map(|l| Block::new(store, rng, &format!("text.block{l}"), d, hidden))
                .collect(),
            ln_f: (
                ones(store, "text.ln_f.gain".into(), &[d]),
                zeros(store, "text.ln_f.bias".into(), &[d]),
            ),
            proj: weight(store, rng, "text.proj".into(), &[d, d]),
        };
        let pe = PositionalEncoder::new(
            strategy,
            config.grid(),
            d,
            config.layers,
            config.heads,
            dape,
            store,
            rng,
        );
        Ok(Self {
            config,
            pe,
            vision,
            text,
        })
    }

    /// Patchifies and, for the orientation strategy, measures every patch.
    pub fn prepare_images(&self, images: &[&Image]) -> Result<ImageBatch> {
        let c = &self.config;
        let mut patches = Vec::with_capacity(images.len() * c.image_size * c.image_size);
        let mut stats = Vec::with_capacity(images.len() * 2);
        let mut descriptors = self.pe.needs_orientation().then(Vec::new);
        for img in images {
            if img.width != c.image_size || img.height != c.image_size {
                return Err(Error::Invalid(format!(
                    "image is {}×{}, encoder expects {}",
                    img.width, img.height, c.image_size
                )));
            }
            let (px, feats) = standardize(&patchify(img, c.patch_size)?.data);
            patches.extend(px);
            stats.extend(feats);
            if let Some(d) = descriptors.as_mut() {
                d.extend(image_descriptors(img, c.patch_size, self.pe.config.energy_floor));
            }
        }
        Ok(ImageBatch {
            count: images.len(),
            patches,
            stats,
            descriptors,
        })
    }

    /// Final-layer patch tokens `[n·G² × d]` (after the closing layer norm).
    pub fn image_tokens<T: Real>(&self, sess: &mut Session<T>, batch: &ImageBatch) -> Result<Var> {
        let c = &self.config;
        let g2 = c.patches();
        let p2 = c.patch_size * c.patch_size;
        let n = batch.count;
        if n == 0 {
            return Err(Error::Invalid("empty image batch".into()));
        }
        let px = batch.patches.iter().map(|&v| T::of(v as f64)).collect();
        let x = sess.graph.constant(Tensor::new(vec![n * g2, p2], px)?);
        let (w, b) = (sess.p(self.vision.patch_w), sess.p(self.vision.patch_b));
        let x = sess.graph.matmul(x, w)?;
        let x = sess.graph.add_row(x, b)?;
        // global brightness/contrast, broadcast to every patch of its image
        let st = batch.stats.iter().map(|&v| T::of(v as f64)).collect();
        let st = sess.graph.constant(Tensor::new(vec![n, 2], st)?);
        let ws = sess.p(self.vision.stats_w);
        let g = sess.graph.matmul(st, ws)?;
        let g = sess.graph.gather_rows(g, (0..n * g2).map(|r| r / g2).collect())?;
        let mut x = sess.graph.add(x, g)?;
        if let Some(pos) = self.pe.input_vectors(sess, n, batch.descriptors.as_deref())? {
            x = sess.graph.add(x, pos)?;
        }
        for (l, block) in self.vision.blocks.iter().enumerate() {
            let bias = self.pe.attention_bias(l);
            let layout = Arc::new(AttnLayout {
                seqs: n,
                seq_len: g2,
                heads: c.heads,
                lengths: None,
                bias_index: bias.as_ref().map(|(_, idx)| idx.as_ref().clone()),
            });
            x = block.forward(sess, x, layout, bias.map(|(p, _)| p))?;
        }
        layer_norm(sess, x, self.vision.ln_f)
    }

    /// Normalize → project → normalize, row-wise.
    fn head<T: Real>(&self, sess: &mut Session<T>, x: Var, proj: ParamId) -> Result<Var> {
        let x = sess.graph.l2_normalize(x);
        let w = sess.p(proj);
        let z = sess.graph.matmul(x, w)?;
        Ok(sess.graph.l2_normalize(z))
    }

    /// Image embeddings `[n × d]`, unit rows, from mean-pooled patch tokens.
    /// Also returns the patch tokens.
    pub fn encode_images<T: Real>(
        &self,
        sess: &mut Session<T>,
        batch: &ImageBatch,
    ) -> Result<(Var, Var)> {
        let tokens = self.image_tokens(sess, batch)?;
        let pooled = sess.graph.mean_row_groups(tokens, self.config.patches())?;
        let z = self.head(sess, pooled, self.vision.proj)?;
        Ok((z, tokens))
    }

    /// Per-patch embeddings in the shared space, `[n·G² × d]`, unit rows.
    pub fn project_patches<T: Real>(&self, sess: &mut Session<T>, tokens: Var) -> Result<Var> {
        self.head(sess, tokens, self.vision.proj)
    }

    /// Text embeddings `[n × d]`, unit rows, read from the summary token.
    pub fn encode_texts<T: Real>(
        &self,
        sess: &mut Session<T>,
        seqs: &[TokenSequence],
    ) -> Result<Var> {
        let c = &self.config;
        if seqs.is_empty() {
            return Err(Error::Invalid("empty text batch".into()));
        }
        if let Some(s) = seqs.iter().find(|s| s.is_empty() || s.len() > c.max_text_len) {
            return Err(Error::Invalid(format!(
                "token sequence of length {} outside 1..={}",
                s.len(),
                c.max_text_len
            )));
        }
        if let Some(&bad) = seqs.iter().flat_map(|s| &s.ids).find(|&&i| i >= c.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside the vocabulary")));
        }
        let n = seqs.len();
        let l = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut ids = Vec::with_capacity(n * l);
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat(PAD_ID).take(l - s.len()));
        }
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
        let tok = sess.p(self.text.token);
        let pos = sess.p(self.text.position);
        let x = sess.graph.gather_rows(tok, ids)?;
        let p = sess.graph.gather_rows(pos, positions)?;
        let mut x = sess.graph.add(x, p)?;
        let layout = Arc::new(AttnLayout {
            seqs: n,
            seq_len: l,
            heads: c.heads,
            lengths: Some(seqs.iter().map(|s| s.len()).collect()),
            bias_index: None,
        });
        for block in &self.text.blocks {
            x = block.forward(sess, x, layout.clone(), None)?;
        }
        let x = layer_norm(sess, x, self.text.ln_f)?;
        let summary = sess.graph.gather_rows(x, (0..n).map(|s| s * l).collect())?;
        self.head(sess, summary, self.text.proj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_pixels_have_zero_mean_unit_variance() {
        let px: Vec<f32> = (0..256).map(|i| 0.3 + 0.001 * (i % 17) as f32).collect();
        let (out, feats) = standardize(&px);
        let n = out.len() as f64;
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
        let m = px.iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!((feats[0] as f64 - (m - 0.5) / 0.25).abs() < 1e-6);
    }

    #[test]
    fn constant_image_standardizes_to_zeros() {
        let (out, feats) = standardize(&[0.7; 64]);
        assert!(out.iter().all(|&v| v == 0.0));
        assert!((feats[1] as f64 - (MIN_PIXEL_STD / 0.05).ln()).abs() < 1e-6);
    }
}
