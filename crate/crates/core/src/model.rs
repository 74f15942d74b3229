//! The assembled dual encoder with prototypes and temperature.

use serde::{Deserialize, Serialize};

use crate::concepts::{domain_align_loss, init_prototypes, ConceptSet, PrototypeBank};
use crate::dape::{DapeConfig, PeStrategy};
use crate::encoders::{DualEncoder, EncoderConfig, ImageBatch, TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{itc_loss, pos_consist_loss, total_loss, LossReport, LossTerms, LossWeights, Temperature};
use crate::rng::RngStreams;
use crate::tensor::{ParamId, ParamStore, Real, Session, Tensor, Var};

/// Everything that determines the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pe: PeStrategy,
    pub dape: DapeConfig,
    pub concepts: ConceptSet,
    pub temperature: Temperature,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pe: PeStrategy::Dape,
            dape: DapeConfig::default(),
            concepts: ConceptSet::default(),
            temperature: Temperature::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.concepts.validate()?;
        self.temperature.validate()?;
        if self.dape.mlp_hidden == 0 {
            return Err(Error::config("dape.mlp_hidden", "must be positive"));
        }
        if !(self.dape.energy_floor.is_finite() && self.dape.energy_floor >= 0.0) {
            return Err(Error::config("dape.energy_floor", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RoadClip<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: DualEncoder,
    pub tokenizer: Tokenizer,
    pub prototypes: PrototypeBank<T>,
    pub log_tau: ParamId,
}

/// Images, captions and labels of one step, prepared outside the graph.
/// When shifted copies are present they follow the originals in `images`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: ImageBatch,
    pub texts: Vec<TokenSequence>,
    pub labels: Vec<usize>,
    pub shifted: bool,
}

impl<T: Real> RoadClip<T> {
    /// Fresh model; weights come from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(seed).stream("init");
        let encoder = DualEncoder::new(config.encoder, config.pe, config.dape, &mut store, &mut rng)?;
        let tokenizer = Tokenizer::new();
        let prototypes = init_prototypes(&config.concepts, &encoder, &tokenizer, &mut store)?;
        let log_tau = store.add("log_tau", Tensor::scalar(T::of(config.temperature.init.ln())));
        Ok(Self {
            config,
            store,
            encoder,
            tokenizer,
            prototypes,
            log_tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).item().f64().exp()
    }

    /// Projects `log_tau` back into the configured range.
    pub fn clamp_tau(&mut self) {
        let t = self.config.temperature;
        let v = self.store.get_mut(self.log_tau);
        let c = t.clamp_log(v.item().f64());
        v.data_mut()[0] = T::of(c);
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.tokenize(text, self.config.encoder.max_text_len)
    }

    pub fn prepare_batch(
        &self,
        images: &[&Image],
        shifted: Option<&[Image]>,
        captions: &[&str],
        labels: &[usize],
    ) -> Result<TrainBatch> {
        let n = images.len();
        if captions.len() != n || labels.len() != n || shifted.is_some_and(|s| s.len() != n) {
            return Err(Error::shape(
                "prepare_batch",
                format!("{n} images, {} captions, {} labels", captions.len(), labels.len()),
            ));
        }
        let mut all: Vec<&Image> = images.to_vec();
        if let Some(s) = shifted {
            all.extend(s.iter());
        }
        Ok(TrainBatch {
            images: self.encoder.prepare_images(&all)?,
            texts: captions.iter().map(|c| self.tokenize(c)).collect::<Result<_>>()?,
            labels: labels.to_vec(),
            shifted: shifted.is_some(),
        })
    }

    /// Graph of the full objective over `batch`.
    pub fn loss_graph(
        &self,
        sess: &mut Session<T>,
        batch: &TrainBatch,
        weights: &LossWeights,
    ) -> Result<(Var, LossReport)> {
        let n = batch.labels.len();
        let (z_all, _) = self.encoder.encode_images(sess, &batch.images)?;
        let (z, z_shift) = if batch.shifted {
            let a = sess.graph.slice_rows(z_all, 0, n)?;
            let b = sess.graph.slice_rows(z_all, n, 2 * n)?;
            (a, Some(b))
        } else {
            (z_all, None)
        };
        let zt = self.encoder.encode_texts(sess, &batch.texts)?;
        let lt = sess.p(self.log_tau);
        let neg = sess.graph.scale(lt, -T::one());
        let inv_tau = sess.graph.exp(neg);
        let itc = itc_loss(&mut sess.graph, z, zt, inv_tau)?;
        let v = sess.p(self.prototypes.v);
        let da = domain_align_loss(&mut sess.graph, z, v, &batch.labels, inv_tau)?;
        let pc = match z_shift {
            Some(zs) => Some(pos_consist_loss(&mut sess.graph, z, zs)?),
            None => None,
        };
        total_loss(
            &mut sess.graph,
            LossTerms {
                itc,
                domain_align: da,
                pos_consist: pc,
            },
            weights,
        )
    }

    /// Loss value and gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &TrainBatch,
        weights: &LossWeights,
    ) -> Result<(LossReport, Vec<Option<Vec<T>>>)> {
        let mut sess = Session::new(&self.store);
        let (root, report) = self.loss_graph(&mut sess, batch, weights)?;
        sess.graph.backward(root)?;
        Ok((report, sess.param_grads()))
    }

    /// Unit image embeddings `[n × d]`.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let batch = self.encoder.prepare_images(images)?;
        let mut sess = Session::frozen(&self.store);
        let (z, _) = self.encoder.encode_images(&mut sess, &batch)?;
        Ok(sess.graph.value(z).clone())
    }

    /// Unit image embeddings and unit projected patch features `[n·G² × d]`.
    pub fn embed_images_with_patches(&self, images: &[&Image]) -> Result<(Tensor<T>, Tensor<T>)> {
        let batch = self.encoder.prepare_images(images)?;
        let mut sess = Session::frozen(&self.store);
        let (z, tokens) = self.encoder.encode_images(&mut sess, &batch)?;
        let p = self.encoder.project_patches(&mut sess, tokens)?;
        Ok((sess.graph.value(z).clone(), sess.graph.value(p).clone()))
    }

    /// Unit text embeddings `[n × d]`.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Tensor<T>> {
        let seqs = texts.iter().map(|t| self.tokenize(t)).collect::<Result<Vec<_>>>()?;
        let mut sess = Session::frozen(&self.store);
        let z = self.encoder.encode_texts(&mut sess, &seqs)?;
        Ok(sess.graph.value(z).clone())
    }

    /// `(z_image, patch_features)` for one image.
    pub fn encode_image(&self, image: &Image) -> Result<(Vec<T>, Tensor<T>)> {
        let (z, p) = self.embed_images_with_patches(&[image])?;
        Ok((z.into_data(), p))
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<T>> {
        Ok(self.embed_texts(&[text])?.into_data())
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> RoadClip<U> {
        RoadClip {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            tokenizer: self.tokenizer.clone(),
            prototypes: PrototypeBank {
                v: self.prototypes.v,
                anchors: self.prototypes.anchors.cast(),
            },
            log_tau: self.log_tau,
        }
    }
}
