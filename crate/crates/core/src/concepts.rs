//! Class concepts, learnable prototypes anchored to prompt embeddings, and
//! the prototype cross-entropy.

use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoder, Tokenizer};
use crate::error::{Error, Result};
use crate::tensor::{vecops, Graph, ParamId, ParamStore, Real, Session, Tensor, Var};

pub const DEFAULT_TEMPLATE: &str = "a photo of a {} on a road";

/// Ordered class names and the one-slot prompt template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptSet {
    pub classes: Vec<String>,
    pub template: String,
}

impl Default for ConceptSet {
    fn default() -> Self {
        Self {
            classes: crate::synthbench::DamageClass::default_names(),
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl ConceptSet {
    pub fn new(classes: Vec<String>, template: impl Into<String>) -> Result<Self> {
        let set = Self {
            classes,
            template: template.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("concepts.classes", "needs at least one class"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(Error::config("concepts.classes", format!("entry {i} is blank")));
            }
            if self.classes[..i].contains(c) {
                return Err(Error::config("concepts.classes", format!("duplicate class `{c}`")));
            }
        }
        if self.template.matches("{}").count() != 1 {
            return Err(Error::config(
                "concepts.template",
                "must contain exactly one `{}` slot",
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn prompt(&self, k: usize) -> String {
        self.template.replacen("{}", &self.classes[k], 1)
    }

    pub fn prompts(&self) -> Vec<String> {
        (0..self.len()).map(|k| self.prompt(k)).collect()
    }
}

/// Trainable prototypes `v` (`[K × d]`, in the parameter store) and the text
/// embeddings they were last anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    pub v: ParamId,
    pub anchors: Tensor<T>,
}

/// Unit text embeddings of every class prompt, `[K × d]`.
pub fn prompt_embeddings<T: Real>(
    concepts: &ConceptSet,
    encoder: &DualEncoder,
    tokenizer: &Tokenizer,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let seqs = concepts
        .prompts()
        .iter()
        .map(|p| tokenizer.tokenize(p, encoder.config.max_text_len))
        .collect::<Result<Vec<_>>>()?;
    let mut sess = Session::frozen(store);
    let z = encoder.encode_texts(&mut sess, &seqs)?;
    Ok(sess.graph.value(z).clone())
}

/// `v_k := g(template(c_k))`, anchors equal to the initial values.
pub fn init_prototypes<T: Real>(
    concepts: &ConceptSet,
    encoder: &DualEncoder,
    tokenizer: &Tokenizer,
    store: &mut ParamStore<T>,
) -> Result<PrototypeBank<T>> {
    let anchors = prompt_embeddings(concepts, encoder, tokenizer, store)?;
    let v = store.add("concept.prototypes", anchors.clone());
    Ok(PrototypeBank { v, anchors })
}

/// Pulls every prototype toward a fresh prompt embedding:
/// `v ← normalize((1 − λ)·v + λ·anchor)`.
pub fn reanchor_prototypes<T: Real>(
    bank: &mut PrototypeBank<T>,
    concepts: &ConceptSet,
    encoder: &DualEncoder,
    tokenizer: &Tokenizer,
    store: &mut ParamStore<T>,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("concepts.reanchor_mix", "must lie in [0, 1]"));
    }
    bank.anchors = prompt_embeddings(concepts, encoder, tokenizer, store)?;
    mix_rows(store.get_mut(bank.v), &bank.anchors, lambda);
    Ok(())
}

pub(crate) fn mix_rows<T: Real>(v: &mut Tensor<T>, anchors: &Tensor<T>, lambda: f64) {
    let d = v.cols();
    let l = T::of(lambda);
    let keep = T::one() - l;
    for (row, a) in v.data_mut().chunks_mut(d).zip(anchors.data().chunks(d)) {
        let mixed: Vec<T> = row.iter().zip(a).map(|(&x, &y)| keep * x + l * y).collect();
        row.copy_from_slice(&vecops::l2_normalize(&mixed));
    }
}

/// Mean prototype cross-entropy over a batch: rows of `z` against the
/// row-normalized `prototypes`, logits scaled by `inv_tau`.
pub fn domain_align_loss<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    prototypes: Var,
    labels: &[usize],
    inv_tau: Var,
) -> Result<Var> {
    let (n, k) = (g.shape(z)[0], g.shape(prototypes)[0]);
    if labels.len() != n {
        return Err(Error::shape(
            "domain_align_loss",
            format!("{} labels for {n} embeddings", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} outside {k} classes")));
    }
    let v = g.l2_normalize(prototypes);
    let vt = g.transpose(v)?;
    let sim = g.matmul(z, vt)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.gather(logp, labels.iter().enumerate().map(|(i, &y)| i * k + y).collect())?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Single-image prototype cross-entropy evaluated outside any model.
pub fn concept_loss<T: Real>(z: &[T], label: usize, prototypes: &Tensor<T>, tau: T) -> Result<T> {
    if tau <= T::zero() {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    let mut g = Graph::new();
    let zv = g.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let p = g.constant(prototypes.clone());
    let it = g.constant(Tensor::scalar(T::one() / tau));
    let l = domain_align_loss(&mut g, zv, p, &[label], it)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dape::{DapeConfig, PeStrategy};
    use crate::encoders::EncoderConfig;
    use crate::rng::RngStreams;

    fn basis(k: usize, d: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[k, d]);
        for i in 0..k {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    #[test]
    fn single_class_is_zero() {
        let p = Tensor::from_f64(&[1, 3], &[0.2, 0.3, 0.4]).unwrap();
        assert_eq!(concept_loss(&[1.0, 0.0, 0.0], 0, &p, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn uniform_is_ln_k() {
        for k in [2usize, 10] {
            let p = basis(k, 16);
            // orthogonal to every prototype
            let mut z = vec![0.0; 16];
            z[15] = 1.0;
            let l = concept_loss(&z, 1, &p, 0.07).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12, "{l}");
        }
    }

    #[test]
    fn matched_prototype_against_oracle() {
        let k = 10;
        let p = basis(k, 12);
        let mut z = vec![0.0; 12];
        z[3] = 1.0;
        let tau: f64 = 0.07;
        let l = concept_loss(&z, 3, &p, tau).unwrap();
        let e = (1.0 / tau).exp();
        let oracle = -(e / (e + (k as f64 - 1.0))).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!(l < 1e-4);
    }

    #[test]
    fn invalid_label_rejected() {
        let p = basis(3, 4);
        assert!(concept_loss(&[1.0, 0.0, 0.0, 0.0], 3, &p, 0.1).is_err());
    }

    #[test]
    fn prototypes_are_read_normalized() {
        let mut p = basis(3, 4);
        p.data_mut()[0] = 7.0;
        let a = concept_loss(&[1.0, 0.0, 0.0, 0.0], 0, &p, 0.1).unwrap();
        let b = concept_loss(&[1.0, 0.0, 0.0, 0.0], 0, &basis(3, 4), 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_correct_similarity() {
        let p = basis(4, 4);
        let mut last = -1.0;
        for c in [0.9, 0.5, 0.1] {
            let s = (1.0f64 - c * c).sqrt();
            let l = concept_loss(&[c, 0.0, 0.0, s], 0, &p, 0.1).unwrap();
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn mix_rows_cases() {
        let unit: Tensor<f64> = Tensor::from_f64(&[1, 2], &[0.6, 0.8]).unwrap();
        let anchor = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let mut v = unit.clone();
        mix_rows(&mut v, &anchor, 0.0);
        for (a, b) in v.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut v = unit.clone();
        mix_rows(&mut v, &anchor, 1.0);
        assert_eq!(v.data(), anchor.data());
        let mut v = Tensor::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        mix_rows(&mut v, &anchor, 0.5);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v.data()[0] - h).abs() < 1e-12 && (v.data()[1] - h).abs() < 1e-12);
    }

    fn setup(seed: u64) -> (ConceptSet, DualEncoder, Tokenizer, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = RngStreams::new(seed).stream("init");
        let enc = DualEncoder::new(
            EncoderConfig::default(),
            PeStrategy::None,
            DapeConfig::default(),
            &mut store,
            &mut rng,
        )
        .unwrap();
        (ConceptSet::default(), enc, Tokenizer::new(), store)
    }

    #[test]
    fn init_gives_distinct_unit_prototypes() {
        let (c, enc, tok, mut store) = setup(3);
        let bank = init_prototypes(&c, &enc, &tok, &mut store).unwrap();
        let v = store.get(bank.v);
        assert_eq!(v.shape(), &[10, 64]);
        for k in 0..10 {
            assert!((vecops::norm(v.row(k)) - 1.0).abs() < 1e-5);
        }
        let d: f32 = v.row(0).iter().zip(v.row(1)).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(d > 1e-8);
        let (_, enc2, _, mut store2) = setup(3);
        let bank2 = init_prototypes(&c, &enc2, &tok, &mut store2).unwrap();
        assert_eq!(store2.get(bank2.v), v);
    }

    #[test]
    fn reanchor_full_mix_returns_fresh_embedding() {
        let (c, enc, tok, mut store) = setup(4);
        let mut bank = init_prototypes(&c, &enc, &tok, &mut store).unwrap();
        store.get_mut(bank.v).data_mut()[0] += 0.5;
        reanchor_prototypes(&mut bank, &c, &enc, &tok, &mut store, 1.0).unwrap();
        for (a, b) in store.get(bank.v).data().iter().zip(bank.anchors.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn concept_set_validation() {
        assert!(ConceptSet::new(vec!["a".into(), "a".into()], DEFAULT_TEMPLATE).is_err());
        assert!(ConceptSet::new(vec![], DEFAULT_TEMPLATE).is_err());
        assert!(ConceptSet::new(vec!["a".into()], "no slot").is_err());
        let c = ConceptSet::default();
        assert_eq!(c.prompt(3), "a photo of a pothole on a road");
    }
}
