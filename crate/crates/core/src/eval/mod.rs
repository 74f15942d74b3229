//! Zero-shot accuracy, cross-modal retrieval, text-guided localization, and
//! ablation tables.

mod ablation;
mod attention;

pub use ablation::{ablation_tsv, run_ablation, write_ablation, AblationRow, AblationSpec};
pub use attention::{
    attention_map, attention_maps, export_heatmap, heatmap_bytes, predicted_mask, quantile, sla,
    AttentionMap, SlaReport,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::RoadClip;
use crate::synthbench::Sample;
use crate::tensor::{Real, Tensor};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Map quantile above which patches count as predicted defect.
    pub attn_quantile: f64,
    pub iou_pass: f64,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attn_quantile: 0.8,
            iou_pass: 0.5,
            ks: vec![1, 5, 10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attn_quantile) {
            return Err(Error::config("eval.attn_quantile", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.iou_pass) {
            return Err(Error::config("eval.iou_pass", "must lie in [0, 1]"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("eval.ks", "needs positive cutoffs"));
        }
        Ok(())
    }
}

/// Row embeddings in f64, computed in fixed-size chunks.
pub fn image_embeddings<T: Real>(model: &RoadClip<T>, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for c in images.chunks(CHUNK) {
        out.extend(rows_f64(&model.embed_images(c)?));
    }
    Ok(out)
}

pub fn text_embeddings<T: Real>(model: &RoadClip<T>, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(texts.len());
    for c in texts.chunks(CHUNK) {
        out.extend(rows_f64(&model.embed_texts(c)?));
    }
    Ok(out)
}

pub(crate) fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = t.cols();
    t.to_f64_vec().chunks(d).map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Nearest class by cosine similarity of unit embeddings.
pub fn classify(images: &[Vec<f64>], classes: &[Vec<f64>]) -> Vec<usize> {
    images
        .iter()
        .map(|z| argmax(&classes.iter().map(|c| dot(z, c)).collect::<Vec<_>>()))
        .collect()
}

pub fn zero_shot_from_embeddings(
    images: &[Vec<f64>],
    labels: &[usize],
    classes: &[Vec<f64>],
) -> Result<ZeroShotReport> {
    if images.is_empty() {
        return Err(Error::Invalid("zero-shot evaluation on an empty set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::shape("zero_shot", "label count differs from image count"));
    }
    let k = classes.len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} outside {k} classes")));
    }
    let predictions = classify(images, classes);
    let mut confusion = vec![vec![0; k]; k];
    let mut correct = 0;
    for (&y, &p) in labels.iter().zip(&predictions) {
        confusion[y][p] += 1;
        correct += (y == p) as usize;
    }
    Ok(ZeroShotReport {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        predictions,
    })
}

/// Classifies each sample against the class-prompt embeddings.
pub fn zero_shot_classify<T: Real>(model: &RoadClip<T>, samples: &[Sample]) -> Result<ZeroShotReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("zero-shot evaluation on an empty set".into()));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let z = image_embeddings(model, &images)?;
    zero_shot_with(model, &z, samples)
}

fn zero_shot_with<T: Real>(model: &RoadClip<T>, z: &[Vec<f64>], samples: &[Sample]) -> Result<ZeroShotReport> {
    let prompts = model.config.concepts.prompts();
    let refs: Vec<&str> = prompts.iter().map(|s| s.as_str()).collect();
    let classes = text_embeddings(model, &refs)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    zero_shot_from_embeddings(z, &labels, &classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub gallery_size: usize,
    pub recall_at: BTreeMap<usize, f64>,
}

/// Recall@k of `queries[i]` retrieving `gallery[i]`. A gallery item outranks
/// the match when its similarity is higher, or equal with a lower index.
pub fn retrieve(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    ks: &[usize],
    direction: Direction,
) -> Result<RetrievalResult> {
    if queries.len() != gallery.len() {
        return Err(Error::shape(
            "retrieve",
            format!("{} queries paired with {} gallery items", queries.len(), gallery.len()),
        ));
    }
    if queries.is_empty() {
        return Err(Error::Invalid("retrieval over an empty gallery".into()));
    }
    let ranks: Vec<usize> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let target = dot(q, &gallery[i]);
            gallery
                .iter()
                .enumerate()
                .filter(|&(j, g)| {
                    let s = dot(q, g);
                    s > target || (s == target && j < i)
                })
                .count()
        })
        .collect();
    let n = queries.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect();
    Ok(RetrievalResult {
        direction,
        gallery_size: gallery.len(),
        recall_at,
    })
}

/// Both directions over paired embeddings and their mean per k.
pub fn retrieval_both(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    ks: &[usize],
) -> Result<(RetrievalResult, RetrievalResult, BTreeMap<usize, f64>)> {
    let i2t = retrieve(images, texts, ks, Direction::ImageToText)?;
    let t2i = retrieve(texts, images, ks, Direction::TextToImage)?;
    let mean = ks
        .iter()
        .map(|k| (*k, (i2t.recall_at[k] + t2i.recall_at[k]) / 2.0))
        .collect();
    Ok((i2t, t2i, mean))
}

/// Headline metrics on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub zs_acc: f64,
    /// Mean of both directions.
    pub recall: BTreeMap<usize, f64>,
    pub recall_i2t: BTreeMap<usize, f64>,
    pub recall_t2i: BTreeMap<usize, f64>,
    pub sla: f64,
    pub mean_iou: f64,
    pub count: usize,
}

impl EvalSummary {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// ZS accuracy, Recall@k in both directions, and SLA over `samples`.
pub fn evaluate<T: Real>(model: &RoadClip<T>, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation on an empty set".into()));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let mut zi = Vec::with_capacity(samples.len());
    let mut patches = Vec::with_capacity(samples.len());
    for c in images.chunks(CHUNK) {
        let (z, p) = model.embed_images_with_patches(c)?;
        zi.extend(rows_f64(&z));
        let g2 = model.config.encoder.grid().pow(2);
        let rows = rows_f64(&p);
        patches.extend(rows.chunks(g2).map(|r| r.to_vec()));
    }
    let zt = text_embeddings(model, &captions)?;
    let zs = zero_shot_with(model, &zi, samples)?;
    let (i2t, t2i, recall) = retrieval_both(&zi, &zt, &cfg.ks)?;
    let maps: Vec<AttentionMap> = samples
        .iter()
        .zip(patches.iter().zip(&zt))
        .map(|(s, (p, t))| AttentionMap::from_features(p, t, model.config.encoder.grid(), &s.caption, &s.id))
        .collect();
    let report = sla(&maps, samples, model.config.encoder.patch_size, cfg.attn_quantile, cfg.iou_pass)?;
    Ok(EvalSummary {
        zs_acc: zs.accuracy,
        recall,
        recall_i2t: i2t.recall_at,
        recall_t2i: t2i.recall_at,
        sla: report.sla,
        mean_iou: report.ious.iter().sum::<f64>() / report.ious.len() as f64,
        count: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn single_class_is_always_right() {
        let imgs: Vec<_> = (0..5).map(|i| onehot(i, 5)).collect();
        let r = zero_shot_from_embeddings(&imgs, &[0; 5], &[onehot(0, 5)]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![5]]);
    }

    #[test]
    fn zero_shot_empty_errors() {
        assert!(zero_shot_from_embeddings(&[], &[], &[onehot(0, 2)]).is_err());
    }

    #[test]
    fn perfect_pairs_recall_one() {
        let a: Vec<_> = (0..6).map(|i| onehot(i, 6)).collect();
        let r = retrieve(&a, &a, &[1, 5], Direction::ImageToText).unwrap();
        assert_eq!(r.recall_at[&1], 1.0);
    }

    #[test]
    fn k_at_gallery_size_is_one() {
        let q: Vec<_> = (0..4).map(|i| onehot(i % 2, 3)).collect();
        let g: Vec<_> = (0..4).map(|i| onehot((i + 1) % 3, 3)).collect();
        let r = retrieve(&q, &g, &[1, 4, 10], Direction::TextToImage).unwrap();
        assert_eq!(r.recall_at[&4], 1.0);
        assert_eq!(r.recall_at[&10], 1.0);
        assert!(r.recall_at[&1] <= r.recall_at[&4]);
    }

    #[test]
    fn single_item_gallery() {
        let r = retrieve(&[vec![1.0]], &[vec![-1.0]], &[1, 5, 10], Direction::ImageToText).unwrap();
        assert!(r.recall_at.values().all(|&v| v == 1.0));
    }

    #[test]
    fn ties_favour_lower_gallery_index() {
        let same = vec![vec![1.0, 0.0]; 3];
        let r = retrieve(&same, &same, &[1, 2], Direction::ImageToText).unwrap();
        assert!((r.recall_at[&1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.recall_at[&2] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pairing_mismatch_errors() {
        assert!(retrieve(&[vec![1.0]], &[], &[1], Direction::ImageToText).is_err());
    }
}
