use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dot, rows_f64};
use crate::error::{Error, Result};
use crate::image::{encode_pgm, quantize, Image, Mask};
use crate::model::RoadClip;
use crate::synthbench::Sample;
use crate::tensor::Real;

/// Per-patch text-image similarity on the `G×G` grid, min-max normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub grid: usize,
    pub values: Vec<f64>,
    pub caption: String,
    pub image_id: String,
}

/// Maps whose similarity range is at or below this count as constant.
const FLAT_RANGE: f64 = 1e-9;

impl AttentionMap {
    /// `patches` holds `G²` unit patch embeddings, `text` a unit caption embedding.
    pub fn from_features(patches: &[Vec<f64>], text: &[f64], grid: usize, caption: &str, image_id: &str) -> Self {
        let raw: Vec<f64> = patches.iter().map(|p| dot(p, text)).collect();
        Self {
            grid,
            values: min_max(&raw),
            caption: caption.to_string(),
            image_id: image_id.to_string(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid + j]
    }
}

fn min_max(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > FLAT_RANGE) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn attention_map<T: Real>(model: &RoadClip<T>, image: &Image, caption: &str, image_id: &str) -> Result<AttentionMap> {
    let (_, p) = model.embed_images_with_patches(&[image])?;
    let t = model.encode_text(caption)?;
    let t: Vec<f64> = t.iter().map(|v| v.f64()).collect();
    Ok(AttentionMap::from_features(&rows_f64(&p), &t, model.config.encoder.grid(), caption, image_id))
}

/// Maps for every sample against its own caption.
pub fn attention_maps<T: Real>(model: &RoadClip<T>, samples: &[Sample]) -> Result<Vec<AttentionMap>> {
    samples
        .iter()
        .map(|s| attention_map(model, &s.image, &s.caption, &s.id))
        .collect()
}

/// Linear-interpolated quantile of `values` (`q` in [0, 1]).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Patches strictly above the `q`-quantile, each painting its `P×P` block.
pub fn predicted_mask(map: &AttentionMap, patch: usize, q: f64) -> Mask {
    let t = quantile(&map.values, q);
    let side = map.grid * patch;
    let mut mask = Mask::empty(side, side);
    for i in 0..map.grid {
        for j in 0..map.grid {
            if map.get(i, j) > t {
                for y in i * patch..(i + 1) * patch {
                    for x in j * patch..(j + 1) * patch {
                        mask.set(x, y);
                    }
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaReport {
    pub ious: Vec<f64>,
    pub attn_quantile: f64,
    pub iou_pass: f64,
    pub sla: f64,
}

/// Fraction of samples whose binarized map reaches `iou_pass` against the
/// ground-truth mask.
pub fn sla(maps: &[AttentionMap], samples: &[Sample], patch: usize, q: f64, iou_pass: f64) -> Result<SlaReport> {
    if maps.len() != samples.len() {
        return Err(Error::shape("sla", "one map per sample"));
    }
    if samples.is_empty() {
        return Err(Error::Invalid("localization over an empty set".into()));
    }
    let ious: Vec<f64> = maps
        .iter()
        .zip(samples)
        .map(|(m, s)| {
            let pred = predicted_mask(m, patch, q);
            if (pred.width, pred.height) != (s.mask.width, s.mask.height) {
                return Err(Error::shape("sla", "map and mask sizes differ"));
            }
            Ok(pred.iou(&s.mask))
        })
        .collect::<Result<_>>()?;
    let pass = ious.iter().filter(|&&v| v >= iou_pass).count();
    Ok(SlaReport {
        sla: pass as f64 / ious.len() as f64,
        ious,
        attn_quantile: q,
        iou_pass,
    })
}

/// `image | map | 0.5 blend` with one white separator column between panels.
pub fn heatmap_bytes(map: &AttentionMap, image: &Image) -> Result<Vec<u8>> {
    let (w, h) = (image.width, image.height);
    if w != h || map.grid == 0 || w % map.grid != 0 {
        return Err(Error::shape("heatmap", format!("{w}×{h} image for a {}-cell grid", map.grid)));
    }
    let patch = w / map.grid;
    let width = 3 * w + 2;
    let mut out = vec![255u8; width * h];
    for y in 0..h {
        for x in 0..w {
            let v = image.get(x, y);
            let a = map.get(y / patch, x / patch) as f32;
            out[y * width + x] = quantize(v);
            out[y * width + w + 1 + x] = quantize(a);
            out[y * width + 2 * w + 2 + x] = quantize(0.5 * v + 0.5 * a);
        }
    }
    Ok(encode_pgm(width, h, &out))
}

pub fn export_heatmap(map: &AttentionMap, image: &Image, path: &Path) -> Result<()> {
    let bytes = heatmap_bytes(map, image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::decode_pgm;

    fn map(values: Vec<f64>, grid: usize) -> AttentionMap {
        AttentionMap {
            grid,
            values,
            caption: String::new(),
            image_id: String::new(),
        }
    }

    #[test]
    fn constant_similarities_give_zero_map() {
        let p = vec![vec![0.6, 0.8]; 4];
        let m = AttentionMap::from_features(&p, &[1.0, 0.0], 2, "c", "i");
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_max_spans_unit_interval() {
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![-1.0, 0.0]];
        let m = AttentionMap::from_features(&p, &[1.0, 0.0], 2, "c", "i");
        assert_eq!(m.values.iter().copied().fold(f64::MAX, f64::min), 0.0);
        assert_eq!(m.values.iter().copied().fold(f64::MIN, f64::max), 1.0);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert!((quantile(&[0.0, 1.0], 0.8) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn top_fifth_of_patches_selected() {
        let m = map((0..64).map(|v| v as f64 / 63.0).collect(), 8);
        let mask = predicted_mask(&m, 8, 0.8);
        assert_eq!(mask.count(), 13 * 64);
        let flat = map(vec![0.0; 64], 8);
        assert_eq!(predicted_mask(&flat, 8, 0.8).count(), 0);
    }

    #[test]
    fn heatmap_layout_and_determinism() {
        let img = Image::filled(16, 16, 0.5);
        let m = map(vec![0.0; 4], 2);
        let a = heatmap_bytes(&m, &img).unwrap();
        let (w, h, px) = decode_pgm(&a, Path::new("x")).unwrap();
        assert_eq!((w, h), (3 * 16 + 2, 16));
        for y in 0..16 {
            assert!(px[y * w + 17..y * w + 33].iter().all(|&v| v == 0));
        }
        assert_eq!(a, heatmap_bytes(&m, &img).unwrap());
    }
}
