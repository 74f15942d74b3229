use rand::Rng;
use serde::Serialize;

use super::RunConfig;
use crate::error::Result;
use crate::image::Image;
use crate::losses::perturb_image;
use crate::model::{RoadClip, TrainBatch};
use crate::rng::RngStreams;
use crate::synthbench::{render_sample, sample_spec_in_class, DamageClass};
use crate::tensor::{ParamId, Session};

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Below this magnitude on both sides a coordinate is compared absolutely.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Two rendered samples of distinct classes with shifted copies.
pub fn gradcheck_batch(model: &RoadClip<f64>, cfg: &RunConfig) -> Result<TrainBatch> {
    let streams = RngStreams::new(cfg.seed);
    let size = cfg.encoder.image_size;
    let mut samples = Vec::new();
    for (i, class) in [DamageClass::Longitudinal, DamageClass::Pothole].into_iter().enumerate() {
        let spec = sample_spec_in_class(&mut streams.indexed("gradcheck-spec", &[i as u64]), class, size);
        samples.push(render_sample(&spec, size, cfg.seed + i as u64)?);
    }
    let shifted: Vec<Image> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| perturb_image(&s.image, &cfg.perturb, cfg.seed + i as u64))
        .collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    model.prepare_batch(&images, Some(&shifted), &captions, &labels)
}

/// Central differences of the full objective in f64 against the analytic
/// gradient, over `per_group` coordinates of every parameter tensor (all of
/// them for smaller tensors). The coordinate with the largest analytic
/// gradient is always included.
pub fn gradcheck(cfg: &RunConfig, per_group: usize) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut model: RoadClip<f64> = RoadClip::new(cfg.model_config(), cfg.seed)?;
    // move off the symmetric initial point so no gradient vanishes by construction
    let mut rng = RngStreams::new(cfg.seed).stream("gradcheck-jitter");
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v += 0.02 * (rng.gen::<f64>() - 0.5);
        }
    }
    let batch = gradcheck_batch(&model, cfg)?;
    let (_, grads) = model.loss_and_grads(&batch, &cfg.loss)?;
    let loss_at = |m: &RoadClip<f64>| -> Result<f64> {
        let mut sess = Session::frozen(&m.store);
        let (root, _) = m.loss_graph(&mut sess, &batch, &cfg.loss)?;
        Ok(sess.graph.value(root).item())
    };
    let mut pick = RngStreams::new(cfg.seed).stream("gradcheck-coords");
    let mut groups = Vec::new();
    for id in model.store.ids().collect::<Vec<ParamId>>() {
        let n = model.store.get(id).len();
        let g = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let mut coords: Vec<usize> = if n <= per_group {
            (0..n).collect()
        } else {
            let top = (0..n).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            let mut c = vec![top];
            while c.len() < per_group {
                let k = pick.gen_range(0..n);
                if !c.contains(&k) {
                    c.push(k);
                }
            }
            c
        };
        coords.sort_unstable();
        let mut worst = 0.0f64;
        for &k in &coords {
            let orig = model.store.get(id).data()[k];
            let mut central = |h: f64| -> Result<f64> {
                model.store.get_mut(id).data_mut()[k] = orig + h;
                let up = loss_at(&model)?;
                model.store.get_mut(id).data_mut()[k] = orig - h;
                let down = loss_at(&model)?;
                model.store.get_mut(id).data_mut()[k] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let coarse = central(EPSILON)?;
            let fine = central(EPSILON / 2.0)?;
            // Richardson: cancels the h^2 truncation term
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max(relative_error(g[k], numeric));
        }
        groups.push(GroupCheck {
            name: model.store.name(id).to_string(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    let w = groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one group");
    Ok(GradcheckReport {
        max_rel_err: w.max_rel_err,
        worst: w.name.clone(),
        checked: groups.iter().map(|g| g.coords).sum(),
        groups,
    })
}
