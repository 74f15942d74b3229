use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::concepts::reanchor_prototypes;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::image::Image;
use crate::losses::{apply_perturbation, LossReport};
use crate::model::RoadClip;
use crate::rng::RngStreams;
use crate::synthbench::{Dataset, Sample};
use crate::tensor::{adam_step, AdamConfig, AdamState};

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: RoadClip<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = RoadClip::new(config.model_config(), config.seed)?;
        let adam = AdamState::new(&model.store);
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
        })
    }
}

/// Validation metrics recorded after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub zs_acc: f64,
    pub recall_at_1: f64,
    pub sla: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Per-term means over the epoch's steps.
    pub loss: LossReport,
    pub tau: f64,
    pub val: Option<ValMetrics>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Draws the shifted copies for one batch.
fn shifted_copies(cfg: &RunConfig, streams: &RngStreams, epoch: usize, idx: &[usize], samples: &[Sample]) -> Vec<Image> {
    idx.iter()
        .map(|&i| {
            let mut rng = streams.indexed("perturb", &[epoch as u64, i as u64]);
            let p = cfg.perturb.sample(&mut rng);
            apply_perturbation(&samples[i].image, &p)
        })
        .collect()
}

/// Drops each word with probability `p`, keeping at least one.
pub fn drop_words(caption: &str, p: f64, rng: &mut impl Rng) -> String {
    if p <= 0.0 {
        return caption.to_string();
    }
    let words: Vec<&str> = caption.split_whitespace().collect();
    let kept: Vec<&str> = words.iter().copied().filter(|_| rng.gen::<f64>() >= p).collect();
    if kept.is_empty() {
        words[rng.gen_range(0..words.len())].to_string()
    } else {
        kept.join(" ")
    }
}

/// One optimizer step on `idx`; returns the loss report.
fn step(
    state: &mut TrainState,
    streams: &RngStreams,
    samples: &[Sample],
    idx: &[usize],
    global_step: usize,
    total_steps: usize,
) -> Result<LossReport> {
    let cfg = &state.config;
    let shifted = shifted_copies(cfg, streams, state.epoch, idx, samples);
    let images: Vec<&Image> = idx.iter().map(|&i| &samples[i].image).collect();
    let captions: Vec<String> = idx
        .iter()
        .map(|&i| {
            let mut rng = streams.indexed("caption-drop", &[state.epoch as u64, i as u64]);
            drop_words(&samples[i].caption, cfg.train.caption_dropout, &mut rng)
        })
        .collect();
    let captions: Vec<&str> = captions.iter().map(String::as_str).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
    let batch = state.model.prepare_batch(&images, Some(&shifted), &captions, &labels)?;
    let (report, grads) = state.model.loss_and_grads(&batch, &cfg.loss)?;
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFinite {
            step: global_step,
            term: term.into(),
        });
    }
    if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            step: global_step,
            term: "gradient".into(),
        });
    }
    let optim = AdamConfig {
        lr: cfg.optim.lr * cfg.train.lr_factor(global_step, total_steps),
        ..cfg.optim
    };
    adam_step(&mut state.model.store, &grads, &mut state.adam, &optim)?;
    state.model.clamp_tau();
    Ok(report)
}

/// Runs one epoch over the training split, then re-anchors and evaluates.
pub fn train_epoch(state: &mut TrainState, data: &Dataset) -> Result<EpochLog> {
    let streams = RngStreams::new(state.config.seed);
    let samples = &data.train;
    if samples.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut streams.indexed("shuffle", &[state.epoch as u64]));
    let bs = state.config.train.batch_size;
    let total_steps = state.config.train.epochs * samples.len().div_ceil(bs);
    let mut sums = [0.0f64; 4];
    let mut steps = 0;
    for idx in order.chunks(bs) {
        let global = state.adam.step as usize;
        let r = step(state, &streams, samples, idx, global, total_steps)?;
        for (s, v) in sums.iter_mut().zip([r.total, r.itc, r.domain_align, r.pos_consist]) {
            *s += v;
        }
        steps += 1;
    }
    let m = &mut state.model;
    reanchor_prototypes(
        &mut m.prototypes,
        &m.config.concepts,
        &m.encoder,
        &m.tokenizer,
        &mut m.store,
        state.config.train.reanchor_mix,
    )?;
    state.epoch += 1;
    let val = if state.config.train.eval_every_epoch && !data.val.is_empty() {
        let s = evaluate(&state.model, &data.val, &state.config.eval)?;
        Some(ValMetrics {
            zs_acc: s.zs_acc,
            recall_at_1: s.recall_at(1),
            sla: s.sla,
        })
    } else {
        None
    };
    let n = steps as f64;
    Ok(EpochLog {
        epoch: state.epoch,
        steps,
        loss: LossReport {
            total: sums[0] / n,
            itc: sums[1] / n,
            domain_align: sums[2] / n,
            pos_consist: sums[3] / n,
        },
        tau: state.model.tau(),
        val,
    })
}

/// Fresh initialization followed by `config.train.epochs` epochs. `on_epoch`
/// sees every log line as it is produced.
pub fn train(config: RunConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(TrainState, Vec<EpochLog>)> {
    let mut state = TrainState::init(config)?;
    let mut logs = Vec::new();
    for _ in 0..state.config.train.epochs {
        let log = train_epoch(&mut state, data)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok((state, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreams;

    #[test]
    fn zero_dropout_is_identity() {
        let mut rng = RngStreams::new(1).stream("t");
        let c = "a moderate pothole about 1 meters in diameter";
        assert_eq!(drop_words(c, 0.0, &mut rng), c);
    }

    #[test]
    fn dropout_keeps_order_and_at_least_one_word() {
        let c = "a severe transverse crack about 2 meters long";
        let words: Vec<&str> = c.split_whitespace().collect();
        for i in 0..200 {
            let mut rng = RngStreams::new(3).indexed("t", &[i]);
            let out = drop_words(c, 0.9, &mut rng);
            let kept: Vec<&str> = out.split_whitespace().collect();
            assert!(!kept.is_empty());
            let mut it = words.iter();
            assert!(kept.iter().all(|w| it.any(|x| x == w)), "{out}");
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let c = "a hairline edge crack about 3 meters long at the edge of the road, foggy conditions";
        let a = drop_words(c, 0.3, &mut RngStreams::new(5).indexed("caption-drop", &[0, 4]));
        let b = drop_words(c, 0.3, &mut RngStreams::new(5).indexed("caption-drop", &[0, 4]));
        assert_eq!(a, b);
    }
}
