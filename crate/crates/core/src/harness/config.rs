use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::ConceptSet;
use crate::dape::{DapeConfig, PeStrategy};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::{LossWeights, PerturbationSpec, Temperature};
use crate::model::ModelConfig;
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: "data/synthbench".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Mix toward fresh prompt embeddings applied after every epoch.
    pub reanchor_mix: f64,
    /// Evaluate on the validation split after each epoch.
    pub eval_every_epoch: bool,
    /// Linear ramp of the learning rate over the first steps.
    pub warmup_steps: usize,
    pub lr_schedule: LrSchedule,
    /// Probability of dropping each caption word in a training step.
    pub caption_dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over the whole run.
    Cosine,
}

impl TrainConfig {
    /// Multiplier on the base learning rate at 0-based `step` of `total`.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total > 0 => {
                let t = (step as f64 / total as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Cosine => 1.0,
        };
        warm * decay
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            reanchor_mix: 0.1,
            eval_every_epoch: true,
            warmup_steps: 0,
            lr_schedule: LrSchedule::Constant,
            caption_dropout: 0.0,
        }
    }
}

/// Complete description of a run. Unknown keys are rejected at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub pe: PeStrategy,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub dape: DapeConfig,
    pub concepts: ConceptSet,
    pub temperature: Temperature,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub perturb: PerturbationSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 7,
            pe: m.pe,
            data: DataConfig::default(),
            encoder: m.encoder,
            dape: m.dape,
            concepts: m.concepts,
            temperature: m.temperature,
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
            perturb: PerturbationSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    // toml reports the offending key in its message
    Error::config(
        msg.lines()
            .find_map(|l| l.split('`').nth(1))
            .unwrap_or("config")
            .to_string(),
        msg.replace('\n', " "),
    )
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            pe: self.pe,
            dape: self.dape,
            concepts: self.concepts.clone(),
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        self.perturb.validate()?;
        self.eval.validate()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        for (f, b) in [("optim.beta1", o.beta1), ("optim.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(f, "must lie in [0, 1)"));
            }
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train.reanchor_mix) {
            return Err(Error::config("train.reanchor_mix", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.train.caption_dropout) {
            return Err(Error::config("train.caption_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Parses TOML, applies `key.path=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(toml_error)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let parsed: toml::Value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "parent is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn zero_batch_names_the_field() {
        let e = RunConfig::from_toml("", &["train.batch_size=0".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("train.batch_size"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("[train]\nbatchsize = 3\n", &[]).unwrap_err();
        assert!(e.to_string().contains("batchsize"), "{e}");
        assert!(RunConfig::from_toml("colour = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let c = RunConfig::from_toml(
            "pe = \"none\"\n[optim]\nlr = 0.5\n",
            &["pe=dape".into(), "optim.lr=0.001".into()],
        )
        .unwrap();
        assert_eq!(c.pe, PeStrategy::Dape);
        assert_eq!(c.optim.lr, 0.001);
    }

    #[test]
    fn warmup_ramps_linearly_then_cosine_decays() {
        let t = TrainConfig {
            warmup_steps: 4,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_factor(0, 100), 0.25 * 0.5 * (1.0 + (std::f64::consts::PI * 0.0).cos()));
        assert!((t.lr_factor(1, 100) - 0.5 * 0.5 * (1.0 + (std::f64::consts::PI * 0.01).cos())).abs() < 1e-15);
        assert!((t.lr_factor(50, 100) - 0.5).abs() < 1e-12);
        assert!(t.lr_factor(100, 100).abs() < 1e-12);
        let flat = TrainConfig::default();
        assert_eq!(flat.lr_factor(0, 10), 1.0);
        assert_eq!(flat.lr_factor(9, 10), 1.0);
    }

    #[test]
    fn caption_dropout_must_be_below_one() {
        let e = RunConfig::from_toml("", &["train.caption_dropout=1.0".into()]).unwrap_err();
        assert!(e.to_string().contains("train.caption_dropout"), "{e}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("[optim]\nlr = 0.5\n", &[]).unwrap();
        assert_eq!(c.optim.lr, 0.5);
        assert_eq!(c.optim.beta2, 0.999);
    }
}
