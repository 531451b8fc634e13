//! Training configuration: flat `key = value` files with keys matching the
//! config field names; unknown keys are errors.

use thiserror::Error;

use crate::engine::{HeadKind, RunKind};
use crate::injection::{Channels, InjectionMode, InjectionSite};
use crate::model::config::ModelConfig;

#[derive(Debug, Error)]
pub enum TrainConfigError {
    #[error("config error: {0}")]
    Invalid(String),
    #[error("config error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub patience_epochs: usize,
    pub eval_every_steps: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub mode: InjectionMode,
    pub run_kind: RunKind,
    pub head_kind: HeadKind,
    pub weight_decay: f64,
    pub sentence_loss_weight: f64,
    pub min_token_freq: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-5,
            warmup_fraction: 0.1,
            epochs: 30,
            patience_epochs: 5,
            eval_every_steps: 500,
            batch_size: 16,
            seeds: vec![1, 2, 3],
            mode: InjectionMode::none(),
            run_kind: RunKind::NerOnly,
            head_kind: HeadKind::Crf,
            weight_decay: 0.01,
            sentence_loss_weight: 1.0,
            min_token_freq: 1,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: 64,
            dropout_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig, TrainConfigError> {
        let mut cfg = TrainConfig::default();
        let mut site: Option<InjectionSite> = None;
        let mut channels: Option<Channels> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainConfigError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: String| TrainConfigError::Parse { line: i + 1, msg };
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad(format!("bad value {value:?} for {key}")))?
                };
            }
            match key {
                "base_lr" => cfg.base_lr = num!(),
                "warmup_fraction" => cfg.warmup_fraction = num!(),
                "epochs" => cfg.epochs = num!(),
                "patience_epochs" => cfg.patience_epochs = num!(),
                "eval_every_steps" => cfg.eval_every_steps = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "weight_decay" => cfg.weight_decay = num!(),
                "sentence_loss_weight" => cfg.sentence_loss_weight = num!(),
                "min_token_freq" => cfg.min_token_freq = num!(),
                "d_model" => cfg.d_model = num!(),
                "n_heads" => cfg.n_heads = num!(),
                "n_layers" => cfg.n_layers = num!(),
                "d_ff" => cfg.d_ff = num!(),
                "max_len" => cfg.max_len = num!(),
                "dropout_rate" => cfg.dropout_rate = num!(),
                "seeds" => {
                    cfg.seeds = value
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(format!("bad seed list {value:?}")))?;
                }
                "mode" => {
                    site =
                        Some(InjectionSite::parse(value).map_err(|e| bad(e.to_string()))?)
                }
                "channels" => {
                    channels = Some(Channels::parse(value).map_err(|e| bad(e.to_string()))?)
                }
                "run_kind" => {
                    cfg.run_kind = RunKind::parse(value).map_err(|e| bad(e.to_string()))?
                }
                "head_kind" => {
                    cfg.head_kind = HeadKind::parse(value).map_err(|e| bad(e.to_string()))?
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        if site.is_some() || channels.is_some() {
            cfg.set_mode(site.unwrap_or(InjectionSite::None), channels)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a site with optional channel flags; defaults to the label
    /// channel when a site other than `none` is selected bare.
    pub fn set_mode(
        &mut self,
        site: InjectionSite,
        channels: Option<Channels>,
    ) -> Result<(), TrainConfigError> {
        let channels = channels.unwrap_or(match site {
            InjectionSite::None => Channels { use_label: false, use_pos: false },
            _ => Channels::LABEL,
        });
        self.mode = InjectionMode::new(site, channels)
            .map_err(|e| TrainConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainConfigError> {
        if self.epochs == 0
            || self.patience_epochs == 0
            || self.eval_every_steps == 0
            || self.batch_size == 0
            || self.seeds.is_empty()
        {
            return Err(TrainConfigError::Invalid("all counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainConfigError::Invalid(format!(
                "warmup_fraction {} outside [0,1)",
                self.warmup_fraction
            )));
        }
        if self.patience_epochs > self.epochs {
            return Err(TrainConfigError::Invalid(format!(
                "patience {} exceeds epochs {}",
                self.patience_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        n_tokens: usize,
        n_pos: usize,
        n_labels: usize,
        n_tags: usize,
    ) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            n_tokens,
            n_pos,
            n_labels: n_labels.max(1),
            n_tags,
        }
    }

    /// One line summarizing the result-table cell this config belongs to.
    pub fn cell_name(&self) -> String {
        format!(
            "mode={} channels={} run_kind={} head={}",
            self.mode.site.name(),
            self.mode.channels.name(),
            self.run_kind.name(),
            self.head_kind.name()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_values() {
        let c = TrainConfig::default();
        assert_eq!(c.base_lr, 5e-5);
        assert_eq!(c.epochs, 30);
        assert_eq!(c.patience_epochs, 5);
        assert_eq!(c.eval_every_steps, 500);
        assert_eq!(c.seeds.len(), 3);
    }

    #[test]
    fn parse_round() {
        let c = TrainConfig::parse(
            "base_lr = 0.001\nmode = classifier\nchannels = label,pos\nhead_kind = softmax\nseeds = 7,8\n",
        )
        .unwrap();
        assert_eq!(c.base_lr, 0.001);
        assert_eq!(c.mode.site, InjectionSite::Classifier);
        assert!(c.mode.channels.use_pos);
        assert_eq!(c.head_kind, HeadKind::Softmax);
        assert_eq!(c.seeds, vec![7, 8]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(TrainConfig::parse("learning_rate = 0.1\n").is_err());
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(TrainConfig::parse("epochs = 0\n").is_err());
        assert!(TrainConfig::parse("epochs = 3\npatience_epochs = 5\n").is_err());
        assert!(TrainConfig::parse("warmup_fraction = 1.0\n").is_err());
    }
}
