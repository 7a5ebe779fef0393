use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::builder::{CurriculumStage, LrSchedule};
use crate::error::{LiftError, Result};
use crate::objectives::LossWeights;

/// Run configuration with flat, documented keys. Environment variables named
/// `LIFT_<KEY>` (upper case) override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub stage1_rank: usize,
    pub stage1_lr: f64,
    pub stage1_schedule: LrSchedule,
    pub stage1_shots: usize,
    pub stage2_rank: usize,
    pub stage2_lr: f64,
    pub stage2_schedule: LrSchedule,
    pub stage2_shots: usize,
    pub stage3_rank: usize,
    pub stage3_lr: f64,
    pub stage3_schedule: LrSchedule,
    pub stage3_shots: usize,
    pub lora_dropout: f64,
    pub lambda_ce: f64,
    pub lambda_out: f64,
    pub lambda_cls: f64,
    pub lambda_hist: f64,
    pub gamma: f64,
    pub class_weighting: bool,
    pub conditioning: bool,
    pub separate_history_head: bool,
    pub fewshot_in_prompt_ce: bool,
    pub max_tokens: usize,
    pub include_history: bool,
    pub history_labels: bool,
    /// Token vocabulary cap for the fitted tokenizer.
    pub vocab_words: usize,
    pub model_layers: usize,
    pub model_d: usize,
    pub model_heads: usize,
    pub model_ffn: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let [s1, s2, s3] = CurriculumStage::defaults();
        let w = LossWeights::default();
        Self {
            seed: 17,
            epochs: 2,
            grad_accum: 32,
            batch_size: 1,
            grad_clip: 1.0,
            val_fraction: 0.1,
            checkpoint_every: 25,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
            stage1_rank: s1.rank,
            stage1_lr: s1.lr,
            stage1_schedule: s1.schedule,
            stage1_shots: s1.shots,
            stage2_rank: s2.rank,
            stage2_lr: s2.lr,
            stage2_schedule: s2.schedule,
            stage2_shots: s2.shots,
            stage3_rank: s3.rank,
            stage3_lr: s3.lr,
            stage3_schedule: s3.schedule,
            stage3_shots: s3.shots,
            lora_dropout: 0.05,
            lambda_ce: w.ce,
            lambda_out: w.out,
            lambda_cls: w.cls,
            lambda_hist: w.hist,
            gamma: w.gamma,
            class_weighting: true,
            conditioning: true,
            separate_history_head: true,
            fewshot_in_prompt_ce: true,
            max_tokens: crate::builder::DEFAULT_MAX_TOKENS,
            include_history: true,
            history_labels: true,
            vocab_words: 4000,
            model_layers: 4,
            model_d: 64,
            model_heads: 4,
            model_ffn: 256,
        }
    }
}

impl TrainConfig {
    /// Read a TOML file (missing keys take defaults), then apply `LIFT_*` overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LiftError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn from_toml_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let parsed: Self = toml::from_str(text).map_err(|e| LiftError::Config(e.to_string()))?;
        let mut table =
            toml::Value::try_from(&parsed).map_err(|e| LiftError::Config(e.to_string()))?;
        let map = table.as_table_mut().expect("config serializes to a table");
        for (k, v) in env {
            let Some(key) = k.strip_prefix("LIFT_") else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            let Some(slot) = map.get_mut(&key) else {
                continue;
            };
            *slot = parse_like(slot, &v)
                .ok_or_else(|| LiftError::Config(format!("bad value for {k}: {v}")))?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| LiftError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LiftError::Config(m.to_string()));
        if self.grad_accum == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("grad_accum, epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        for v in [
            self.lambda_ce,
            self.lambda_out,
            self.lambda_cls,
            self.lambda_hist,
            self.gamma,
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad("loss weights and gamma must be finite and nonnegative");
            }
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad("lora_dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn stage(&self, k: u8) -> Result<CurriculumStage> {
        let defaults = CurriculumStage::defaults();
        let base = defaults
            .iter()
            .find(|s| s.stage == k)
            .ok_or(LiftError::MissingStageShard(k))?
            .clone();
        let (rank, lr, schedule, shots) = match k {
            1 => (
                self.stage1_rank,
                self.stage1_lr,
                self.stage1_schedule,
                self.stage1_shots,
            ),
            2 => (
                self.stage2_rank,
                self.stage2_lr,
                self.stage2_schedule,
                self.stage2_shots,
            ),
            _ => (
                self.stage3_rank,
                self.stage3_lr,
                self.stage3_schedule,
                self.stage3_shots,
            ),
        };
        Ok(CurriculumStage {
            rank,
            lr,
            schedule,
            shots,
            ..base
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ce: self.lambda_ce,
            out: self.lambda_out,
            cls: self.lambda_cls,
            hist: self.lambda_hist,
            gamma: self.gamma,
            class_weights: None,
        }
    }
}

fn parse_like(existing: &toml::Value, raw: &str) -> Option<toml::Value> {
    use toml::Value;
    Some(match existing {
        Value::Integer(_) => Value::Integer(raw.parse().ok()?),
        Value::Float(_) => Value::Float(raw.parse().ok()?),
        Value::Boolean(_) => Value::Boolean(raw.parse().ok()?),
        _ => Value::String(raw.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_stage_table() {
        let c = TrainConfig::default();
        let s: Vec<_> = (1..=3).map(|k| c.stage(k).unwrap()).collect();
        assert_eq!(
            s.iter()
                .map(|s| (s.rank, s.lr, s.schedule, s.shots))
                .collect::<Vec<_>>(),
            vec![
                (4, 2e-4, LrSchedule::Cosine, 1),
                (8, 1e-4, LrSchedule::Cosine, 2),
                (16, 5e-5, LrSchedule::Constant, 3)
            ]
        );
        assert_eq!(
            (c.grad_accum, c.grad_clip, c.checkpoint_every, c.epochs),
            (32, 1.0, 25, 2)
        );
        assert_eq!(c.val_fraction, 0.1);
    }

    #[test]
    fn file_values_then_env_overrides() {
        let text = "stage1_lr = 0.001\ngrad_accum = 8\nstage3_schedule = \"cosine\"\n";
        let env = vec![
            ("LIFT_GRAD_ACCUM".to_string(), "4".to_string()),
            ("LIFT_CONDITIONING".to_string(), "false".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = TrainConfig::from_toml_with_env(text, env).unwrap();
        assert_eq!(c.stage1_lr, 0.001);
        assert_eq!(c.grad_accum, 4);
        assert!(!c.conditioning);
        assert_eq!(c.stage3_schedule, LrSchedule::Cosine);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            TrainConfig::from_toml_with_env("nonsense = 1", vec![]),
            Err(LiftError::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_toml_with_env("", vec![("LIFT_EPOCHS".into(), "two".into())]),
            Err(LiftError::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_toml_with_env("grad_accum = 0", vec![]),
            Err(LiftError::Config(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(
            TrainConfig::from_toml_with_env(&c.to_toml(), vec![]).unwrap(),
            c
        );
    }
}
