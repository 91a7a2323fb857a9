use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_size: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale encoder: h=128, 2 layers, 4 heads, feed-forward 512.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            hidden: 128,
            layers: 2,
            heads: 4,
            ff_size: 512,
            max_seq: 33,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("heads", "must divide hidden");
        }
        if self.layers == 0 {
            return bad("layers", "must be positive");
        }
        if self.ff_size == 0 {
            return bad("ff_size", "must be positive");
        }
        if self.max_seq < 3 {
            return bad("max_seq", "must be at least 3");
        }
        if self.vocab_size < crate::tokenizer::SPECIAL_TOKENS.len() {
            return bad("vocab_size", "smaller than the special-token set");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Closed-form number of scalar parameters (decoder weights are tied to
    /// the word embeddings and not counted twice).
    pub fn parameter_count(&self) -> usize {
        let (h, f, v, s) = (self.hidden, self.ff_size, self.vocab_size, self.max_seq);
        let embeddings = v * h + s * h + 2 * h;
        let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        let head = (h * h + h) + 2 * h + v;
        embeddings + self.layers * layer + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// From the initial rate down to zero over all steps, no warmup.
    LinearDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub mask_token_prob: f64,
    pub random_token_prob: f64,
    pub keep_prob: f64,
    /// Allow role-tag tokens to be selected for prediction. Off by default,
    /// matching evaluation, which never masks tags.
    pub mask_role_tags: bool,
}

impl TrainConfig {
    /// From-scratch recipe used for the desk-scale experiment.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            schedule: LrSchedule::LinearDecay,
            epochs: 30,
            seed: 42,
            mask_ratio: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
            keep_prob: 0.1,
            mask_role_tags: false,
        }
    }

    /// Fine-tuning recipe for a pretrained model: lr 1e-5, batch 384,
    /// 50 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 384,
            learning_rate: 1e-5,
            epochs: 50,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} is invalid", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, format!("{b} not in [0, 1)"));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio", format!("{} not in (0, 1)", self.mask_ratio));
        }
        let probs = [self.mask_token_prob, self.random_token_prob, self.keep_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("mask_token_prob", "replacement probabilities must be in [0, 1]".into());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("keep_prob", format!("replacement probabilities sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn mask_policy(&self) -> super::MaskPolicy {
        super::MaskPolicy {
            mask_ratio: self.mask_ratio,
            mask_token_prob: self.mask_token_prob,
            random_token_prob: self.random_token_prob,
            mask_role_tags: self.mask_role_tags,
        }
    }
}
