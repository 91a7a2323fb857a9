use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::collate::mask_collate;
use super::config::{LrSchedule, TrainConfig};
use super::model::{MlmModel, Params, TrainSeq};
use crate::corpus::Mode;
use crate::error::{Error, Result};
use crate::tokenizer::TokenSeq;

/// Sequences per gradient work unit. The partition of a batch into units is
/// fixed, so results do not depend on the number of threads.
pub const SUB_BATCH: usize = 8;

const DROPOUT_SALT: u64 = 0x5eed_d20b;

/// Learning rate at optimizer step `step` (0-based) of `total`.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::LinearDecay => cfg.learning_rate * (1.0 - step as f64 / total.max(1) as f64),
    }
}

struct AdamW {
    m: Params<f32>,
    v: Params<f32>,
    t: i32,
}

impl AdamW {
    fn new(model: &MlmModel<f32>) -> Self {
        AdamW {
            m: Params::zeros(&model.config),
            v: Params::zeros(&model.config),
            t: 0,
        }
    }

    /// Adam moments with bias correction; weight decay is applied to
    /// `.weight` tensors directly rather than through the gradient.
    fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let step = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = cfg.epsilon as f32;
        let decay = (lr * cfg.weight_decay) as f32;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((name, mut p), (_, g)), ((_, mut m), (_, mut v))) in tensors {
            let decayed = name.ends_with(".weight");
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    if decayed {
                        *p -= decay * *p;
                    }
                    *p -= step * *m / (v.sqrt() / c2_sqrt + eps);
                });
        }
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss per selected token, one entry per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Trains `ckpt` on `texts` with the masked-LM objective.
///
/// Each step masks a shuffled batch, computes gradients over fixed
/// sub-batches in parallel, sums them in sub-batch order, clips by global
/// norm and applies AdamW. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train<S: AsRef<str>>(
    ckpt: &Checkpoint,
    texts: &[S],
    cfg: &TrainConfig,
    mode: Option<Mode>,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let max_seq = ckpt.config().max_seq;
    let seqs: Vec<TokenSeq> = texts.iter().map(|t| ckpt.vocab.encode(t.as_ref(), max_seq)).collect();
    let truncated = texts
        .iter()
        .zip(&seqs)
        .filter(|(t, s)| ckpt.vocab.tokenize(t.as_ref()).len() + 2 > s.len)
        .count();
    if truncated > 0 {
        log::warn!("{truncated} training sequences truncated to {max_seq} tokens");
    }

    let mut out = ckpt.clone();
    let mut opt = AdamW::new(&out.model);
    let policy = cfg.mask_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_tokens) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenSeq> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let masked = mask_collate(&batch, &out.vocab, &policy, &mut rng);
            let selected = masked.selected();
            let lr = learning_rate(cfg, step, total);
            step += 1;
            if selected == 0 {
                continue;
            }
            let scale = 1.0 / selected as f32;
            let model = &out.model;
            let parts: Vec<(f32, Params<f32>)> = masked
                .seqs
                .par_chunks(SUB_BATCH)
                .enumerate()
                .map(|(unit, part)| {
                    let views: Vec<TrainSeq> = part.iter().map(|s| s.train_seq()).collect();
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
                    drop_rng.set_stream(((step as u64) << 20) | unit as u64);
                    let (loss, _, grads) = model.loss_and_grad(&views, scale, Some(&mut drop_rng));
                    (loss, grads)
                })
                .collect();
            let mut parts = parts.into_iter();
            let (mut loss_sum, mut grads) = parts.next().expect("nonempty batch");
            for (l, g) in parts {
                loss_sum += l;
                grads.add_assign(&g);
            }
            let loss = f64::from(loss_sum) / selected as f64;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step,
                    message: format!("non-finite loss {loss} at learning rate {lr:.3e}"),
                });
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm = f64::from(grads.sum_of_squares()).sqrt();
                if norm > max_norm {
                    grads.scale((max_norm / (norm + 1e-6)) as f32);
                }
            }
            opt.step(&mut out.model.params, &grads, cfg, lr);
            epoch_loss += f64::from(loss_sum);
            epoch_tokens += selected;
        }
        let mean = epoch_loss / epoch_tokens.max(1) as f64;
        log::info!("epoch {}/{}: loss {mean:.4}", epoch + 1, cfg.epochs);
        trace.push(mean);
    }

    out.meta.seed = cfg.seed;
    out.meta.epochs_completed += cfg.epochs;
    out.meta.loss_trace.extend_from_slice(&trace);
    out.meta.final_loss = trace.last().copied().or(out.meta.final_loss);
    if mode.is_some() {
        out.meta.mode = mode;
    }
    Ok((
        out,
        TrainReport {
            loss_trace: trace,
            steps: step,
        },
    ))
}
