use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::episode::{sample_episode, Episode};
use super::eval::accuracy_over;
use super::model::{batch_grad, Context, Model};
use super::optim::{lr_schedule, AdamW};
use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// Validation episodes are drawn from their own stream so that the training
/// stream does not depend on whether validation is enabled.
const VALIDATION_SEED_OFFSET: u64 = 0x005e_ed0f_7a11;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Validation accuracy, on steps where validation ran.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricRecord>,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

/// CSV with header `step,lr,loss,accuracy`.
pub fn metrics_csv(log: &[MetricRecord]) -> String {
    let mut out = String::from("step,lr,loss,accuracy\n");
    for r in log {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, acc).expect("write to string");
    }
    out
}

pub fn write_metrics(path: &Path, log: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

/// Episodic training loop: sample, score, back-propagate, AdamW step.
/// With a validation set, accuracy is measured every epoch, the best model is
/// kept, and training stops after `patience` epochs without improvement.
pub fn train(
    cfg: &TrainConfig,
    mut model: Model,
    ctx: &Context<'_>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);

    let val_episodes: Vec<Episode> = match val_set {
        Some(ds) if cfg.val_episodes > 0 => {
            let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_SEED_OFFSET);
            let mut eps = Vec::with_capacity(cfg.val_episodes);
            for _ in 0..cfg.val_episodes {
                let mut ep = sample_episode(ds, cfg.c, cfg.n, cfg.q, &mut vrng)?;
                ctx.attach_retrieval(&mut ep);
                eps.push(ep);
            }
            eps
        }
        _ => Vec::new(),
    };

    let mut log = Vec::with_capacity(cfg.total_steps());
    let mut best: Option<(f64, Model)> = None;
    let mut bad_epochs = 0;
    let mut stopped_early = false;

    for step in 1..=cfg.total_steps() {
        let lr = lr_schedule(step, cfg.max_lr, cfg.warmup_steps, cfg.decay_steps);
        let mut batch = Vec::with_capacity(cfg.batch_episodes);
        for _ in 0..cfg.batch_episodes {
            let mut ep = sample_episode(train_set, cfg.c, cfg.n, cfg.q, &mut rng)
                .map_err(|e| e.at_step(step))?;
            ctx.attach_retrieval(&mut ep);
            batch.push(ep);
        }
        let g = batch_grad(&model, ctx, &batch).map_err(|e| e.at_step(step))?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite.at_step(step));
        }
        if g.clamped > 0 {
            log::warn!(
                "step {step}: {} queries hit the probability floor",
                g.clamped
            );
        }
        opt.step(model.tensors_mut(), g.grads.tensors(), lr);
        model.encoder.step = step as u64;

        let mut record = MetricRecord {
            step,
            lr,
            loss: g.loss,
            accuracy: None,
        };
        if !val_episodes.is_empty() && step % cfg.episodes_per_epoch == 0 {
            let acc = accuracy_over(&model, ctx, &val_episodes)?.mean;
            record.accuracy = Some(acc);
            log::info!("step {step}: loss {:.4} val accuracy {acc:.4}", g.loss);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
            }
            log.push(record);
            if cfg.patience > 0 && bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
            continue;
        }
        log.push(record);
    }

    let (best_val, model) = match best {
        Some((acc, m)) => (Some(acc), m),
        None => (None, model),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_val,
        stopped_early,
    })
}
