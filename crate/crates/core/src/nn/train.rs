//! Two-phase training: head-only with a frozen backbone, then fine-tuning
//! of the top backbone layers at a small learning rate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::MicroNet;
use super::tensor::Tensor;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::threshold;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions<T> {
    pub freeze_epochs: usize,
    pub finetune_epochs: usize,
    pub head_learning_rate: T,
    pub finetune_learning_rate: T,
    pub batch_size: usize,
    /// Parameterized backbone layers (from the top) unfrozen in phase 2.
    pub unfreeze_layers: usize,
    /// With validation data, ends training on the parameters of the epoch
    /// with the lowest validation loss (earliest on ties).
    pub restore_best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Freeze,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Stacks single-channel images into an `[N, 1, H, W]` batch.
pub fn to_batch<T: Scalar>(images: &[&Image<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::shape("batch", "images differ in size"));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Inference-mode probabilities, evaluated in chunks.
pub fn predict<T: Scalar>(net: &MicroNet<T>, images: &[&Image<T>]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let cache = net.infer(&to_batch(chunk)?)?;
        out.extend_from_slice(cache.probabilities());
    }
    Ok(out)
}

fn evaluate<T: Scalar>(net: &MicroNet<T>, images: &[&Image<T>], labels: &[Label]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
        let cache = net.infer(&to_batch(chunk)?)?;
        loss += net.loss(&cache, lab)?.as_f64() * chunk.len() as f64;
        correct += cache
            .probabilities()
            .iter()
            .zip(lab)
            .filter(|(&p, &y)| threshold(p, T::lit(0.5)) == y)
            .count();
    }
    let n = images.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn run_epoch<T: Scalar, R: Rng>(
    net: &mut MicroNet<T>,
    images: &[&Image<T>],
    labels: &[Label],
    batch_size: usize,
    lr: T,
    rng: &mut R,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let imgs: Vec<&Image<T>> = chunk.iter().map(|&i| images[i]).collect();
        let labs: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
        let cache = net.forward(&to_batch(&imgs)?, true, rng)?;
        let loss = net.loss(&cache, &labs)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("training loss is {loss}")));
        }
        total += loss.as_f64() * chunk.len() as f64;
        let grads = net.backward(&cache, &labs)?;
        net.adam_step(&grads, lr)?;
    }
    Ok(total / images.len() as f64)
}

/// Phase 1 trains the head with the backbone frozen; phase 2 additionally
/// unfreezes the configured top backbone layers. Shuffling and dropout draw
/// from `rng` in epoch order. Every epoch runs; `restore_best` only picks
/// which epoch's parameters are kept.
pub fn train_two_phase<T: Scalar, R: Rng>(
    net: &mut MicroNet<T>,
    train: (&[&Image<T>], &[Label]),
    val: Option<(&[&Image<T>], &[Label])>,
    opts: &TrainOptions<T>,
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    let (images, labels) = train;
    if images.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if images.len() != labels.len() {
        return Err(Error::shape("train", "images and labels differ in length"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut history = Vec::new();
    let mut best: Option<(f64, MicroNet<T>)> = None;
    let phases = [
        (Phase::Freeze, opts.freeze_epochs, opts.head_learning_rate),
        (Phase::Finetune, opts.finetune_epochs, opts.finetune_learning_rate),
    ];
    for (phase, epochs, lr) in phases {
        match phase {
            Phase::Freeze => net.freeze_backbone(),
            Phase::Finetune => net.unfreeze_top(opts.unfreeze_layers),
        }
        for epoch in 0..epochs {
            let train_loss = run_epoch(net, images, labels, opts.batch_size, lr, rng)?;
            let (val_loss, val_accuracy) = match val {
                Some((vi, vl)) if !vi.is_empty() => {
                    let (l, a) = evaluate(net, vi, vl)?;
                    (Some(l), Some(a))
                }
                _ => (None, None),
            };
            if let Some(l) = val_loss.filter(|_| opts.restore_best) {
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    best = Some((l, net.clone()));
                }
            }
            history.push(EpochRecord {
                phase,
                epoch,
                train_loss,
                val_loss,
                val_accuracy,
            });
        }
    }
    if let Some((_, kept)) = best {
        *net = kept;
    }
    Ok(history)
}
