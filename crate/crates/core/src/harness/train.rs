//! Mini-batch training loops for both networks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamParams};
use super::config::TrainConfig;
use super::models::{CachedFeatures, ClsModel, SegModel, INFER_CHUNK};
use crate::backbone::BackboneConfig;
use crate::data::{batch_tensor, shuffled_indices, ClsSample, Image, SegSample};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::metrics::{tally, ConfusionCounts};
use crate::msfusion::bce_loss;
use crate::nn::{Forward, ParamStore};
use crate::tensor::Tensor;
use crate::transunet::{seg_loss, threshold_logits, UNetConfig};

/// Stream offsets so that initialisation, splitting and shuffling draw from
/// independent generators of one seed.
const SPLIT_STREAM: u64 = 0x5eed_0001;
const SHUFFLE_STREAM: u64 = 0x5eed_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Validation Dice (segmentation) or accuracy (classification).
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub curve: Vec<EpochStats>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub seconds: f64,
    pub images_seen: usize,
}

impl TrainLog {
    pub fn seconds_per_image(&self) -> f64 {
        self.seconds / self.images_seen.max(1) as f64
    }
}

/// Seeded `(train, val)` index split with `round(fraction·n)` validation items.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let idx = shuffled_indices(n, seed ^ SPLIT_STREAM);
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    (train.to_vec(), val.to_vec())
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Keeps the lowest-validation-loss snapshot.
struct Best {
    loss: f64,
    epoch: usize,
    store: Option<ParamStore<f32>>,
}

impl Best {
    fn new() -> Self {
        Best {
            loss: f64::INFINITY,
            epoch: 0,
            store: None,
        }
    }

    fn offer(&mut self, epoch: usize, val_loss: Option<f64>, store: &ParamStore<f32>) {
        match val_loss {
            Some(l) if l < self.loss => {
                self.loss = l;
                self.epoch = epoch;
                self.store = Some(store.clone());
            }
            Some(_) => {}
            None => {
                self.epoch = epoch;
                self.store = None;
            }
        }
    }

    fn restore(self, store: &mut ParamStore<f32>) -> Result<usize> {
        if let Some(best) = self.store {
            store.copy_values_from(&best)?;
        }
        Ok(self.epoch)
    }
}

fn image_refs<'a, S>(
    samples: &'a [S],
    idx: &[usize],
    get: impl Fn(&'a S) -> &'a Image,
) -> Vec<&'a Image> {
    idx.iter().map(|&i| get(&samples[i])).collect()
}

fn ensure_side(images: &[&Image], side: usize, what: &str) -> Result<()> {
    match images.iter().find(|i| i.height != side || i.width != side) {
        Some(bad) => Err(Error::dim(
            "train",
            format!(
                "{what}: profile expects {side}x{side}, got {}x{}",
                bad.height, bad.width
            ),
        )),
        None => Ok(()),
    }
}

/// Trains a segmentation network on `train`, holding out a validation split.
pub fn train_seg(
    cfg: &TrainConfig,
    seed: u64,
    unet: UNetConfig,
    train: &[SegSample],
) -> Result<(SegModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("segmentation training set is empty".into()));
    }
    let all: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    ensure_side(&all, unet.input_side, "segmentation image")?;
    let mut model = SegModel::new(unet, seed)?;
    let (tr, val) = split_indices(train.len(), cfg.val_fraction, seed);
    let mut opt = Adam::new(AdamParams::with_lr(cfg.lr));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut order = tr.clone();
    let mut curve = Vec::new();
    let mut best = Best::new();
    let mut images_seen = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let x: Tensor<f32> = batch_tensor(image_refs(train, batch, |s| &s.image))?;
            let mask: Vec<f32> = batch
                .iter()
                .flat_map(|&i| train[i].mask.pixels.iter().copied())
                .collect();
            let f = Forward::new(&model.store, true);
            let step = || -> Result<_> {
                let xv = f.tape().constant(&x)?;
                let z = model.net.forward(&f, xv)?;
                let loss = seg_loss(&f, z, &mask, cfg.dice_weight)?;
                let value = f64::from(f.tape().value(loss)[0]);
                check_loss(epoch, value)?;
                Ok((value, f.backward(loss)?))
            };
            let (value, grads) = step().map_err(|e| diverged(epoch, e))?;
            let pending = f.finish();
            model.store.apply(pending, Some(&grads))?;
            opt.step(&mut model.store)?;
            loss_sum += value * batch.len() as f64;
            images_seen += batch.len();
        }
        let train_loss = loss_sum / tr.len() as f64;
        let (val_loss, val_score) = if val.is_empty() {
            (None, None)
        } else {
            let (l, d) = seg_validate(&model, train, &val, cfg).map_err(|e| diverged(epoch, e))?;
            (Some(l), Some(d))
        };
        if let Some(l) = val_loss {
            check_loss(epoch, l)?;
        }
        best.offer(epoch, val_loss, &model.store);
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_score,
        });
        if let (Some(target), Some(d)) = (cfg.stop_at_val_dice, val_score) {
            if d >= target {
                break;
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let best_epoch = best.restore(&mut model.store)?;
    Ok((
        model,
        TrainLog {
            curve,
            best_epoch,
            seconds,
            images_seen,
        },
    ))
}

/// Validation `(mean BCE, pixel Dice)`.
fn seg_validate(
    model: &SegModel,
    samples: &[SegSample],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut counts = ConfusionCounts::default();
    for chunk in idx.chunks(INFER_CHUNK) {
        let images = image_refs(samples, chunk, |s| &s.image);
        let logits = model.logits(&images)?;
        for (z, &i) in logits.iter().zip(chunk) {
            let mask = &samples[i].mask.pixels;
            let mut l = 0.0;
            for (&zv, &y) in z.iter().zip(mask) {
                let (zv, y) = (f64::from(zv), f64::from(y));
                l += zv.max(0.0) - zv * y + (1.0 + (-zv.abs()).exp()).ln();
            }
            loss_sum += l / mask.len() as f64;
            counts.merge(&tally(
                &threshold_logits(z, cfg.threshold),
                &samples[i].mask.to_bits(),
            )?);
        }
    }
    let dice = crate::metrics::metric_suite(&counts)?.dice;
    Ok((loss_sum / idx.len() as f64, dice))
}

/// Pixel-level confusion counts of predicted masks over a labelled set.
pub fn evaluate_seg(
    model: &SegModel,
    samples: &[SegSample],
    threshold: f64,
) -> Result<ConfusionCounts> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let masks = model.predict_masks(&images, threshold)?;
    let mut counts = ConfusionCounts::default();
    for (m, s) in masks.iter().zip(samples) {
        counts.merge(&tally(&m.to_bits(), &s.mask.to_bits())?);
    }
    Ok(counts)
}

/// Builds the classifier described by `cfg`, loading a backbone checkpoint
/// when one is configured.
pub fn build_cls_model(cfg: &TrainConfig, seed: u64) -> Result<ClsModel> {
    let bb = BackboneConfig {
        frozen: cfg.backbone_frozen,
        ..BackboneConfig::for_profile(cfg.profile)
    };
    let mut model = ClsModel::new(bb, cfg.fusion_config(), seed)?;
    if let Some(path) = &cfg.backbone_checkpoint {
        let ckpt = Checkpoint::load(path)?;
        model
            .backbone
            .load_freeze(&mut model.store, &ckpt, cfg.backbone_frozen)?;
        model.backbone_config.frozen = cfg.backbone_frozen;
    }
    Ok(model)
}

/// Trains the fusion classifier. A frozen backbone is evaluated once per
/// image and its maps cached; otherwise it is trained end to end.
pub fn train_cls(
    cfg: &TrainConfig,
    seed: u64,
    train: &[ClsSample],
) -> Result<(ClsModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid(
            "classification training set is empty".into(),
        ));
    }
    let mut model = build_cls_model(cfg, seed)?;
    let all: Vec<&Image> = train.iter().map(|s| &s.image).collect();
    ensure_side(&all, model.side(), "classification image")?;
    let (tr, val) = split_indices(train.len(), cfg.val_fraction, seed);
    let frozen = model.backbone_config.frozen;
    let cache: Option<Vec<CachedFeatures>> = if frozen {
        Some(model.extract_features(&all)?)
    } else {
        None
    };
    let labels: Vec<f32> = train.iter().map(|s| f32::from(s.label)).collect();
    let mut opt = Adam::new(AdamParams::with_lr(cfg.lr));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut order = tr.clone();
    let mut curve = Vec::new();
    let mut best = Best::new();
    let mut images_seen = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let y: Vec<f32> = batch.iter().map(|&i| labels[i]).collect();
            let f = Forward::new(&model.store, true);
            let step = || -> Result<_> {
                let tape = f.tape();
                let out = match &cache {
                    Some(cache) => {
                        let items: Vec<&CachedFeatures> =
                            batch.iter().map(|&i| &cache[i]).collect();
                        let [t2, t3, t4] = model.stack_features(&items)?;
                        model.fusion.forward(
                            &f,
                            tape.constant(&t2)?,
                            tape.constant(&t3)?,
                            tape.constant(&t4)?,
                        )?
                    }
                    None => {
                        let x: Tensor<f32> = batch_tensor(image_refs(train, batch, |s| &s.image))?;
                        let fm = model.backbone.forward(&f, tape.constant(&x)?)?;
                        model.fusion.forward(&f, fm.b2, fm.b3, fm.b4)?
                    }
                };
                let loss = bce_loss(&f, out.prob, &y)?;
                let value = f64::from(tape.value(loss)[0]);
                check_loss(epoch, value)?;
                Ok((value, f.backward(loss)?))
            };
            let (value, grads) = step().map_err(|e| diverged(epoch, e))?;
            let pending = f.finish();
            model.store.apply(pending, Some(&grads))?;
            opt.step(&mut model.store)?;
            loss_sum += value * batch.len() as f64;
            images_seen += batch.len();
        }
        let train_loss = loss_sum / tr.len() as f64;
        let (val_loss, val_score) = if val.is_empty() {
            (None, None)
        } else {
            let probs = match &cache {
                Some(cache) => {
                    let feats: Vec<CachedFeatures> =
                        val.iter().map(|&i| cache[i].clone()).collect();
                    model.probs_from_features(&feats)
                }
                None => model.predict_probs(&image_refs(train, &val, |s| &s.image)),
            }
            .map_err(|e| diverged(epoch, e))?;
            let y: Vec<f32> = val.iter().map(|&i| labels[i]).collect();
            let (l, acc) = prob_loss_and_accuracy(&probs, &y);
            check_loss(epoch, l)?;
            (Some(l), Some(acc))
        };
        best.offer(epoch, val_loss, &model.store);
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_score,
        });
    }
    let seconds = start.elapsed().as_secs_f64();
    let best_epoch = best.restore(&mut model.store)?;
    Ok((
        model,
        TrainLog {
            curve,
            best_epoch,
            seconds,
            images_seen,
        },
    ))
}

/// Mean clamped BCE and accuracy at 0.5.
fn prob_loss_and_accuracy(probs: &[f32], labels: &[f32]) -> (f64, f64) {
    let eps = crate::msfusion::BCE_EPS;
    let mut loss = 0.0;
    let mut correct = 0;
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = f64::from(p).clamp(eps, 1.0 - eps);
        let y = f64::from(y);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        correct += usize::from((p >= 0.5) == (y == 1.0));
    }
    let n = probs.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Per-sample confusion counts at probability threshold 0.5.
pub fn evaluate_cls(model: &ClsModel, samples: &[ClsSample]) -> Result<ConfusionCounts> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let probs = model.predict_probs(&images)?;
    let pred: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let truth: Vec<u8> = samples.iter().map(|s| s.label).collect();
    tally(&pred, &truth)
}
