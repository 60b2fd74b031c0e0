//! The semi-supervised training loop: supervised mini-batches every epoch,
//! EMA-teacher pseudo-label mini-batches after the start epoch, AdamW
//! updates, per-epoch validation and history logging.
//!
//! Determinism: every random choice (batch order, transform seeds) is
//! drawn from a stream derived from `(rng_seed, epoch, phase)`, so the
//! labeled phase consumes the same randomness whether or not an unlabeled
//! phase runs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_transform, SpatialTransform};
use crate::ema::TeacherState;
use crate::error::{Result, SegError};
use crate::losses::{combined_loss_with_grad, dice_score, LossConfig};
use crate::network::SegmentationModel;
use crate::optim::AdamW;
use crate::seed;
use crate::volume::{DatasetSplit, LabeledSample, UnlabeledSample, Volume};

const STREAM_LABELED_ORDER: u64 = 0x11;
const STREAM_LABELED_TRANSFORM: u64 = 0x22;
const STREAM_UNLABELED_ORDER: u64 = 0x33;
const STREAM_UNLABELED_TRANSFORM: u64 = 0x44;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Unlabeled training starts after this epoch (exclusive).
    pub unlab_start_epoch: usize,
    /// EMA smoothing factor.
    pub mu: f64,
    /// Pseudo-label binarization cutoff.
    pub pseudo_threshold: f64,
    pub loss: LossConfig,
    /// Transform labeled volumes and their masks jointly.
    pub augment_labeled: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            unlab_start_epoch: 20,
            mu: 0.95,
            pseudo_threshold: 0.5,
            loss: LossConfig::default(),
            augment_labeled: false,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SegError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.unlab_start_epoch > self.epochs {
            return Err(SegError::InvalidConfig(format!(
                "unlab_start_epoch {} exceeds epochs {}",
                self.unlab_start_epoch, self.epochs
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(SegError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(SegError::InvalidConfig(format!("mu {} outside [0, 1]", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_labeled: f64,
    /// Present only for epochs past the start epoch with unlabeled data.
    pub loss_unlabeled: Option<f64>,
    pub val_dice: Vec<f64>,
    pub wall_secs: f64,
    /// Transform seeds drawn this epoch, in draw order.
    pub transform_seeds: Vec<u64>,
    /// Optimizer updates applied this epoch.
    pub updates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformEvent {
    pub epoch: usize,
    pub phase: String,
    pub sample: String,
    pub transform: SpatialTransform,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub classes: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub transform_events: Vec<TransformEvent>,
}

impl TrainHistory {
    /// `history.csv` payload: epoch, losses and per-class validation Dice.
    /// The unlabeled column is empty for epochs without an unlabeled phase.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss_labeled,loss_unlabeled");
        for c in &self.classes {
            s.push_str(&format!(",dice_{}", c.to_lowercase()));
        }
        s.push('\n');
        for r in &self.epochs {
            s.push_str(&format!("{},{:.6},", r.epoch, r.loss_labeled));
            if let Some(u) = r.loss_unlabeled {
                s.push_str(&format!("{u:.6}"));
            }
            for d in &r.val_dice {
                s.push_str(&format!(",{d:.6}"));
            }
            s.push('\n');
        }
        s
    }

    /// `transforms.log` payload: one JSON event per line.
    pub fn transforms_log(&self) -> String {
        let mut s = String::new();
        for e in &self.transform_events {
            s.push_str(&serde_json::to_string(e).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn final_val_dice(&self) -> Option<&[f64]> {
        self.epochs.last().map(|r| r.val_dice.as_slice())
    }
}

/// Mutable training state; keeps the model and teacher reachable for
/// checkpoint-on-abort.
pub struct Trainer {
    pub model: SegmentationModel,
    pub teacher: TeacherState,
    pub optimizer: AdamW,
    pub cfg: TrainConfig,
    pub history: TrainHistory,
    epoch: usize,
    labeled_drawn: usize,
    unlabeled_drawn: usize,
}

impl Trainer {
    pub fn new(model: SegmentationModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.loss.validate(model.config.num_classes)?;
        let teacher = TeacherState::init(&model, cfg.mu, cfg.pseudo_threshold)?;
        let optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        let history = TrainHistory {
            classes: model.config.class_names.clone(),
            ..TrainHistory::default()
        };
        Ok(Trainer {
            model,
            teacher,
            optimizer,
            cfg,
            history,
            epoch: 1,
            labeled_drawn: 0,
            unlabeled_drawn: 0,
        })
    }

    /// Positions the internal counters at the start of an epoch (1-based).
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.labeled_drawn = 0;
        self.unlabeled_drawn = 0;
    }

    fn transform_seed(&self, stream: u64, counter: usize) -> u64 {
        seed::mix(
            seed::mix(self.cfg.rng_seed, stream ^ ((self.epoch as u64) << 16)),
            counter as u64,
        )
    }

    fn check_finite(&self, loss: f64, phase: &str, ids: Vec<String>) -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(SegError::NonFiniteLoss {
                epoch: self.epoch,
                phase: phase.to_string(),
                samples: ids,
            })
        }
    }

    /// One supervised mini-batch: optional joint transform of volume and
    /// mask, combined loss, one optimizer update. Returns the pre-update
    /// batch loss.
    pub fn supervised_step(&mut self, batch: &[&LabeledSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(SegError::EmptyDataset("supervised batch".into()));
        }
        let mut volumes: Vec<Volume> = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        if self.cfg.augment_labeled {
            for (i, s) in batch.iter().enumerate() {
                let ts = self.transform_seed(STREAM_LABELED_TRANSFORM, self.labeled_drawn + i);
                let t = sample_transform(ts);
                volumes.push(t.apply_volume(&s.volume)?);
                masks.push(t.apply_mask(&s.mask)?);
                self.history.transform_events.push(TransformEvent {
                    epoch: self.epoch,
                    phase: "labeled".into(),
                    sample: s.id.clone(),
                    transform: t,
                });
                if let Some(r) = self.history.epochs.last_mut() {
                    debug_assert!(r.epoch != self.epoch);
                }
            }
        } else {
            for s in batch {
                volumes.push(s.volume.clone());
                masks.push(s.mask.clone());
            }
        }
        self.labeled_drawn += batch.len();

        let refs: Vec<&Volume> = volumes.iter().collect();
        let (preds, caches) = self.model.forward_training(&refs)?;
        let scale = 1.0 / batch.len() as f64;
        let mut batch_loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (pred, mask) in preds.iter().zip(masks.iter()) {
            let (loss, mut g) = combined_loss_with_grad(pred, mask, &self.cfg.loss)?;
            batch_loss += loss * scale;
            for gv in &mut g {
                *gv *= scale;
            }
            grads.push(g);
        }
        let ids = batch.iter().map(|s| s.id.clone()).collect();
        let batch_loss = self.check_finite(batch_loss, "labeled", ids)?;
        let param_grads = self.model.backward(&caches, &grads)?;
        self.optimizer.step(&mut self.model.params, &param_grads)?;
        Ok(batch_loss)
    }

    /// One pseudo-label mini-batch: a fresh transform per sample, replayed
    /// on the student input and the teacher prediction; combined loss
    /// against the binarized pseudo-label; one optimizer update. The
    /// teacher is read-only here.
    pub fn unsupervised_step(&mut self, batch: &[&UnlabeledSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(SegError::EmptyDataset("unsupervised batch".into()));
        }
        let mut volumes = Vec::with_capacity(batch.len());
        let mut pseudo = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let ts = self.transform_seed(STREAM_UNLABELED_TRANSFORM, self.unlabeled_drawn + i);
            // Both branches rebuild the transform from the same seed; the
            // log carries each branch's copy for the replay check.
            let t_student = sample_transform(ts);
            let t_teacher = sample_transform(ts);
            volumes.push(t_student.apply_volume(&s.volume)?);
            pseudo.push(self.teacher.predict_pseudo_label(&s.volume, &t_teacher)?);
            self.history.transform_events.push(TransformEvent {
                epoch: self.epoch,
                phase: "unlabeled_student".into(),
                sample: s.id.clone(),
                transform: t_student,
            });
            self.history.transform_events.push(TransformEvent {
                epoch: self.epoch,
                phase: "unlabeled_teacher".into(),
                sample: s.id.clone(),
                transform: t_teacher,
            });
        }
        self.unlabeled_drawn += batch.len();

        let refs: Vec<&Volume> = volumes.iter().collect();
        let (preds, caches) = self.model.forward_training(&refs)?;
        let scale = 1.0 / batch.len() as f64;
        let mut batch_loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (pred, target) in preds.iter().zip(pseudo.iter()) {
            let (loss, mut g) = combined_loss_with_grad(pred, target, &self.cfg.loss)?;
            batch_loss += loss * scale;
            for gv in &mut g {
                *gv *= scale;
            }
            grads.push(g);
        }
        let ids = batch.iter().map(|s| s.id.clone()).collect();
        let batch_loss = self.check_finite(batch_loss, "unlabeled", ids)?;
        let param_grads = self.model.backward(&caches, &grads)?;
        self.optimizer.step(&mut self.model.params, &param_grads)?;
        Ok(batch_loss)
    }

    /// Runs the full loop over `cfg.epochs` epochs.
    pub fn run(&mut self, split: &DatasetSplit, val: &[LabeledSample]) -> Result<()> {
        split.validate()?;
        if split.labeled.is_empty() {
            return Err(SegError::EmptyDataset("labeled training pool".into()));
        }
        if val.is_empty() {
            return Err(SegError::EmptyDataset("validation set".into()));
        }
        let b = self.cfg.batch_size;
        for epoch in 1..=self.cfg.epochs {
            let start = Instant::now();
            self.begin_epoch(epoch);
            let mut updates = 0usize;

            // Labeled phase.
            let mut order: Vec<usize> = (0..split.labeled.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(
                self.cfg.rng_seed,
                STREAM_LABELED_ORDER ^ ((epoch as u64) << 16),
            ));
            order.shuffle(&mut rng);
            let mut labeled_loss = 0.0;
            let mut labeled_steps = 0usize;
            for chunk in order.chunks(b) {
                let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &split.labeled[i]).collect();
                labeled_loss += self.supervised_step(&batch)?;
                labeled_steps += 1;
            }
            labeled_loss /= labeled_steps as f64;
            updates += labeled_steps;

            // Unlabeled phase, once the student has a head start.
            let mut unlabeled_loss = None;
            if epoch > self.cfg.unlab_start_epoch && !split.unlabeled.is_empty() {
                self.teacher.update(&self.model)?;
                let mut order: Vec<usize> = (0..split.unlabeled.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(
                    self.cfg.rng_seed,
                    STREAM_UNLABELED_ORDER ^ ((epoch as u64) << 16),
                ));
                order.shuffle(&mut rng);
                let mut acc = 0.0;
                let mut steps = 0usize;
                for chunk in order.chunks(b) {
                    let batch: Vec<&UnlabeledSample> =
                        chunk.iter().map(|&i| &split.unlabeled[i]).collect();
                    acc += self.unsupervised_step(&batch)?;
                    steps += 1;
                }
                unlabeled_loss = Some(acc / steps as f64);
                updates += steps;
            }

            let val_dice = evaluate(&self.model, val, 0.5)?;
            let seeds = self.epoch_transform_seeds(epoch);
            self.history.epochs.push(EpochRecord {
                epoch,
                loss_labeled: labeled_loss,
                loss_unlabeled: unlabeled_loss,
                val_dice,
                wall_secs: start.elapsed().as_secs_f64(),
                transform_seeds: seeds,
                updates,
            });
        }
        Ok(())
    }

    fn epoch_transform_seeds(&self, epoch: usize) -> Vec<u64> {
        self.history
            .transform_events
            .iter()
            .filter(|e| e.epoch == epoch && e.phase != "unlabeled_teacher")
            .map(|e| e.transform.seed)
            .collect()
    }
}

/// Convenience wrapper: build a trainer, run it, return model and history.
pub fn train(
    model: SegmentationModel,
    split: &DatasetSplit,
    val: &[LabeledSample],
    cfg: TrainConfig,
) -> Result<(SegmentationModel, TrainHistory)> {
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(split, val)?;
    let Trainer { model, history, .. } = trainer;
    Ok((model, history))
}

/// Mean per-class Dice over a labeled dataset, with predictions binarized
/// at `threshold` (strict greater-than).
pub fn evaluate(
    model: &SegmentationModel,
    dataset: &[LabeledSample],
    threshold: f64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(SegError::EmptyDataset("evaluation set".into()));
    }
    let classes = model.config.num_classes;
    let mut sums = vec![0.0f64; classes];
    for s in dataset {
        let pred = model.predict_one(&s.volume)?.binarize(threshold);
        let d = dice_score(&pred, &s.mask, model_epsilon(model))?;
        for (acc, v) in sums.iter_mut().zip(d.iter()) {
            *acc += v;
        }
    }
    for v in &mut sums {
        *v /= dataset.len() as f64;
    }
    Ok(sums)
}

fn model_epsilon(_model: &SegmentationModel) -> f64 {
    LossConfig::default().epsilon
}
