//! Optimization loop: paired batches, mutual distillation gradients, step
//! decay, early stopping on validation Acc@1 and best-model retention.
//!
//! A batch is cut into fixed-size chunks whose gradients are computed
//! independently and summed in chunk order, so the result does not depend on
//! how many threads ran them.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::data::{build_vocab, DatasetSplit, SubTrajectory, Vocabulary};
use crate::distill::DistillationConfig;
use crate::embedding::TokenBatch;
use crate::error::{Result, TulError};
use crate::eval::{acc_at_k, labels_for, score_trajectories};
use crate::model::{ModelConfig, StepLoss, TulModel};
use crate::nn::{Adam, Parameters};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Fraction removed from the learning rate every `decay_period` epochs.
    pub decay: f64,
    pub decay_period: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Sequences per gradient work unit.
    pub chunk_size: usize,
    pub time_slices: usize,
    pub model: ModelConfig,
    pub augment: AugmentationConfig,
    pub distill: DistillationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            decay: 0.1,
            decay_period: 5,
            patience: 3,
            batch_size: 64,
            max_epochs: 50,
            seed: 0,
            clip_norm: 5.0,
            chunk_size: 16,
            time_slices: 24,
            model: ModelConfig::default(),
            augment: AugmentationConfig::default(),
            distill: DistillationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TulError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad(format!("train.decay must be in [0, 1), got {}", self.decay));
        }
        if self.decay_period == 0 || self.patience == 0 || self.batch_size == 0 || self.chunk_size == 0 {
            return bad("train.decay_period, patience, batch_size and chunk_size must be positive".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("train.clip_norm must be positive, got {}", self.clip_norm));
        }
        self.model.validate()?;
        self.augment.validate()?;
        self.distill.validate()
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * (1.0 - cfg.decay).powi((epoch / cfg.decay_period) as i32)
}

/// Stops once the metric has not strictly improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch; returns true when the metric improved.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        match self.best {
            Some((_, b)) if metric <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of the summed directional losses.
    pub train_loss: f64,
    pub val_acc1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TulModel,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc1: f64,
}

impl TrainedModel {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

/// Position of one training trajectory: `(user index, index in that user's pool)`.
pub type Sample = (usize, usize);

/// Per-user chronological training pools indexed by vocabulary user index.
#[derive(Debug, Clone)]
pub struct TrainingPools {
    pub pools: Vec<Vec<SubTrajectory>>,
}

impl TrainingPools {
    pub fn new(split: &DatasetSplit, vocab: &Vocabulary) -> Result<Self> {
        let mut pools = vec![Vec::new(); vocab.num_users()];
        for u in &split.train {
            let idx = vocab
                .user(&u.user_id)
                .ok_or_else(|| TulError::Data(format!("user {:?} missing from vocabulary", u.user_id)))?;
            pools[idx] = u.trajectories.clone();
        }
        Ok(Self { pools })
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.pools
            .iter()
            .enumerate()
            .flat_map(|(u, p)| (0..p.len()).map(move |i| (u, i)))
            .collect()
    }
}

/// Input trajectories, their augmented counterparts and user labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub inputs: Vec<SubTrajectory>,
    pub augmented: Vec<SubTrajectory>,
    pub labels: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Packed tokens of `range` for the input and augmented sides.
    pub fn tokens(&self, range: Range<usize>, vocab: &Vocabulary, cfg: &ModelConfig) -> (TokenBatch, TokenBatch) {
        let pack = |trajs: &[SubTrajectory]| {
            TokenBatch::from_trajectories(&trajs[range.clone()], vocab, cfg.time_unit, Some(cfg.max_len))
        };
        (pack(&self.inputs), pack(&self.augmented))
    }
}

pub fn make_batch<R: Rng + ?Sized>(
    samples: &[Sample],
    pools: &TrainingPools,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> TrainingBatch {
    let mut batch = TrainingBatch {
        inputs: Vec::with_capacity(samples.len()),
        augmented: Vec::with_capacity(samples.len()),
        labels: Vec::with_capacity(samples.len()),
    };
    for &(user, idx) in samples {
        let pool = &pools.pools[user];
        batch.inputs.push(pool[idx].clone());
        batch.augmented.push(cfg.augment(pool, idx, rng));
        batch.labels.push(user);
    }
    batch
}

/// SplitMix64 over a sequence of words; derives independent sub-seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Sample order of one epoch.
pub fn epoch_order(samples: &[Sample], seed: u64, epoch: usize) -> Vec<Sample> {
    let mut order = samples.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1, epoch as u64])));
    order
}

/// Summed gradient and loss of one batch, computed chunk by chunk.
pub fn batch_gradients(
    model: &TulModel,
    batch: &TrainingBatch,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    dropout_seed: u64,
    exec: Execution,
) -> Result<(TulModel, StepLoss)> {
    let n = batch.len();
    let ranges: Vec<Range<usize>> = (0..n)
        .step_by(cfg.chunk_size)
        .map(|s| s..(s + cfg.chunk_size).min(n))
        .collect();
    let parts = exec.map(&ranges, |range| {
        let (input, augmented) = batch.tokens(range.clone(), vocab, &cfg.model);
        let labels = &batch.labels[range.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[dropout_seed, range.start as u64]));
        let rng = (cfg.model.dropout > 0.0).then_some(&mut rng);
        model.distillation_gradients(&input, &augmented, labels, &cfg.distill, n, rng)
    });
    let mut parts = parts.into_iter();
    let (mut grad, mut loss) = parts
        .next()
        .ok_or_else(|| TulError::Data("empty training batch".into()))??;
    for part in parts {
        let (g, l) = part?;
        grad.accumulate(&g);
        loss += l;
    }
    Ok((grad, loss))
}

/// Rescales `grad` in place to global norm at most `max_norm`; returns the original norm.
pub fn clip_global_norm<P: Parameters>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad.squared_norm().sqrt();
    if norm > max_norm {
        grad.scale((max_norm / norm) as f32);
    }
    norm
}

pub fn validation_accuracy(
    model: &TulModel,
    vocab: &Vocabulary,
    trajs: &[SubTrajectory],
    cfg: &ModelConfig,
    exec: Execution,
) -> Result<f64> {
    let labels = labels_for(vocab, trajs)?;
    let result = score_trajectories(model, vocab, trajs, cfg.time_unit, cfg.max_len, exec);
    acc_at_k(&result, &labels, 1)
}

pub fn train(split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with(split, cfg, Execution::default())
}

pub fn train_with(split: &DatasetSplit, cfg: &TrainConfig, exec: Execution) -> Result<TrainedModel> {
    cfg.validate()?;
    let train_trajs = split.train_trajectories();
    let validation = split.validation_trajectories();
    if validation.is_empty() {
        return Err(TulError::Data("validation split is empty".into()));
    }
    let vocab = build_vocab(&train_trajs, cfg.time_slices)?;
    let pools = TrainingPools::new(split, &vocab)?;
    let samples = pools.samples();

    let mut model = TulModel::new(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0])), &cfg.model, &vocab);
    let mut adam = Adam::new(&model);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.augment.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    log::info!(
        "training on {} trajectories of {} users, {} parameters",
        samples.len(),
        vocab.num_users(),
        model.num_scalars()
    );

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(&samples, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(chunk, &pools, &cfg.augment, &mut aug_rng);
            let dropout_seed = mix_seed(&[cfg.seed, 2, epoch as u64, b as u64]);
            let (mut grad, loss) = batch_gradients(&model, &batch, &vocab, cfg, dropout_seed, exec)?;
            let total = loss.total();
            if !total.is_finite() || !grad.all_finite() {
                return Err(TulError::Divergence {
                    epoch,
                    batch: b,
                    loss: total,
                });
            }
            clip_global_norm(&mut grad, cfg.clip_norm);
            adam.step(&mut model, &grad, lr as f32);
            loss_sum += total;
            batches += 1;
        }
        let val_acc1 = validation_accuracy(&model, &vocab, &validation, &cfg.model, exec)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_acc1,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.4} val Acc@1 {:.4} ({:.1}s)",
            record.train_loss,
            val_acc1,
            record.seconds
        );
        history.push(record);
        if stopper.observe(epoch, val_acc1) {
            best = model.clone();
        }
        if stopper.should_stop() {
            log::info!("no improvement for {} epochs, stopping", cfg.patience);
            break;
        }
    }

    let (best_epoch, best_val_acc1) = stopper.best().unwrap_or((0, 0.0));
    Ok(TrainedModel {
        model: best,
        vocab,
        config: cfg.clone(),
        history,
        best_epoch,
        best_val_acc1,
    })
}
