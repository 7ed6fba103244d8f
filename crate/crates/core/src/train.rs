//! SGD training loop with per-epoch validation and best-model selection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{eval_samples, single_samples, Dataset, PairPool, PairSampler, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{overall, ConfusionMatrix, F1Variant};
use crate::net::checkpoint::{decode, encode};
use crate::net::{argmax_rows, BranchConfig, Modality, TwoStreamModel};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor};

pub const CHECKPOINT_NAME: &str = "best.mmck";
pub const LOG_NAME: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    /// Pair pool for the two-stream model; `None` means loose.
    pub pairing: Option<PairPool>,
    pub modality: Modality,
    pub seed: u64,
    pub augment: bool,
    pub f1_variant: F1Variant,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 60,
            lr_decay_epochs: vec![40, 50],
            lr_decay: 0.1,
            pairing: None,
            modality: Modality::Multimodal,
            seed: 0,
            augment: true,
            f1_variant: F1Variant::PrecisionRecall,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "bad weight decay {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.epochs == 0 {
            return Err(Error::config(
                "batch sizes and epoch count must be positive",
            ));
        }
        if let Some(&m) = self.lr_decay_epochs.iter().find(|&&m| m >= self.epochs) {
            return Err(Error::config(format!(
                "decay epoch {m} is not below {} epochs",
                self.epochs
            )));
        }
        if self.pairing.is_some() && self.modality != Modality::Multimodal {
            return Err(Error::config(format!(
                "pairing applies to the two-stream model only, not to a {} model",
                self.modality
            )));
        }
        Ok(())
    }

    pub fn pool(&self) -> PairPool {
        self.pairing.unwrap_or(PairPool::Loose)
    }

    /// Step schedule: `lr * lr_decay^(number of milestones <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// SGD with momentum and L2 weight decay.
///
/// `v <- mu * v + (g + lambda * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    momentum: T,
    weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update; a non-finite gradient aborts before any change.
    pub fn step(&mut self, params: &mut [Tensor<T>], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::dim(format!(
                "optimizer holds {} buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    let name = names.get(i).map_or("?", String::as_str);
                    return Err(Error::Numeric(format!("non-finite gradient in {name}")));
                }
            }
        }
        let lr = T::from_f64(lr);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (w, g) = p.data_and_grad_mut();
            for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_samples: usize,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub modality: Modality,
    pub pairing: Option<PairPool>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub best_val_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome<T: Real> {
    /// Weights from the selected epoch.
    pub model: TwoStreamModel<T>,
    pub report: TrainReport,
}

/// Training instances of one epoch.
fn epoch_samples(
    data: &Dataset,
    cfg: &TrainConfig,
    sampler: Option<&PairSampler>,
    epoch: usize,
) -> Vec<Sample> {
    match sampler {
        Some(s) => s.epoch(epoch).iter().map(Sample::from).collect(),
        None => {
            let mut samples = single_samples(data.records(), Split::Train, cfg.modality);
            samples.shuffle(&mut rng::stream(cfg.seed, "single.order", epoch as u64));
            samples
        }
    }
}

/// Scores samples in eval mode and tallies a confusion matrix.
pub fn evaluate<T: Real>(
    model: &TwoStreamModel<T>,
    data: &Dataset,
    samples: &[Sample],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(chunk, None)?;
        let scores = model.scores(batch.fundus.as_ref(), batch.oct.as_ref())?;
        for (&t, p) in batch.labels.iter().zip(argmax_rows(&scores)) {
            cm.add(t, p)?;
        }
    }
    Ok(cm)
}

/// Confusion matrix of a model over the evaluation instances of a split.
pub fn evaluate_split<T: Real>(
    model: &TwoStreamModel<T>,
    data: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let samples = eval_samples(data.records(), split, model.modality());
    if samples.is_empty() {
        return Err(Error::Split(format!(
            "no {} instances in the {split} split",
            model.modality()
        )));
    }
    evaluate(model, data, &samples, batch_size)
}

/// One SGD step on a batch; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut TwoStreamModel<T>,
    sgd: &mut Sgd<T>,
    data: &Dataset,
    samples: &[Sample],
    augment_key: Option<(u64, usize, usize)>,
    lr: f64,
) -> Result<f64> {
    let batch = data.batch::<T>(samples, augment_key)?;
    let mut tape = Tape::new();
    let f = batch.fundus.map(|t| tape.leaf(t));
    let o = batch.oct.map(|t| tape.leaf(t));
    let out = model.forward(&mut tape, f, o, true)?;
    let loss = tape.softmax_cross_entropy(out.scores, &batch.labels)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    model.zero_grad();
    tape.backward(loss, model.params_mut())?;
    let names = model.param_names().to_vec();
    sgd.step(model.params_mut(), &names, lr)?;
    Ok(value)
}

/// Trains a fresh model and returns the weights of the best validation epoch.
///
/// Selection uses macro F1, then accuracy, then the earlier epoch. With
/// `out_dir`, the best checkpoint and a JSON-lines epoch log are written there.
pub fn train<T: Real>(
    data: &Dataset,
    branch: &BranchConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    branch.validate()?;
    if data.image_size() != branch.input_size {
        return Err(Error::config(format!(
            "dataset images are {}px but the network expects {}px",
            data.image_size(),
            branch.input_size
        )));
    }
    let records = data.records();
    crate::data::check_split_hygiene(records)?;
    let val = eval_samples(records, Split::Val, cfg.modality);
    if val.is_empty() {
        return Err(Error::Split(format!(
            "no {} instances in the val split",
            cfg.modality
        )));
    }
    let sampler = match cfg.modality {
        Modality::Multimodal => Some(PairSampler::new(
            records,
            Split::Train,
            cfg.pool(),
            cfg.seed,
        )?),
        _ => None,
    };
    let mut model = TwoStreamModel::<T>::build(
        branch,
        crate::net::CLASS_NAMES.len(),
        cfg.seed,
        cfg.modality,
    )?;
    let mut sgd = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_NAME);
            Some((
                fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_NAME));

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, Vec<u8>)> = None;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let samples = epoch_samples(data, cfg, sampler.as_ref(), epoch);
        if samples.is_empty() {
            return Err(Error::Split(format!(
                "no {} training instances",
                cfg.modality
            )));
        }
        let mut loss_sum = 0.0;
        for (b, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            let key = cfg.augment.then_some((cfg.seed, epoch, b * cfg.batch_size));
            let loss = train_step(&mut model, &mut sgd, data, chunk, key, lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let cm = evaluate(&model, data, &val, cfg.eval_batch_size)?;
        let m = overall(&cm, cfg.f1_variant)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / samples.len() as f64,
            train_samples: samples.len(),
            val_macro_f1: m.macro_f1,
            val_accuracy: m.accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} val f1 {:.3} acc {:.3} ({:.1}s)",
            cfg.modality,
            record.train_loss,
            record.val_macro_f1,
            record.val_accuracy,
            record.seconds
        );
        let improved = best
            .as_ref()
            .is_none_or(|(f1, acc, _, _)| (m.macro_f1, m.accuracy) > (*f1, *acc));
        if improved {
            let bytes = encode(&model)?;
            if let Some(path) = &ckpt_path {
                fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
            }
            best = Some((m.macro_f1, m.accuracy, epoch, bytes));
        }
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&record).map_err(|e| Error::config(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        epochs.push(record);
    }
    let (best_f1, best_acc, best_epoch, bytes) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: decode(&bytes)?,
        report: TrainReport {
            modality: cfg.modality,
            pairing: (cfg.modality == Modality::Multimodal).then(|| cfg.pool()),
            epochs,
            best_epoch,
            best_val_macro_f1: best_f1,
            best_val_accuracy: best_acc,
            checkpoint: ckpt_path,
        },
    })
}
