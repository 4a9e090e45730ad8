//! Loss, metrics, optimizers and the train / evaluate loops.

pub mod loss;
pub mod metrics;
pub mod optim;

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{random_crop, Sample};
use crate::embed::{EmbeddingProvider, TextRecord};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::model::{predict_masks, DocParseNet};
use crate::nn::Mode;
use crate::profile::time_epoch;
use crate::tensor::{Real, Tape, Tensor};
use crate::util::mix_seed;

pub use loss::{bce_dice_loss, loss_terms, ChannelTerms};
pub use metrics::{iou, mean_iou, IouAccumulator, IouMode, MetricsReport};
pub use optim::{adamw_step, sgd_step, AdamHyper, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    BceDice,
}

/// Per-step learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to 0 over the steps after warmup.
    Cosine,
}

impl LrSchedule {
    /// Rate for the update after `step` completed steps of `total`. The
    /// first `warmup` updates ramp linearly up to `lr`.
    pub fn rate(self, lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
        if step < warmup {
            return lr * (step + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = (step - warmup) as f64 / total.saturating_sub(warmup).max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("lr_schedule must be constant or cosine, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub iou_mode: IouMode,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// One JSON object per epoch is appended here.
    pub log_path: Option<PathBuf>,
    /// Best-mIoU checkpoint.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: h.lr,
            weight_decay: h.weight_decay,
            loss: LossKind::BceDice,
            optimizer: OptimizerKind::AdamW,
            beta1: h.beta1,
            beta2: h.beta2,
            adam_eps: h.eps,
            seed: 0,
            iou_mode: IouMode::Dataset,
            max_steps: 0,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            grad_clip: 0.0,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// Keys settable from a flat config file; `seed` is shared with the model.
    pub const KEYS: [&'static str; 14] = [
        "epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "loss",
        "optimizer",
        "beta1",
        "beta2",
        "adam_eps",
        "iou_mode",
        "max_steps",
        "lr_schedule",
        "warmup_steps",
        "grad_clip",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be finite and >= 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "loss" => "bce_dice".to_string(),
            "optimizer" => self.optimizer.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "iou_mode" => self.iou_mode.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            _ => return None,
        })
    }

    /// `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")));
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{key}: `{v}` is not a count")));
        match key {
            "epochs" => self.epochs = int(v)?,
            "batch_size" => self.batch_size = int(v)?,
            "max_steps" => self.max_steps = int(v)?,
            "warmup_steps" => self.warmup_steps = int(v)?,
            "lr" => self.lr = num(v)?,
            "weight_decay" => self.weight_decay = num(v)?,
            "beta1" => self.beta1 = num(v)?,
            "beta2" => self.beta2 = num(v)?,
            "adam_eps" => self.adam_eps = num(v)?,
            "optimizer" => self.optimizer = v.trim().parse()?,
            "iou_mode" => self.iou_mode = v.trim().parse()?,
            "lr_schedule" => self.lr_schedule = v.trim().parse()?,
            "grad_clip" => self.grad_clip = num(v)?,
            "loss" if v.trim() == "bce_dice" => self.loss = LossKind::BceDice,
            "loss" => return Err(Error::Config(format!("loss must be bce_dice, got `{v}`"))),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// Stacks samples of equal size into `image [B, 3, H, W]`, `masks [B, 5, H, W]`.
pub fn stack_batch<T: Real>(samples: &[Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| contract_err!("empty batch"))?;
    let (is, ms) = (first.image.shape().to_vec(), first.masks.shape().to_vec());
    let mut image = Vec::with_capacity(samples.len() * first.image.numel());
    let mut masks = Vec::with_capacity(samples.len() * first.masks.numel());
    for s in samples {
        if s.image.shape() != is.as_slice() || s.masks.shape() != ms.as_slice() {
            return Err(shape_err!("batch mixes sample sizes {:?} and {:?}", is, s.image.shape()));
        }
        image.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
        masks.extend(s.masks.data().iter().map(|&v| T::lit(v as f64)));
    }
    let b = samples.len();
    Ok((Tensor::new(&[b, is[0], is[1], is[2]], image)?, Tensor::new(&[b, ms[0], ms[1], ms[2]], masks)?))
}

fn records(samples: &[Sample]) -> Vec<TextRecord> {
    samples.iter().map(Sample::record).collect()
}

/// Eval-mode metrics over whole samples; loss is the sample-weighted mean.
pub fn evaluate<T: Real>(
    model: &DocParseNet<T>,
    samples: &[Sample],
    provider: &EmbeddingProvider,
    mode: IouMode,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let start = Instant::now();
    let mut acc = IouAccumulator::new(mode);
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (image, masks) = stack_batch::<T>(chunk)?;
        let embed = provider.embed::<T>(&records(chunk))?;
        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let (x, e) = (tape.constant(image), tape.constant(embed));
        let out = model.forward(&mut tape, &b, x, e, Mode::Eval)?;
        let l = bce_dice_loss(&mut tape, out.logits, &masks)?;
        loss_sum += tape.value(l).data()[0].to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        acc.add(&predict_masks(tape.value(out.logits)), &masks)?;
    }
    Ok(MetricsReport::new(0, loss_sum / samples.len() as f64, acc.ious(), start.elapsed().as_secs_f64()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<MetricsReport>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub steps: usize,
}

fn append_line(path: &PathBuf, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.epochs` epochs (or until `cfg.max_steps`). After each epoch the
/// model is scored on `val_set` (on `train_set` when `val_set` is empty).
pub fn train<T: Real>(
    model: &mut DocParseNet<T>,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    provider: &EmbeddingProvider,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let train_ids: HashSet<&str> = train_set.iter().map(|s| s.sample_id.as_str()).collect();
    if let Some(s) = val_set.iter().find(|s| train_ids.contains(s.sample_id.as_str())) {
        return Err(contract_err!("sample `{}` is in both train and val splits", s.sample_id));
    }
    let score_set = if val_set.is_empty() { train_set } else { val_set };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.hyper(), &model.params);
    let mut outcome = TrainOutcome { history: Vec::new(), best_epoch: 0, best_miou: f64::NEG_INFINITY, steps: 0 };
    let mut last_grad_norm = 0.0;
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = match cfg.max_steps {
        0 => cfg.epochs * per_epoch,
        cap => cap.min(cfg.epochs * per_epoch),
    };
    for epoch in 1..=cfg.epochs {
        let epoch_seed = mix_seed(cfg.seed, epoch as u64);
        let (loss, seconds) = time_epoch(|| {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            let (mut sum, mut seen) = (0.0, 0usize);
            for idx in order.chunks(cfg.batch_size) {
                if cfg.max_steps > 0 && outcome.steps >= cfg.max_steps {
                    break;
                }
                let crops: Vec<Sample> =
                    idx.iter().map(|&i| random_crop(&train_set[i], model.cfg.crop, epoch_seed)).collect::<Result<_>>()?;
                let (image, masks) = stack_batch::<T>(&crops)?;
                let embed = provider.embed::<T>(&records(&crops))?;
                let mut tape = Tape::new();
                let b = model.params.bind(&mut tape);
                let (x, e) = (tape.constant(image), tape.constant(embed));
                let mode = Mode::Train { seed: mix_seed(epoch_seed, outcome.steps as u64) };
                let out = model.forward(&mut tape, &b, x, e, mode)?;
                let l = bce_dice_loss(&mut tape, out.logits, &masks)?;
                let lv = tape.value(l).data()[0].to_f64().unwrap_or(f64::NAN);
                if !lv.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss {lv} at epoch {epoch} step {}; lr {}, last grad-norm {last_grad_norm:.6e}",
                        outcome.steps + 1,
                        cfg.lr
                    )));
                }
                tape.backward(l)?;
                model.params.collect_grads(&tape, &b)?;
                last_grad_norm = model.params.grad_norm();
                if !last_grad_norm.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite grad-norm at epoch {epoch} step {}; lr {}, loss {lv}",
                        outcome.steps + 1,
                        cfg.lr
                    )));
                }
                if cfg.grad_clip > 0.0 && last_grad_norm > cfg.grad_clip {
                    model.params.scale_grads(cfg.grad_clip / last_grad_norm);
                }
                opt.hyper.lr = cfg.lr_schedule.rate(cfg.lr, outcome.steps, cfg.warmup_steps, total_steps);
                opt.apply(&mut model.params)?;
                model.params.zero_grads();
                outcome.steps += 1;
                sum += lv * crops.len() as f64;
                seen += crops.len();
            }
            let scored = evaluate(model, score_set, provider, cfg.iou_mode, cfg.batch_size)?;
            Ok((if seen > 0 { sum / seen as f64 } else { f64::NAN }, scored.ious()))
        })?;
        let report = MetricsReport::new(epoch, loss.0, loss.1, seconds);
        if let Some(p) = &cfg.log_path {
            append_line(p, &report.to_json_line())?;
        }
        if report.miou > outcome.best_miou {
            outcome.best_miou = report.miou;
            outcome.best_epoch = epoch;
            if let Some(p) = &cfg.checkpoint_path {
                model.save(p)?;
            }
        }
        outcome.history.push(report);
        if cfg.max_steps > 0 && outcome.steps >= cfg.max_steps {
            break;
        }
    }
    Ok(outcome)
}
