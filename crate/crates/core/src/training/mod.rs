//! Stage-1 distillation of the Aux-Net, stage-2 fine-tuning, and the optimizer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::harness::config::KvConfig;
use crate::harness::data::{hflip_batch, shuffled_indices, Dataset};
use crate::harness::eval::{evaluate, Accuracy};
use crate::harness::metrics::MetricsRow;
use crate::tensor::{ComputationRecord, KlDirection, Tensor, Var};
use crate::vit::{record, LayerParams, Vit};

pub mod aux;
pub mod loss;
pub mod optim;

pub use aux::{AuxGrads, AuxNet};
pub use loss::{cross_entropy, soft_distill_loss, total_loss, LossParts};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the distillation term, in [0, 1].
    pub lambda: f64,
    /// Softmax temperature, > 0.
    pub tau: f64,
    pub kl_direction: KlDirection,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps, mid-epoch if needed.
    pub max_steps: Option<usize>,
    /// Random horizontal flips of training batches.
    pub hflip: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 1.0,
            kl_direction: KlDirection::TeacherTarget,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 0,
            optim: AdamWConfig::default(),
            epochs: 10,
            batch_size: 64,
            seed: 0,
            max_steps: None,
            hflip: false,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        loss::check_lambda(self.lambda)?;
        if !(self.tau > 0.0) {
            return Err(crate::Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(crate::Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(crate::Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Writes every field under `prefix`.
    pub fn to_kv(&self, kv: &mut KvConfig, prefix: &str) {
        let p = |k: &str| format!("{prefix}{k}");
        kv.set(&p("lambda"), self.lambda);
        kv.set(&p("tau"), self.tau);
        kv.set(
            &p("kl_direction"),
            match self.kl_direction {
                KlDirection::TeacherTarget => "teacher",
                KlDirection::StudentTarget => "student",
            },
        );
        kv.set(&p("lr"), self.lr);
        kv.set(&p("min_lr"), self.min_lr);
        kv.set(&p("warmup_steps"), self.warmup_steps);
        kv.set(&p("beta1"), self.optim.beta1);
        kv.set(&p("beta2"), self.optim.beta2);
        kv.set(&p("adam_eps"), self.optim.eps);
        kv.set(&p("weight_decay"), self.optim.weight_decay);
        kv.set(&p("epochs"), self.epochs);
        kv.set(&p("batch_size"), self.batch_size);
        kv.set(&p("seed"), self.seed);
        kv.set(&p("max_steps"), self.max_steps.map(|s| s.to_string()).unwrap_or_else(|| "none".into()));
        kv.set(&p("hflip"), self.hflip);
        kv.set(&p("eval_batch_size"), self.eval_batch_size);
    }

    /// Reads fields under `prefix`, falling back to `self` for missing keys.
    pub fn from_kv(&self, kv: &KvConfig, prefix: &str) -> Result<Self> {
        let p = |k: &str| format!("{prefix}{k}");
        let dir = match kv.get(&p("kl_direction")) {
            None => self.kl_direction,
            Some("teacher") => KlDirection::TeacherTarget,
            Some("student") => KlDirection::StudentTarget,
            Some(other) => {
                return Err(crate::Error::Config(format!(
                    "kl_direction must be 'teacher' or 'student', got '{other}'"
                )))
            }
        };
        let max_steps = match kv.get(&p("max_steps")) {
            None => self.max_steps,
            Some("none") => None,
            Some(_) => Some(kv.require(&p("max_steps"))?),
        };
        let out = Self {
            lambda: kv.get_or(&p("lambda"), self.lambda)?,
            tau: kv.get_or(&p("tau"), self.tau)?,
            kl_direction: dir,
            lr: kv.get_or(&p("lr"), self.lr)?,
            min_lr: kv.get_or(&p("min_lr"), self.min_lr)?,
            warmup_steps: kv.get_or(&p("warmup_steps"), self.warmup_steps)?,
            optim: AdamWConfig {
                beta1: kv.get_or(&p("beta1"), self.optim.beta1)?,
                beta2: kv.get_or(&p("beta2"), self.optim.beta2)?,
                eps: kv.get_or(&p("adam_eps"), self.optim.eps)?,
                weight_decay: kv.get_or(&p("weight_decay"), self.optim.weight_decay)?,
            },
            epochs: kv.get_or(&p("epochs"), self.epochs)?,
            batch_size: kv.get_or(&p("batch_size"), self.batch_size)?,
            seed: kv.get_or(&p("seed"), self.seed)?,
            max_steps,
            hflip: kv.get_or(&p("hflip"), self.hflip)?,
            eval_batch_size: kv.get_or(&p("eval_batch_size"), self.eval_batch_size)?,
        };
        out.validate()?;
        Ok(out)
    }
}

/// A frozen model producing logits.
pub trait Teacher {
    fn num_classes(&self) -> usize;
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Teacher for Vit<f32> {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Vit::logits(self, images)
    }
}

/// Aggregates of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub eval: Option<Accuracy>,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn to_row(&self, run_id: &str) -> MetricsRow {
        MetricsRow {
            run_id: run_id.to_string(),
            epoch: self.epoch,
            train_loss: self.train_loss,
            ce_loss: self.ce_loss,
            kd_loss: self.kd_loss,
            top1: self.eval.map(|a| a.top1),
            top5: self.eval.and_then(|a| a.top5),
            seconds: self.seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
}

impl TrainReport {
    pub fn rows(&self, run_id: &str) -> Vec<MetricsRow> {
        self.epochs.iter().map(|e| e.to_row(run_id)).collect()
    }
}

/// A model the shared loop can optimize.
trait Trainable {
    fn loss_and_grads(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        teacher: Option<&Tensor<f32>>,
        cfg: &TrainConfig,
    ) -> Result<(LossParts, Vec<Tensor<f32>>)>;
    fn trainable_mut(&mut self) -> Vec<&mut Tensor<f32>>;
    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Trainable for AuxNet<f32> {
    fn loss_and_grads(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        teacher: Option<&Tensor<f32>>,
        cfg: &TrainConfig,
    ) -> Result<(LossParts, Vec<Tensor<f32>>)> {
        let (parts, g) =
            AuxNet::loss_and_grads(self, images, labels, teacher, cfg.lambda, cfg.tau, cfg.kl_direction)?;
        Ok((parts, g.into_ordered(self.scope().modules)))
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        AuxNet::trainable_mut(self)
    }

    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        AuxNet::logits(self, images)
    }
}

impl Trainable for Vit<f32> {
    fn loss_and_grads(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        teacher: Option<&Tensor<f32>>,
        cfg: &TrainConfig,
    ) -> Result<(LossParts, Vec<Tensor<f32>>)> {
        vit_loss_and_grads(self, images, labels, teacher, cfg)
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.tensors_mut()
    }

    fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Vit::logits(self, images)
    }
}

/// Loss and gradients for every tensor of `vit`, in [`Vit::tensors`] order.
pub fn vit_loss_and_grads(
    vit: &Vit<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    teacher: Option<&Tensor<f32>>,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let mut rec = ComputationRecord::new();
    let lv: Vec<LayerParams<Var>> = vit.layers.iter().map(|l| l.register(&mut rec)).collect();
    let nv = vit.nlp.register(&mut rec);
    let logits = record::forward(&mut rec, images, &lv, &nv, &vit.cfg)?;
    let (loss, parts) =
        loss::record_loss(&mut rec, logits, labels, teacher, cfg.lambda, cfg.tau, cfg.kl_direction)?;
    let mut g = rec.backward(loss)?;
    let mut out: Vec<Tensor<f32>> = lv
        .iter()
        .flat_map(|l| l.refs().into_iter().copied().collect::<Vec<_>>())
        .map(|v| g.take(v))
        .collect();
    out.extend(nv.refs().into_iter().map(|&v| g.take(v)));
    Ok((parts, out))
}

fn total_steps(n: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

fn run<M: Trainable>(
    model: &mut M,
    train: &Dataset,
    eval: Option<&Dataset>,
    teacher: Option<&dyn Teacher>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(contract("training set is empty"));
    }
    let n = train.len();
    let total = total_steps(n, cfg);
    let sched = CosineSchedule {
        base: cfg.lr,
        min: cfg.min_lr.min(cfg.lr),
        warmup: cfg.warmup_steps,
        total,
    };
    // Teacher outputs are fixed for a fixed image, so cache them once unless
    // augmentation changes the images.
    let cached = match teacher {
        Some(t) if !cfg.hflip && cfg.lambda > 0.0 && cfg.epochs > 0 => {
            let idx: Vec<usize> = (0..n).collect();
            let rows = idx
                .chunks(cfg.eval_batch_size)
                .map(|c| t.logits(&train.batch(c).0))
                .collect::<Result<Vec<_>>>()?;
            Some(concat_rows(&rows)?)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim);
    let mut decay: Option<Vec<bool>> = None;
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        if report.steps >= total {
            break;
        }
        let start = Instant::now();
        let order = shuffled_indices(n, &mut rng);
        let (mut sum, mut batches) = (LossParts::default(), 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if report.steps >= total {
                break;
            }
            let (mut x, y) = train.batch(chunk);
            if cfg.hflip {
                let mask: Vec<bool> = (0..chunk.len()).map(|_| rng.random_bool(0.5)).collect();
                hflip_batch(&mut x, &mask);
            }
            let t_logits = match (teacher, &cached) {
                _ if cfg.lambda == 0.0 => None,
                (_, Some(all)) => Some(gather_rows(all, chunk)),
                (Some(t), None) => Some(t.logits(&x)?),
                (None, None) => None,
            };
            let (parts, grads) = model.loss_and_grads(&x, &y, t_logits.as_ref(), cfg)?;
            let mut params = model.trainable_mut();
            let mask = decay.get_or_insert_with(|| optim::decay_mask(&params));
            opt.step(&mut params, &grads, mask, sched.lr(report.steps))?;
            report.steps += 1;
            sum.total += parts.total;
            sum.ce += parts.ce;
            sum.kd += parts.kd;
            batches += 1;
        }
        let eval_acc = match eval {
            Some(d) => Some(evaluate(|x| model.logits(x), d, cfg.eval_batch_size)?),
            None => None,
        };
        let k = batches.max(1) as f64;
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: sum.total / k,
            ce_loss: sum.ce / k,
            kd_loss: sum.kd / k,
            eval: eval_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

fn concat_rows(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let c = parts[0].shape()[1];
    let data: Vec<f32> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![data.len() / c, c], data)
}

fn gather_rows(all: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let c = all.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&all.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![idx.len(), c], data).expect("gathered rows")
}

/// Stage 1: distills `teacher` into `aux`, updating only the learngene,
/// free layers, out-of-scope slots and non-layer parameters.
pub fn train_aux(
    aux: &mut AuxNet<f32>,
    teacher: &dyn Teacher,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if teacher.num_classes() != aux.cfg.num_classes {
        return Err(contract(format!(
            "teacher has {} classes, Aux-Net head has {}",
            teacher.num_classes(),
            aux.cfg.num_classes
        )));
    }
    run(aux, train, eval, Some(teacher), cfg)
}

/// Supervised training of every parameter with cross-entropy. Used for
/// stage-2 fine-tuning, scratch baselines and teacher training.
pub fn finetune(
    model: &mut Vit<f32>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    run(model, train, eval, None, cfg)
}

/// Fraction of `data` classified correctly by `model`.
pub fn accuracy(model: &dyn Teacher, data: &Dataset, batch_size: usize) -> Result<Accuracy> {
    evaluate(|x| model.logits(x), data, batch_size)
}
