//! Minibatch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::arch::ArchSpec;
use super::loss::{ce_loss_grad, distill_loss_grad};
use super::model::{Mode, Model};
use crate::dataset::{Dataset, DatasetSample, Normalizer};
use crate::error::{Error, Result};
use crate::model::Assignment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Distill { lambda1: f64, lambda2: f64, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 128, epochs: 30, seed: 0, loss: LossKind::Ce }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidParameter("learning rate must be positive and batch size at least 1".into()));
        }
        if let LossKind::Distill { lambda1, lambda2, temperature } = self.loss {
            if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1 + lambda2 > 0.0) {
                return Err(Error::InvalidParameter(format!("bad loss weights {lambda1}, {lambda2}")));
            }
            if !(temperature > 0.0) {
                return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

/// Standardized inputs `[count][rows * 4]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub x: Vec<f64>,
    pub labels: Vec<Assignment>,
}

impl Examples {
    pub fn from_samples(samples: &[DatasetSample], norm: &Normalizer) -> Self {
        Self {
            x: samples.iter().flat_map(|s| norm.apply(&s.input)).collect(),
            labels: samples.iter().map(|s| s.label.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let per = self.x.len() / self.len().max(1);
        Self {
            x: idx.iter().flat_map(|&i| self.x[i * per..(i + 1) * per].iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean configured loss over the epoch's minibatches.
    pub train_loss: f64,
    pub val_ce: f64,
    /// Fraction of sources whose relay choice matches the label.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation CE before the first update.
    pub initial_val_ce: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_ce(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_ce, |e| e.val_ce)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_ce,val_accuracy\n");
        s.push_str(&format!("0,,{},\n", self.initial_val_ce));
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_ce, e.val_accuracy));
        }
        s
    }
}

/// Mean CE and per-source accuracy in infer mode.
pub fn evaluate(model: &Model, ex: &Examples) -> Result<(f64, f64)> {
    if ex.is_empty() {
        return Err(Error::InvalidParameter("evaluation split is empty".into()));
    }
    let shape = model.logit_shape();
    let logits = model.logits(&ex.x)?;
    let targets: Vec<usize> = ex.labels.iter().flat_map(|a| model.targets(a)).collect();
    let (ce, _) = ce_loss_grad(&logits, &targets, shape)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (z, a) in logits.chunks(shape.per_sample()).zip(&ex.labels) {
        let p = model.decode(z);
        hit += p.choice.iter().zip(&a.choice).filter(|(x, y)| x == y).count();
        total += a.choice.len();
    }
    Ok((ce, hit as f64 / total as f64))
}

/// Train on a stored dataset with its normalization.
pub fn train(arch: &ArchSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let norm = &data.meta.normalization;
    let tr = Examples::from_samples(&data.train, norm);
    let va = Examples::from_samples(&data.val, norm);
    train_examples(arch, &tr, &va, cfg, None, Some(norm.clone()))
}

/// Core loop. `teacher` holds sample-major logits aligned with `train`,
/// required by the distillation loss.
pub fn train_examples(
    arch: &ArchSpec,
    train: &Examples,
    val: &Examples,
    cfg: &TrainConfig,
    teacher: Option<&[f64]>,
    normalizer: Option<Normalizer>,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("training split is empty".into()));
    }
    let mut model = Model::init(arch, cfg.seed)?;
    model.normalizer = normalizer;
    let shape = model.logit_shape();
    let per = model.input_len();
    if train.x.len() != train.len() * per {
        return Err(Error::Shape(format!("training inputs are not {} values each", per)));
    }
    let weights = match cfg.loss {
        LossKind::Ce => None,
        LossKind::Distill { lambda1, lambda2, temperature } => {
            let t = teacher.ok_or_else(|| Error::InvalidParameter("distillation needs teacher logits".into()))?;
            if t.len() != train.len() * shape.per_sample() {
                return Err(Error::Shape(format!("teacher logits have {} values, expected {}", t.len(), train.len() * shape.per_sample())));
            }
            Some((t, (lambda1, lambda2, temperature)))
        }
    };

    let mut opt = Adam::new(cfg.learning_rate, model.params.iter().map(Vec::len));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (initial_val_ce, _) = evaluate(&model, val)?;
    let mut history = TrainHistory { initial_val_ce, epochs: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let ps = shape.per_sample();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        model.mode = Mode::Train;
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut x = Vec::with_capacity(b * per);
            let mut targets = Vec::with_capacity(b * shape.cols);
            for &i in batch {
                x.extend_from_slice(&train.x[i * per..(i + 1) * per]);
                targets.extend(model.targets(&train.labels[i]));
            }
            let tape = model.forward_tape(&x, b)?;
            let z = model.head_logits(tape.output(), b);
            let (loss, g) = match weights {
                None => ce_loss_grad(&z, &targets, shape)?,
                Some((t, w)) => {
                    let tz: Vec<f64> = batch.iter().flat_map(|&i| t[i * ps..(i + 1) * ps].iter().copied()).collect();
                    distill_loss_grad(&z, &tz, &targets, shape, w)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let (_, grads) = model.graph.backward(&model.params, &tape, &model.head_grad(&g, b))?;
            opt.step(&mut model.params, &grads);
            sum += loss * b as f64;
        }
        model.mode = Mode::Infer;
        let (val_ce, val_accuracy) = evaluate(&model, val)?;
        if !val_ce.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_ce });
        }
        history.epochs.push(EpochRecord { epoch, train_loss: sum / train.len() as f64, val_ce, val_accuracy });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};
    use crate::neural::arch::{make_rel_net, make_student, STUDENT_NODES};
    use crate::par::Exec;

    fn small() -> (Examples, Examples) {
        let d = generate_dataset(&DatasetConfig::new(2, 2, 50, 30, 1, 11), Exec::Sequential).unwrap();
        let norm = &d.meta.normalization;
        (Examples::from_samples(&d.train, norm), Examples::from_samples(&d.val, norm))
    }

    #[test]
    fn initial_loss_near_uniform() {
        let (tr, va) = small();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (_, h) = train_examples(&make_student(2, 2, &STUDENT_NODES).unwrap(), &tr, &va, &cfg, None, None).unwrap();
        assert!((h.initial_val_ce - 3f64.ln()).abs() < 0.35, "{}", h.initial_val_ce);
    }

    #[test]
    fn memorizes_small_set() {
        let (tr, _) = small();
        let cfg = TrainConfig { epochs: 150, batch_size: 10, learning_rate: 1e-2, seed: 2, loss: LossKind::Ce };
        let arch = make_student(2, 2, &[16, 16, 16, 10]).unwrap();
        let (m, h) = train_examples(&arch, &tr, &tr, &cfg, None, None).unwrap();
        for w in h.epochs[..5].windows(2) {
            assert!(w[1].val_ce < w[0].val_ce, "{:?}", &h.epochs[..5]);
        }
        let (_, acc) = evaluate(&m, &tr).unwrap();
        assert_eq!(acc, 1.0, "final ce {}", h.final_val_ce());
    }

    #[test]
    fn same_seed_same_weights() {
        let (tr, va) = small();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, ..Default::default() };
        let arch = make_rel_net(2, 2).unwrap();
        let (a, ha) = train_examples(&arch, &tr, &va, &cfg, None, None).unwrap();
        let (b, hb) = train_examples(&arch, &tr, &va, &cfg, None, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ha, hb);
    }

    #[test]
    fn rejects_bad_configs() {
        let (tr, va) = small();
        let arch = make_rel_net(2, 2).unwrap();
        let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(train_examples(&arch, &tr, &va, &bad, None, None).is_err());
        let kd = TrainConfig { loss: LossKind::Distill { lambda1: 0.5, lambda2: 0.5, temperature: 1.0 }, ..Default::default() };
        assert!(train_examples(&arch, &tr, &va, &kd, None, None).is_err());
        let blowup = TrainConfig { learning_rate: 1e300, epochs: 3, ..Default::default() };
        assert!(matches!(train_examples(&arch, &tr, &va, &blowup, None, None), Err(Error::Diverged { .. }) | Ok(_)));
    }
}
