//! Column-softmax losses on sample-major logits `[B][classes][cols]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogitShape {
    pub classes: usize,
    pub cols: usize,
}

impl LogitShape {
    pub fn per_sample(&self) -> usize {
        self.classes * self.cols
    }

    fn batch(&self, logits: &[f64]) -> Result<usize> {
        let ps = self.per_sample();
        if ps == 0 || logits.len() % ps != 0 {
            return Err(Error::Shape(format!("{} logits do not split into {}x{} samples", logits.len(), self.classes, self.cols)));
        }
        Ok(logits.len() / ps)
    }
}

/// Log-softmax of `logits / t` down each column.
pub fn log_softmax_columns(logits: &[f64], shape: LogitShape, t: f64) -> Vec<f64> {
    let (nc, ncol) = (shape.classes, shape.cols);
    let mut out = vec![0.0; logits.len()];
    for (z, o) in logits.chunks(shape.per_sample()).zip(out.chunks_mut(shape.per_sample())) {
        for i in 0..ncol {
            let max = (0..nc).map(|j| z[j * ncol + i] / t).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..nc).map(|j| (z[j * ncol + i] / t - max).exp()).sum::<f64>().ln();
            for j in 0..nc {
                o[j * ncol + i] = z[j * ncol + i] / t - lse;
            }
        }
    }
    out
}

pub fn softmax_columns(logits: &[f64], shape: LogitShape, t: f64) -> Vec<f64> {
    log_softmax_columns(logits, shape, t).into_iter().map(f64::exp).collect()
}

fn check_labels(labels: &[usize], shape: LogitShape, b: usize) -> Result<()> {
    if labels.len() != b * shape.cols {
        return Err(Error::Shape(format!("{} labels for {} samples of {} columns", labels.len(), b, shape.cols)));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= shape.classes) {
        return Err(Error::Shape(format!("label {l} out of {} classes", shape.classes)));
    }
    Ok(())
}

/// Batch-mean cross-entropy, averaged over columns, and its gradient.
/// `labels` holds one class per column, sample-major.
pub fn ce_loss_grad(logits: &[f64], labels: &[usize], shape: LogitShape) -> Result<(f64, Vec<f64>)> {
    let b = shape.batch(logits)?;
    check_labels(labels, shape, b)?;
    let ncol = shape.cols;
    let logp = log_softmax_columns(logits, shape, 1.0);
    let scale = 1.0 / (b * ncol) as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = logp.iter().map(|l| scale * l.exp()).collect();
    for s in 0..b {
        for i in 0..ncol {
            let at = s * shape.per_sample() + labels[s * ncol + i] * ncol + i;
            loss -= logp[at];
            grad[at] -= scale;
        }
    }
    Ok((loss * scale, grad))
}

pub fn ce_loss(logits: &[f64], labels: &[usize], shape: LogitShape) -> Result<f64> {
    Ok(ce_loss_grad(logits, labels, shape)?.0)
}

/// Batch-mean KL divergence from the softened teacher to the softened
/// student, averaged over columns, and its gradient in the student logits.
pub fn kld_loss_grad(student: &[f64], teacher: &[f64], shape: LogitShape, t: f64) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!("student has {} logits, teacher {}", student.len(), teacher.len())));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {t}")));
    }
    let b = shape.batch(student)?;
    let scale = 1.0 / (b * shape.cols) as f64;
    let lq = log_softmax_columns(student, shape, t);
    let lp = log_softmax_columns(teacher, shape, t);
    let mut loss = 0.0;
    let mut grad = vec![0.0; student.len()];
    for ((g, a), q) in grad.iter_mut().zip(&lp).zip(&lq) {
        let p = a.exp();
        if p > 0.0 {
            loss += p * (a - q);
        }
        *g = scale / t * (q.exp() - p);
    }
    Ok((loss * scale, grad))
}

pub fn kld_loss(student: &[f64], teacher: &[f64], shape: LogitShape, t: f64) -> Result<f64> {
    Ok(kld_loss_grad(student, teacher, shape, t)?.0)
}

/// `lambda1 * ce + lambda2 * kld`.
pub fn distill_loss_grad(
    student: &[f64],
    teacher: &[f64],
    labels: &[usize],
    shape: LogitShape,
    (lambda1, lambda2, t): (f64, f64, f64),
) -> Result<(f64, Vec<f64>)> {
    let (ce, gce) = ce_loss_grad(student, labels, shape)?;
    let (kl, gkl) = kld_loss_grad(student, teacher, shape, t)?;
    let grad = gce.iter().zip(&gkl).map(|(a, b)| lambda1 * a + lambda2 * b).collect();
    Ok((lambda1 * ce + lambda2 * kl, grad))
}

pub fn distill_loss(
    student: &[f64],
    teacher: &[f64],
    labels: &[usize],
    shape: LogitShape,
    weights: (f64, f64, f64),
) -> Result<f64> {
    Ok(distill_loss_grad(student, teacher, labels, shape, weights)?.0)
}
