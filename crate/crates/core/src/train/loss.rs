//! Cross-entropy over all seen classes and its per-task variant.
//!
//! Both functions return the scalar loss and its gradient at the logits.
//! For the per-task variant each sample's softmax spans only the classes of
//! its own task, so the gradient is exactly zero everywhere else.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax over every seen class (learns cross-task features).
    Ce,
    /// Softmax within the sample's own task only.
    CeIt,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::CeIt => "ce_it",
        }
    }
}

/// How per-sample terms are combined.
///
/// `Sum`: CE is the plain sum over the batch; CE-IT is that sum times `1/T`.
/// `Mean`: CE divides by the batch size; CE-IT takes the mean inside each
/// task present in the batch and averages those means, so relative to `Sum`
/// the gradient of a sample from task `t` is scaled by `T / (T' · |B^t|)`
/// with `T'` the number of tasks present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// `-log softmax(z)[label]` over `z[range]` and the softmax written into
/// `grad[range]` (minus one at the label).
fn softmax_ce(z: &[f64], grad: &mut [f64], label: usize) -> f64 {
    let mut top = 0;
    for c in 1..z.len() {
        if z[c] > z[top] {
            top = c;
        }
    }
    let max = z[top];
    // log-sum-exp as max + ln(1 + rest) keeps tiny losses accurate
    let mut rest = 0.0;
    for (c, (g, &v)) in grad.iter_mut().zip(z).enumerate() {
        *g = (v - max).exp();
        if c != top {
            rest += *g;
        }
    }
    let sum = 1.0 + rest;
    for g in grad.iter_mut() {
        *g /= sum;
    }
    grad[label] -= 1.0;
    rest.ln_1p() + (max - z[label])
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Config(format!(
            "logits of shape {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Config(format!(
            "label {bad} outside the {} active classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Cross-entropy with the softmax over every column of `logits`.
pub fn loss_ce(logits: &Tensor, labels: &[usize], reduction: Reduction) -> Result<(f64, Tensor)> {
    check_labels(logits, labels)?;
    let mut grad = Tensor::zeros_like(logits);
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        loss += softmax_ce(logits.row(i), grad.row_mut(i), label);
    }
    if reduction == Reduction::Mean {
        let scale = 1.0 / labels.len() as f64;
        loss *= scale;
        grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss, grad))
}

/// Per-task cross-entropy. `class_to_task[c]` is the 1-based task of class
/// `c` and must cover every column; `n_tasks` is `T`.
pub fn loss_ce_it(
    logits: &Tensor,
    labels: &[usize],
    class_to_task: &[usize],
    n_tasks: usize,
    reduction: Reduction,
) -> Result<(f64, Tensor)> {
    check_labels(logits, labels)?;
    let width = logits.cols();
    if class_to_task.len() < width {
        return Err(Error::Config(format!(
            "class_to_task covers {} classes, logits have {width}",
            class_to_task.len()
        )));
    }
    let c2t = &class_to_task[..width];
    if let Some(&bad) = c2t.iter().find(|&&task| task == 0 || task > n_tasks) {
        return Err(Error::Config(format!(
            "class_to_task entry {bad} outside 1..={n_tasks}"
        )));
    }
    let mut grad = Tensor::zeros_like(logits);
    if labels.is_empty() {
        return Ok((0.0, grad));
    }

    let mut per_task_count = vec![0usize; n_tasks];
    for &label in labels {
        let task = c2t[label];
        if class_to_task[width..].contains(&task) {
            return Err(Error::Config(format!(
                "task {task} of label {label} is only partly covered by the logits"
            )));
        }
        per_task_count[task - 1] += 1;
    }
    let present = per_task_count.iter().filter(|&&n| n > 0).count();

    let mut loss = 0.0;
    let mut z = Vec::new();
    let mut g = Vec::new();
    let mut cols = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let task = c2t[label];
        cols.clear();
        cols.extend((0..width).filter(|&c| c2t[c] == task));
        z.clear();
        z.extend(cols.iter().map(|&c| logits.row(i)[c]));
        g.clear();
        g.resize(cols.len(), 0.0);
        let local = cols.iter().position(|&c| c == label).expect("label is in its own task");
        let scale = match reduction {
            Reduction::Sum => 1.0 / n_tasks as f64,
            Reduction::Mean => 1.0 / (present * per_task_count[task - 1]) as f64,
        };
        loss += scale * softmax_ce(&z, &mut g, local);
        let row = grad.row_mut(i);
        for (&c, &gc) in cols.iter().zip(&g) {
            row[c] = scale * gc;
        }
    }
    Ok((loss, grad))
}

/// Dispatches on `kind`; `class_to_task` and `n_tasks` are ignored for CE.
pub fn loss_and_grad(
    kind: LossKind,
    logits: &Tensor,
    labels: &[usize],
    class_to_task: &[usize],
    n_tasks: usize,
    reduction: Reduction,
) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::Ce => loss_ce(logits, labels, reduction),
        LossKind::CeIt => loss_ce_it(logits, labels, class_to_task, n_tasks, reduction),
    }
}
