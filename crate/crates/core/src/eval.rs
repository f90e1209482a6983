//! Task-aware top-1 accuracy and the forgetting measure.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, Sample};
use crate::training::{Model, Task};

/// Accuracies are fractions in `[0, 1]`; `delta` is a percentage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub acc_old_star: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub delta: f64,
}

impl Metrics {
    pub fn new(acc_old_star: f64, acc_old: f64, acc_new: f64) -> Result<Self> {
        Ok(Metrics {
            acc_old_star,
            acc_old,
            acc_new,
            delta: delta_forgetting(acc_old_star, acc_old)?,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let (rows, _) = scores.dims2();
    (0..rows).map(|r| argmax(scores.row(r))).collect()
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn top1(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Contract(format!(
            "top1 needs equal non-empty inputs, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// `(acc_old_star - acc_old) / acc_old_star * 100`. Works for fractions and
/// percentages alike.
pub fn delta_forgetting(acc_old_star: f64, acc_old: f64) -> Result<f64> {
    if acc_old_star <= 0.0 || !acc_old_star.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "forgetting is undefined for a reference accuracy of {acc_old_star}"
        )));
    }
    Ok((acc_old_star - acc_old) / acc_old_star * 100.0)
}

/// Anything that scores old-task and new-task instances separately.
pub trait TaskScorer {
    fn task_scores(&self, task: Task, clouds: &[&PointCloud]) -> Result<Tensor>;
}

impl TaskScorer for Model {
    fn task_scores(&self, task: Task, clouds: &[&PointCloud]) -> Result<Tensor> {
        self.predict(task, clouds)
    }
}

/// Top-1 accuracy of `samples` scored against `task`'s head only.
pub fn task_accuracy(scorer: &impl TaskScorer, task: Task, samples: &[Sample], classes: usize) -> Result<f64> {
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let scores = scorer.task_scores(task, &clouds)?;
    if scores.dims2() != (samples.len(), classes) {
        return Err(Error::Contract(format!(
            "scorer returned {:?} scores for {} samples of {classes} classes",
            scores.shape(),
            samples.len()
        )));
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.class_index).collect();
    if let Some(bad) = truth.iter().find(|&&t| t >= classes) {
        return Err(Error::Contract(format!("label index {bad} outside a {classes}-class roster")));
    }
    top1(&argmax_rows(&scores), &truth)
}

/// Old-test instances are scored by the old head, new-test instances by the
/// new head (or the zero-shot path when there is none).
pub fn evaluate_task_aware(
    scorer: &impl TaskScorer,
    old_test: &[Sample],
    new_test: &[Sample],
    old_classes: usize,
    new_classes: usize,
    acc_old_star: f64,
) -> Result<Metrics> {
    let acc_old = task_accuracy(scorer, Task::Old, old_test, old_classes)?;
    let acc_new = task_accuracy(scorer, Task::New, new_test, new_classes)?;
    Metrics::new(acc_old_star, acc_old, acc_new)
}
