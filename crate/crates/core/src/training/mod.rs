//! Losses, optimizer and the two training stages.
//!
//! Stage 1 trains a backbone and an old-task head from scratch with
//! cross-entropy. The result is frozen and becomes the teacher. Stage 2
//! copies the teacher into a student, adds a freshly initialized new-task
//! head, and trains on new-class data only with
//! `L = L_CE(new scores) + lambda * L_KD(student old scores, teacher old scores)`.

mod adam;
mod loss;
mod model;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::task_accuracy;
use crate::pointcloud::{augment, mix_seed, DatasetSplit, PointCloud, Sample};

pub use adam::Adam;
pub use loss::{cross_entropy_value, kd_value, loss_ce, loss_kd, total_loss};
pub use model::{Architecture, HeadKind, Model, Task, TaskHead, NEW_PREFIX, OLD_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Fine-tuning on new classes with semantic heads and no distillation.
    Baseline1,
    /// Distillation with plain logit heads.
    Lwf,
    /// No stage 2; new classes are scored zero-shot by the old model.
    Baseline2,
    /// Semantic heads with distillation.
    Ours,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline1, Mode::Lwf, Mode::Baseline2, Mode::Ours];

    pub fn head_kind(self) -> HeadKind {
        match self {
            Mode::Lwf => HeadKind::Logit,
            _ => HeadKind::Semantic,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline1 => "baseline1",
            Mode::Lwf => "lwf",
            Mode::Baseline2 => "baseline2",
            Mode::Ours => "ours",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown mode {s:?} (expected baseline1, lwf, baseline2 or ours)")]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs_old: usize,
    pub epochs_new: usize,
    pub seed: u64,
    pub mode: Mode,
    pub freeze_backbone: bool,
    /// Multiply the distillation term by `tau^2`.
    pub kd_tau_squared: bool,
    pub jitter_sigma: f64,
    pub rotate: bool,
    /// Evaluate test accuracy every this many epochs (0: never during training).
    pub eval_every: usize,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 3.0,
            tau: 3.0,
            lr: 1e-4,
            batch: 32,
            epochs_old: 50,
            epochs_new: 50,
            seed: 0,
            mode: Mode::Ours,
            freeze_backbone: false,
            kd_tau_squared: false,
            jitter_sigma: 0.0,
            rotate: false,
            eval_every: 0,
            progress: false,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            out.push("batch must be >= 1".into());
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            out.push(format!("jitter_sigma must be >= 0, got {}", self.jitter_sigma));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn augments(&self) -> bool {
        self.jitter_sigma > 0.0 || self.rotate
    }

    /// The distillation weight actually used by the mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::Baseline1 => 0.0,
            _ => self.lambda,
        }
    }
}

/// Per-epoch means of the step losses, plus test accuracies on evaluated epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
}

/// Teacher old-task scores of the stage-2 training instances, by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherTable {
    scores: BTreeMap<String, Vec<f64>>,
}

impl TeacherTable {
    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.scores
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("no recorded teacher output for instance {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn rows(&self, batch: &[&Sample]) -> Result<Tensor> {
        let mut data = Vec::new();
        for s in batch {
            data.extend_from_slice(self.get(&s.id)?);
        }
        Tensor::new(vec![batch.len(), data.len() / batch.len()], data)
    }
}

/// Runs the teacher once over the canonical clouds of `samples`.
pub fn record_teacher(teacher: &Model, samples: &[Sample]) -> Result<TeacherTable> {
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let scores = teacher.predict(Task::Old, &clouds)?;
    let scores = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), scores.row(i).to_vec()))
        .collect();
    Ok(TeacherTable { scores })
}

pub struct StageOld {
    /// Frozen old model.
    pub teacher: Model,
    pub acc_old_star: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

pub struct StageNew {
    pub student: Model,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    /// Teacher checksum, identical before and after the stage.
    pub teacher_checksum: String,
}

/// The frozen teacher next to the model trained on new classes.
pub struct ModelState {
    pub teacher: Model,
    pub student: Model,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Old,
    New,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Old => "old",
            Stage::New => "new",
        }
    }
}

struct Teacher<'a> {
    model: &'a Model,
    table: Option<TeacherTable>,
}

/// Trains backbone and old-task head from scratch on `split.old_train`.
/// The head kind follows `config.mode`; `embeddings` holds `(E^o, E^n)`
/// for semantic heads.
pub fn train_stage_old(
    split: &DatasetSplit,
    arch: &Architecture,
    embeddings: Option<(Tensor, Tensor)>,
    config: &TrainConfig,
) -> Result<StageOld> {
    config.validate()?;
    let arch = Architecture {
        kind: config.mode.head_kind(),
        ..arch.clone()
    };
    let mut model = Model::init(
        arch,
        split.old_classes.clone(),
        split.new_classes.clone(),
        embeddings,
        config.seed,
    )?;
    let (epochs, steps) = run_epochs(&mut model, split, Stage::Old, None, config)?;
    let acc_old_star = task_accuracy(&model, Task::Old, &split.old_test, split.old_classes.len())?;
    model.store.freeze_all();
    model.store.zero_grad();
    Ok(StageOld {
        teacher: model,
        acc_old_star,
        epochs,
        steps,
    })
}

/// Trains a student on `split.new_train` only. Fails with a protocol error
/// if that stream contains an old-class instance.
pub fn train_stage_new(teacher: &Model, split: &DatasetSplit, config: &TrainConfig) -> Result<StageNew> {
    config.validate()?;
    split.check_stage2_stream(&split.new_train)?;
    if teacher.arch.kind != config.mode.head_kind() {
        return Err(Error::Contract(format!(
            "mode {} needs {:?} heads but the teacher has {:?} heads",
            config.mode,
            config.mode.head_kind(),
            teacher.arch.kind
        )));
    }
    let checksum = teacher.store.checksum();
    let mut student = teacher.clone();
    let (epochs, steps) = if config.mode == Mode::Baseline2 {
        (Vec::new(), Vec::new())
    } else {
        student.store.set_trainable_prefix("", true);
        student.attach_new_head(config.seed)?;
        if config.freeze_backbone {
            student.store.set_trainable_prefix(crate::backbone::PREFIX, false);
        }
        let table = if config.augments() {
            None
        } else {
            Some(record_teacher(teacher, &split.new_train)?)
        };
        let t = Teacher { model: teacher, table };
        run_epochs(&mut student, split, Stage::New, Some(&t), config)?
    };
    if teacher.store.checksum() != checksum {
        return Err(Error::Contract("teacher parameters changed during stage 2".into()));
    }
    student.store.zero_grad();
    Ok(StageNew {
        student,
        epochs,
        steps,
        teacher_checksum: checksum,
    })
}

fn run_epochs(
    model: &mut Model,
    split: &DatasetSplit,
    stage: Stage,
    teacher: Option<&Teacher<'_>>,
    config: &TrainConfig,
) -> Result<(Vec<EpochLog>, Vec<StepLog>)> {
    let (train, total_epochs) = match stage {
        Stage::Old => (&split.old_train, config.epochs_old),
        Stage::New => (&split.new_train, config.epochs_new),
    };
    if train.is_empty() {
        return Err(Error::Contract(format!("no {} training instances", stage.name())));
    }
    let lambda = config.effective_lambda();
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(total_epochs);
    let mut steps = Vec::new();
    for epoch in 1..=total_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &format!("shuffle/{}", stage.name()), epoch as u64));
        order.shuffle(&mut rng);
        let first = steps.len();
        for (step, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let log = train_step(model, &mut adam, &batch, stage, teacher, lambda, config, epoch)?;
            steps.push(StepLog { step, ..log });
        }
        let n = (steps.len() - first) as f64;
        let mean = |f: fn(&StepLog) -> f64| steps[first..].iter().map(f).sum::<f64>() / n;
        let evaluate = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == total_epochs);
        let (acc_old, acc_new) = if evaluate {
            let acc_old = task_accuracy(&*model, Task::Old, &split.old_test, split.old_classes.len())?;
            let acc_new = if stage == Stage::New || model.arch.kind == HeadKind::Semantic {
                Some(task_accuracy(&*model, Task::New, &split.new_test, split.new_classes.len())?)
            } else {
                None
            };
            (Some(acc_old), acc_new)
        } else {
            (None, None)
        };
        let log = EpochLog {
            epoch,
            loss_total: mean(|s| s.loss_total),
            loss_ce: mean(|s| s.loss_ce),
            loss_kd: mean(|s| s.loss_kd),
            acc_old,
            acc_new,
        };
        if config.progress {
            eprintln!(
                "[{} stage {}] epoch {epoch}/{total_epochs} loss {:.5} (ce {:.5}, kd {:.5}){}",
                config.mode,
                stage.name(),
                log.loss_total,
                log.loss_ce,
                log.loss_kd,
                match (acc_old, acc_new) {
                    (Some(o), Some(n)) => format!(" acc_old {o:.4} acc_new {n:.4}"),
                    (Some(o), None) => format!(" acc_old {o:.4}"),
                    _ => String::new(),
                }
            );
        }
        epochs.push(log);
    }
    Ok((epochs, steps))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Sample],
    stage: Stage,
    teacher: Option<&Teacher<'_>>,
    lambda: f64,
    config: &TrainConfig,
    epoch: usize,
) -> Result<StepLog> {
    let augmented: Vec<PointCloud>;
    let clouds: Vec<&PointCloud> = if config.augments() {
        augmented = batch
            .iter()
            .map(|s| {
                let seed = mix_seed(config.seed, &format!("augment/{}/{}", stage.name(), s.id), epoch as u64);
                augment(&s.cloud, seed, config.jitter_sigma, config.rotate)
            })
            .collect::<Result<_>>()?;
        augmented.iter().collect()
    } else {
        batch.iter().map(|s| &s.cloud).collect()
    };
    let labels: Vec<usize> = batch.iter().map(|s| s.class_index).collect();
    let targets = match (stage, teacher) {
        (Stage::Old, _) => None,
        (Stage::New, Some(Teacher { table: Some(table), .. })) => Some(table.rows(batch)?),
        (Stage::New, Some(Teacher { model: t, table: None })) => Some(t.predict(Task::Old, &clouds)?),
        (Stage::New, None) => return Err(Error::Contract("stage 2 needs a teacher".into())),
    };

    model.store.zero_grad();
    let (grads, log) = {
        let mut graph = Graph::new(&model.store);
        let g = model.features(&mut graph, &clouds)?;
        let (total, ce, kd) = match &targets {
            None => {
                let scores = model.old_scores(&mut graph, g)?;
                let ce = loss_ce(&mut graph, scores, &labels)?;
                (ce, ce, None)
            }
            Some(targets) => {
                let new_scores = model.new_scores(&mut graph, g)?;
                let ce = loss_ce(&mut graph, new_scores, &labels)?;
                let old_scores = model.old_scores(&mut graph, g)?;
                let kd = loss_kd(&mut graph, old_scores, targets, config.tau, config.kd_tau_squared)?;
                (total_loss(&mut graph, ce, kd, lambda)?, ce, Some(kd))
            }
        };
        let value = |n| graph.value(n).data()[0];
        let log = StepLog {
            epoch,
            step: 0,
            loss_total: value(total),
            loss_ce: value(ce),
            loss_kd: kd.map_or(0.0, value),
        };
        (graph.backward(total)?, log)
    };
    model.store.accumulate(&grads);
    adam.step(&mut model.store)?;
    Ok(log)
}
