//! Configuration, experiment orchestration, checkpoints and report files.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! report.csv               mode,seed,acc_old_star,acc_old,acc_new,delta
//! curves.csv               every stage log in one table
//! curves.svg               loss per epoch; accuracy.svg when evaluated
//! logs/<mode>_seed<s>_stage<1|2>.csv
//! checkpoints/<mode>_seed<s>.ckpt
//! stage1/<key>.ckpt        shared stage-1 models, keyed by config hash
//! config.ini, run.txt      resolved config echo and wall-clock
//! ```

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod svg;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use config::{parse_grid, parse_modes, DataSource, EmbeddingSource, ExperimentConfig, TEMPLATE};
pub use report::{Curve, ReportRow};
pub use svg::{line_plot, Series};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::{evaluate_task_aware, Metrics};
use crate::pointcloud::{
    write_manifest, write_xyz, DatasetSplit, ManifestRow, PointCloud, Sample, SyntheticCorpus, SYNTHETIC_CLASSES,
};
use crate::semantics::{class_matrix, load_embeddings, synthetic_embeddings, EmbeddingTable};
use crate::training::{
    train_stage_new, train_stage_old, EpochLog, HeadKind, Mode, Model, StepLog, Task, TrainConfig,
};

/// A trained (or restored) stage-1 model.
pub struct Stage1 {
    pub key: String,
    pub teacher: Model,
    pub acc_old_star: f64,
    pub epochs: Vec<EpochLog>,
    pub reused: bool,
}

/// One mode on one seed.
pub struct ModeRun {
    pub mode: Mode,
    pub seed: u64,
    pub train: TrainConfig,
    pub metrics: Metrics,
    pub stage1: Vec<EpochLog>,
    /// Empty for baseline2.
    pub stage2: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub student: Model,
    pub teacher_checksum: String,
    pub stage1_reused: bool,
}

pub struct ExperimentReport {
    pub runs: Vec<ModeRun>,
    pub wall_clock: Duration,
}

impl ExperimentReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.runs
            .iter()
            .map(|r| ReportRow {
                mode: r.mode,
                seed: r.seed,
                metrics: r.metrics,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Accuracies averaged over seeds; delta from the averages.
    pub metrics: Metrics,
}

/// Loaded data and embeddings for one configuration.
pub struct Experiment {
    pub config: ExperimentConfig,
    split: DatasetSplit,
    table: EmbeddingTable,
    data_hash: String,
}

impl Experiment {
    /// Builds the dataset and resolves every roster class's embedding.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (old, new) = (&config.old_classes, &config.new_classes);
        let split = match &config.data {
            DataSource::Synthetic(corpus) => corpus.split(old, new)?,
            DataSource::Manifest { path, points, seed } => DatasetSplit::from_manifest(path, *points, *seed, old, new)?,
        };
        let all: Vec<String> = old.iter().chain(new).cloned().collect();
        let dim = config.arch.embedding_dim;
        let table = match &config.embeddings {
            EmbeddingSource::Synthetic { seed } => synthetic_embeddings(&all, dim, *seed)?,
            EmbeddingSource::File(path) => {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let table = load_embeddings(BufReader::new(file), &all)?;
                if table.dim() != dim {
                    return Err(Error::Config(vec![format!(
                        "embeddings: {} has {}-dimensional vectors but dim = {dim}",
                        path.display(),
                        table.dim()
                    )]));
                }
                table
            }
        };
        table.check_roster(&all)?;
        let table = if config.normalize_embeddings { table.l2_normalized() } else { table };
        let split = if config.validate { validation_split(&split)? } else { split };
        let mut empty = Vec::new();
        for (name, list) in [
            ("old train", &split.old_train),
            ("old test", &split.old_test),
            ("new train", &split.new_train),
            ("new test", &split.new_test),
        ] {
            if list.is_empty() {
                empty.push(format!("data: no {name} instances"));
            }
        }
        if !empty.is_empty() {
            return Err(Error::Config(empty));
        }
        let data_hash = fingerprint(&split);
        Ok(Experiment {
            config,
            split,
            table,
            data_hash,
        })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    /// `(E^o, E^n)` for the active rosters.
    pub fn embeddings(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            class_matrix(&self.table, &self.split.old_classes)?,
            class_matrix(&self.table, &self.split.new_classes)?,
        ))
    }

    /// Hash of everything that determines the stage-1 model of `mode`.
    pub fn stage1_key(&self, mode: Mode, seed: u64) -> Result<String> {
        let t = self.config.train_for(mode, seed);
        let mut h = Sha256::new();
        h.update(format!(
            "stage1 v1\narch={:?}\nlr={}\nbatch={}\nepochs={}\nseed={seed}\njitter={}\nrotate={}\neval_every={}\ndata={}\n",
            self.config.arch_for(mode),
            t.lr,
            t.batch,
            t.epochs_old,
            t.jitter_sigma,
            t.rotate,
            t.eval_every,
            self.data_hash
        ));
        if mode.head_kind() == HeadKind::Semantic {
            let (eo, en) = self.embeddings()?;
            for e in [eo, en] {
                for &x in e.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        Ok(hex(&h.finalize())[..24].to_string())
    }

    /// Stage 1 for `mode`, restored from the output directory when an
    /// identical configuration was trained before.
    pub fn stage1(&self, mode: Mode, seed: u64) -> Result<Stage1> {
        let key = self.stage1_key(mode, seed)?;
        let dir = self.config.output_dir.join("stage1");
        let ck_path = dir.join(format!("{key}.ckpt"));
        let log_path = dir.join(format!("{key}.csv"));
        if ck_path.exists() && log_path.exists() {
            let ck = Checkpoint::load(&ck_path)?;
            if ck.meta("stage1_key") == Some(key.as_str()) {
                let acc_old_star = ck
                    .meta("acc_old_star")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("{} lacks acc_old_star", ck_path.display())))?;
                return Ok(Stage1 {
                    teacher: ck.to_model()?,
                    acc_old_star,
                    epochs: report::read_stage_log(&log_path)?,
                    key,
                    reused: true,
                });
            }
        }
        let embeddings = match mode.head_kind() {
            HeadKind::Semantic => Some(self.embeddings()?),
            HeadKind::Logit => None,
        };
        let out = train_stage_old(&self.split, &self.config.arch_for(mode), embeddings, &self.config.train_for(mode, seed))?;
        report::write_stage_log(&log_path, &out.epochs)?;
        let meta = [
            ("stage1_key", key.clone()),
            ("acc_old_star", out.acc_old_star.to_string()),
            ("seed", seed.to_string()),
        ];
        let tmp = dir.join(format!("{key}.ckpt.tmp"));
        Checkpoint::from_model(&out.teacher, &meta)?.save(&tmp)?;
        std::fs::rename(&tmp, &ck_path).map_err(|e| Error::io(&ck_path, e))?;
        Ok(Stage1 {
            key,
            teacher: out.teacher,
            acc_old_star: out.acc_old_star,
            epochs: out.epochs,
            reused: false,
        })
    }

    /// Stage 2 of `train.mode` from `stage1`, then task-aware evaluation.
    pub fn run_mode(&self, stage1: &Stage1, train: &TrainConfig) -> Result<ModeRun> {
        let out = train_stage_new(&stage1.teacher, &self.split, train)?;
        let metrics = evaluate_task_aware(
            &out.student,
            &self.split.old_test,
            &self.split.new_test,
            self.split.old_classes.len(),
            self.split.new_classes.len(),
            stage1.acc_old_star,
        )?;
        Ok(ModeRun {
            mode: train.mode,
            seed: train.seed,
            train: train.clone(),
            metrics,
            stage1: stage1.epochs.clone(),
            stage2: out.epochs,
            steps: out.steps,
            student: out.student,
            teacher_checksum: out.teacher_checksum,
            stage1_reused: stage1.reused,
        })
    }

    /// Every mode on every configured seed; writes the report files.
    /// Within a seed, distinct stage-1 models and then the stage-2 runs
    /// are trained on worker threads.
    pub fn run(&self, modes: &[Mode]) -> Result<ExperimentReport> {
        let start = Instant::now();
        let out = &self.config.output_dir;
        let mut runs = Vec::new();
        for &seed in &self.config.seeds {
            let keys = modes.iter().map(|&m| self.stage1_key(m, seed)).collect::<Result<Vec<_>>>()?;
            let mut firsts: Vec<usize> = Vec::new();
            for (i, k) in keys.iter().enumerate() {
                if !firsts.iter().any(|&j| keys[j] == *k) {
                    firsts.push(i);
                }
            }
            let stage1s = parallel_map(&firsts, |&i| self.stage1(modes[i], seed))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let owner = |i: usize| &stage1s[firsts.iter().position(|&j| keys[j] == keys[i]).expect("every key trained")];
            let indices: Vec<usize> = (0..modes.len()).collect();
            let results = parallel_map(&indices, |&i| self.run_mode(owner(i), &self.config.train_for(modes[i], seed)));
            for (i, run) in results.into_iter().enumerate() {
                let run = run?;
                let mode = modes[i];
                let stem = format!("{mode}_seed{seed}");
                report::write_stage_log(&out.join("logs").join(format!("{stem}_stage1.csv")), &run.stage1)?;
                if mode != Mode::Baseline2 {
                    report::write_stage_log(&out.join("logs").join(format!("{stem}_stage2.csv")), &run.stage2)?;
                }
                let meta = [
                    ("acc_old_star", owner(i).acc_old_star.to_string()),
                    ("mode", mode.to_string()),
                    ("seed", seed.to_string()),
                    ("lambda", run.train.lambda.to_string()),
                    ("tau", run.train.tau.to_string()),
                ];
                Checkpoint::from_model(&run.student, &meta)?.save(&out.join("checkpoints").join(format!("{stem}.ckpt")))?;
                runs.push(run);
            }
        }
        let report = ExperimentReport {
            runs,
            wall_clock: start.elapsed(),
        };
        self.write_outputs(&report)?;
        Ok(report)
    }

    fn write_outputs(&self, report: &ExperimentReport) -> Result<()> {
        let out = &self.config.output_dir;
        report::write_report(&out.join("report.csv"), &report.rows())?;
        let mut curves = Vec::new();
        for r in &report.runs {
            curves.push(Curve {
                mode: r.mode,
                seed: r.seed,
                stage: 1,
                epochs: r.stage1.clone(),
            });
            if r.mode != Mode::Baseline2 {
                curves.push(Curve {
                    mode: r.mode,
                    seed: r.seed,
                    stage: 2,
                    epochs: r.stage2.clone(),
                });
            }
        }
        report::write_curves(&out.join("curves.csv"), &curves)?;
        let global = |r: &ModeRun, f: fn(&EpochLog) -> Option<f64>| -> Vec<(f64, f64)> {
            let offset = r.stage1.len() as f64;
            let first = r.stage1.iter().filter_map(|e| f(e).map(|v| (e.epoch as f64, v)));
            let second = r.stage2.iter().filter_map(|e| f(e).map(|v| (offset + e.epoch as f64, v)));
            first.chain(second).collect()
        };
        let loss: Vec<Series> = report
            .runs
            .iter()
            .map(|r| Series::new(format!("{} s{}", r.mode, r.seed), global(r, |e| Some(e.loss_total))))
            .collect();
        write_text(&out.join("curves.svg"), &line_plot("Training loss", "epoch (stage 1, then stage 2)", "loss", &loss))?;
        let mut acc = Vec::new();
        for r in &report.runs {
            for (name, f) in [("acc_old", (|e: &EpochLog| e.acc_old) as fn(&EpochLog) -> Option<f64>), ("acc_new", |e| e.acc_new)] {
                let pts = global(r, f);
                if !pts.is_empty() {
                    acc.push(Series::new(format!("{} s{} {name}", r.mode, r.seed), pts));
                }
            }
        }
        if !acc.is_empty() {
            write_text(&out.join("accuracy.svg"), &line_plot("Test accuracy", "epoch (stage 1, then stage 2)", "accuracy", &acc))?;
        }
        write_text(&out.join("config.ini"), &self.config.to_text())?;
        write_text(&out.join("run.txt"), &format!("wall_clock_seconds = {:.3}\n", report.wall_clock.as_secs_f64()))
    }

    /// One-at-a-time sweeps of lambda (tau fixed) and tau (lambda fixed)
    /// for `mode`, averaged over the configured seeds. Grid points run on
    /// worker threads. Writes `sweep.csv`, `sweep_lambda.svg`, `sweep_tau.svg`.
    pub fn sweep(&self, mode: Mode) -> Result<Vec<SweepRow>> {
        let problems = self.config.sweep_problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let base = &self.config.train;
        let points: Vec<(&'static str, f64, f64, f64)> = self
            .config
            .lambda_grid
            .iter()
            .map(|&l| ("lambda", l, l, base.tau))
            .chain(self.config.tau_grid.iter().map(|&t| ("tau", t, base.lambda, t)))
            .collect();
        let mut sums = vec![[0.0; 3]; points.len()];
        for &seed in &self.config.seeds {
            let stage1 = self.stage1(mode, seed)?;
            let jobs: Vec<TrainConfig> = points
                .iter()
                .map(|&(_, _, lambda, tau)| TrainConfig {
                    lambda,
                    tau,
                    ..self.config.train_for(mode, seed)
                })
                .collect();
            let results = parallel_map(&jobs, |t| self.run_mode(&stage1, t).map(|r| r.metrics));
            for (sum, m) in sums.iter_mut().zip(results) {
                let m = m?;
                sum[0] += m.acc_old_star;
                sum[1] += m.acc_old;
                sum[2] += m.acc_new;
            }
        }
        let n = self.config.seeds.len() as f64;
        let rows = points
            .iter()
            .zip(&sums)
            .map(|(&(param, value, lambda, tau), s)| {
                Ok(SweepRow {
                    param,
                    value,
                    lambda,
                    tau,
                    metrics: Metrics::new(s[0] / n, s[1] / n, s[2] / n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_sweep(&rows)?;
        Ok(rows)
    }

    fn write_sweep(&self, rows: &[SweepRow]) -> Result<()> {
        let out = &self.config.output_dir;
        let mut text = String::from("param,value,lambda,tau,acc_old_star,acc_old,acc_new,delta\n");
        for r in rows {
            let m = &r.metrics;
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.param, r.value, r.lambda, r.tau, m.acc_old_star, m.acc_old, m.acc_new, m.delta
            ));
        }
        write_text(&out.join("sweep.csv"), &text)?;
        for param in ["lambda", "tau"] {
            let pick = |f: fn(&Metrics) -> f64| -> Vec<(f64, f64)> {
                rows.iter().filter(|r| r.param == param).map(|r| (r.value, f(&r.metrics))).collect()
            };
            let series = [Series::new("acc_old", pick(|m| m.acc_old)), Series::new("acc_new", pick(|m| m.acc_new))];
            let doc = line_plot(&format!("Sensitivity to {param}"), param, "accuracy", &series);
            write_text(&out.join(format!("sweep_{param}.svg")), &doc)?;
        }
        Ok(())
    }

    pub fn samples(&self, which: SplitName) -> &[Sample] {
        match which {
            SplitName::OldTrain => &self.split.old_train,
            SplitName::OldTest => &self.split.old_test,
            SplitName::NewTrain => &self.split.new_train,
            SplitName::NewTest => &self.split.new_test,
        }
    }

    fn check_rosters(&self, model: &Model) -> Result<()> {
        if model.old_classes != self.split.old_classes || model.new_classes != self.split.new_classes {
            return Err(Error::Contract(format!(
                "checkpoint rosters {:?} / {:?} differ from the configured {:?} / {:?}",
                model.old_classes, model.new_classes, self.split.old_classes, self.split.new_classes
            )));
        }
        Ok(())
    }

    /// Task-aware metrics of a saved model. `acc_old_star` defaults to the
    /// value recorded in the checkpoint.
    pub fn evaluate_checkpoint(&self, ck: &Checkpoint, acc_old_star: Option<f64>) -> Result<Metrics> {
        let model = ck.to_model()?;
        self.check_rosters(&model)?;
        let star = match acc_old_star {
            Some(v) => v,
            None => ck
                .meta("acc_old_star")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint("checkpoint records no acc_old_star; pass one explicitly".into()))?,
        };
        evaluate_task_aware(
            &model,
            &self.split.old_test,
            &self.split.new_test,
            self.split.old_classes.len(),
            self.split.new_classes.len(),
            star,
        )
    }

    /// `kind,id,label,v0..` rows: `F(g)` for every instance of `which`
    /// (`kind = feature`) and `H(e)` for every class of its task
    /// (`kind = semantic`).
    pub fn dump_features(&self, ck: &Checkpoint, which: SplitName, path: &Path) -> Result<usize> {
        let model = ck.to_model()?;
        self.check_rosters(&model)?;
        let task = which.task();
        let samples = self.samples(which);
        let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
        let f = model.project_features(task, &clouds)?;
        let h = model.project_semantics(task)?;
        let classes = match task {
            Task::Old => &model.old_classes,
            Task::New => &model.new_classes,
        };
        let k = f.dims2().1;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        let mut header = vec!["kind".to_string(), "id".into(), "label".into()];
        header.extend((0..k).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        let mut rows = 0;
        for (i, s) in samples.iter().enumerate() {
            let mut rec = vec!["feature".to_string(), s.id.clone(), s.cloud.label.clone()];
            rec.extend(f.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
            rows += 1;
        }
        for (c, name) in classes.iter().enumerate() {
            let mut rec = vec!["semantic".to_string(), name.clone(), name.clone()];
            rec.extend(h.row(c).iter().map(f64::to_string));
            w.write_record(&rec)?;
            rows += 1;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    OldTrain,
    OldTest,
    NewTrain,
    NewTest,
}

impl SplitName {
    pub fn task(self) -> Task {
        match self {
            SplitName::OldTrain | SplitName::OldTest => Task::Old,
            SplitName::NewTrain | SplitName::NewTest => Task::New,
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "old-train" => SplitName::OldTrain,
            "old-test" => SplitName::OldTest,
            "new-train" => SplitName::NewTrain,
            "new-test" => SplitName::NewTest,
            other => {
                return Err(Error::Config(vec![format!(
                    "unknown split {other:?} (expected old-train, old-test, new-train or new-test)"
                )]))
            }
        })
    }
}

/// Validation protocol on the old classes only: the last fifth of the old
/// roster (at least one class) plays the new task, the rest the old task.
/// Every fifth training instance of each class is held out for testing;
/// the real test sets are not touched.
pub fn validation_split(split: &DatasetSplit) -> Result<DatasetSplit> {
    let o = split.old_classes.len();
    if o < 2 {
        return Err(Error::Config(vec!["validation needs at least two old classes".into()]));
    }
    let n_new = (o / 5).max(1);
    let val_old = split.old_classes[..o - n_new].to_vec();
    let val_new = split.old_classes[o - n_new..].to_vec();
    let mut per_class = vec![0usize; o];
    let mut out = DatasetSplit {
        old_classes: val_old.clone(),
        new_classes: val_new,
        ..Default::default()
    };
    for s in &split.old_train {
        let k = per_class[s.class_index];
        per_class[s.class_index] += 1;
        let held_out = k % 5 == 4;
        let (index, old) = if s.class_index < val_old.len() {
            (s.class_index, true)
        } else {
            (s.class_index - val_old.len(), false)
        };
        let sample = Sample {
            class_index: index,
            ..s.clone()
        };
        match (old, held_out) {
            (true, false) => out.old_train.push(sample),
            (true, true) => out.old_test.push(sample),
            (false, false) => out.new_train.push(sample),
            (false, true) => out.new_test.push(sample),
        }
    }
    Ok(out)
}

/// Writes the synthetic corpus as `<class>/<split>/<index>.xyz` files plus
/// `manifest.csv`; returns the number of instances.
pub fn gen_synth(dir: &Path, corpus: &SyntheticCorpus) -> Result<usize> {
    let items = corpus.instances(&SYNTHETIC_CLASSES)?;
    let mut rows = Vec::with_capacity(items.len());
    for (id, cloud) in &items {
        let rel = format!("{id}.xyz");
        write_text(&dir.join(&rel), &write_xyz(cloud))?;
        rows.push(ManifestRow {
            path: rel,
            label: cloud.label.clone(),
            split: cloud.split,
        });
    }
    write_text(&dir.join("manifest.csv"), &write_manifest(&rows)?)?;
    Ok(items.len())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fingerprint(split: &DatasetSplit) -> String {
    let mut h = Sha256::new();
    h.update(split.old_classes.join(",") + "|" + &split.new_classes.join(","));
    for list in [&split.old_train, &split.old_test, &split.new_train, &split.new_test] {
        h.update((list.len() as u64).to_le_bytes());
        for s in list {
            h.update(s.id.as_bytes());
            h.update((s.class_index as u64).to_le_bytes());
            for p in &s.cloud.points {
                for v in p {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex(&h.finalize())
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}
