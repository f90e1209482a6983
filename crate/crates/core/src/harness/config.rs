//! Experiment files: `key = value` lines grouped under `[section]` headers.
//! `#` starts a comment. Relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::pointcloud::{SyntheticCorpus, NEW_CLASSES, OLD_CLASSES, SYNTHETIC_CLASSES};
use crate::training::{Architecture, HeadKind, Mode, TrainConfig};

/// Every key with its default value.
pub const TEMPLATE: &str = "\
[data]
source = synthetic          # synthetic | manifest
manifest =                  # path,label,split CSV (source = manifest)
seed = 0                    # corpus / resampling seed
points = 256
train_per_class = 200       # synthetic only
test_per_class = 50         # synthetic only
old_classes = sphere,cube,cylinder,cone,plane
new_classes = ellipsoid,box,torus

[embeddings]
source = synthetic          # synthetic | path to a word-vector text file
dim = 300
seed = 0
normalize = false

[model]
backbone_hidden = 64,128
feature_dim = 1024
head_widths = 512,256
relu_on_last = true

[train]
mode = ours                 # baseline1 | lwf | baseline2 | ours | all
seeds = 0
lambda = 3
tau = 3
lr = 0.0001
batch = 32
epochs_old = 50
epochs_new = 50
freeze_backbone = false
kd_tau_squared = false
jitter_sigma = 0
rotate = false
eval_every = 0
validate = false            # 4:1 val-old / val-new split of the old classes

[sweep]
lambda =                    # grid values in (0, 10]
tau =

[output]
dir = out
";

const KNOWN: &[(&str, &[&str])] = &[
    (
        "data",
        &["source", "manifest", "seed", "points", "train_per_class", "test_per_class", "old_classes", "new_classes"],
    ),
    ("embeddings", &["source", "dim", "seed", "normalize"]),
    ("model", &["backbone_hidden", "feature_dim", "head_widths", "relu_on_last"]),
    (
        "train",
        &[
            "mode", "seeds", "lambda", "tau", "lr", "batch", "epochs_old", "epochs_new", "freeze_backbone",
            "kd_tau_squared", "jitter_sigma", "rotate", "eval_every", "validate",
        ],
    ),
    ("sweep", &["lambda", "tau"]),
    ("output", &["dir"]),
];

/// Values of one swept hyperparameter.
pub type Grid = Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticCorpus),
    Manifest { path: PathBuf, points: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    Synthetic { seed: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub embeddings: EmbeddingSource,
    pub normalize_embeddings: bool,
    /// Head kind is decided per mode; `arch.kind` is ignored.
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Modes run by `run` when the command line does not pick one.
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub validate: bool,
    pub lambda_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("", Path::new("")).expect("empty config is valid")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Parses and validates `text`; every problem is reported at once.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw = Raw::read(text);
        let config = raw.build(base);
        let mut errors = raw.errors;
        errors.extend(config.problems());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        let mut seen = std::collections::BTreeSet::new();
        if self.old_classes.is_empty() || self.new_classes.is_empty() {
            out.push("data: old_classes and new_classes must be non-empty".into());
        }
        for c in self.old_classes.iter().chain(&self.new_classes) {
            if !seen.insert(c) {
                out.push(format!("data: class {c:?} appears more than once across the rosters"));
            }
        }
        let synthetic = matches!(self.data, DataSource::Synthetic(_));
        if synthetic || matches!(self.embeddings, EmbeddingSource::Synthetic { .. }) {
            for c in self.old_classes.iter().chain(&self.new_classes) {
                if !SYNTHETIC_CLASSES.contains(&c.as_str()) {
                    out.push(format!("data: {c:?} is not a synthetic class"));
                }
            }
        }
        match &self.data {
            DataSource::Synthetic(c) => {
                if c.points == 0 || c.train_per_class == 0 || c.test_per_class == 0 {
                    out.push("data: points and per-class counts must be >= 1".into());
                }
            }
            DataSource::Manifest { path, points, .. } => {
                if path.as_os_str().is_empty() {
                    out.push("data: source = manifest needs a manifest path".into());
                }
                if *points == 0 {
                    out.push("data: points must be >= 1".into());
                }
            }
        }
        if self.validate && self.old_classes.len() < 2 {
            out.push("train: validate needs at least two old classes".into());
        }
        if self.arch.embedding_dim == 0 {
            out.push("embeddings: dim must be >= 1".into());
        }
        let arch_dims = self.arch.backbone.hidden.iter().chain(&self.arch.head.feature_widths);
        if self.arch.backbone.feature_dim == 0 || self.arch.head.feature_widths.is_empty() || arch_dims.clone().any(|&w| w == 0) {
            out.push("model: layer widths must be >= 1 and head_widths non-empty".into());
        }
        if self.seeds.is_empty() {
            out.push("train: seeds must list at least one seed".into());
        }
        if self.modes.is_empty() {
            out.push("train: mode must name at least one mode".into());
        }
        for (name, grid) in [("lambda", &self.lambda_grid), ("tau", &self.tau_grid)] {
            for v in grid {
                if !(*v > 0.0 && *v <= 10.0) {
                    out.push(format!("sweep: {name} value {v} is outside (0, 10]"));
                }
            }
        }
        out
    }

    /// Checks that the sweep grids are usable.
    pub fn sweep_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lambda_grid.is_empty() || self.tau_grid.is_empty() {
            out.push("sweep: both the lambda and the tau grid must be non-empty".into());
        }
        out
    }

    /// Architecture used by `mode`.
    pub fn arch_for(&self, mode: Mode) -> Architecture {
        Architecture {
            kind: mode.head_kind(),
            ..self.arch.clone()
        }
    }

    pub fn train_for(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            seed,
            ..self.train.clone()
        }
    }

    /// The resolved configuration in the same file format.
    pub fn to_text(&self) -> String {
        let list = |v: &[String]| v.join(",");
        let nums = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let ints = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::from("[data]\n");
        match &self.data {
            DataSource::Synthetic(c) => {
                let _ = writeln!(s, "source = synthetic\nseed = {}\npoints = {}", c.seed, c.points);
                let _ = writeln!(s, "train_per_class = {}\ntest_per_class = {}", c.train_per_class, c.test_per_class);
            }
            DataSource::Manifest { path, points, seed } => {
                let _ = writeln!(s, "source = manifest\nmanifest = {}", path.display());
                let _ = writeln!(s, "seed = {seed}\npoints = {points}");
            }
        }
        let _ = writeln!(s, "old_classes = {}\nnew_classes = {}", list(&self.old_classes), list(&self.new_classes));
        s.push_str("\n[embeddings]\n");
        match &self.embeddings {
            EmbeddingSource::Synthetic { seed } => {
                let _ = writeln!(s, "source = synthetic\nseed = {seed}");
            }
            EmbeddingSource::File(path) => {
                let _ = writeln!(s, "source = {}", path.display());
            }
        }
        let _ = writeln!(s, "dim = {}\nnormalize = {}", self.arch.embedding_dim, self.normalize_embeddings);
        let _ = writeln!(
            s,
            "\n[model]\nbackbone_hidden = {}\nfeature_dim = {}\nhead_widths = {}\nrelu_on_last = {}",
            ints(&self.arch.backbone.hidden),
            self.arch.backbone.feature_dim,
            ints(&self.arch.head.feature_widths),
            self.arch.head.relu_on_last
        );
        let t = &self.train;
        let modes: Vec<String> = self.modes.iter().map(Mode::to_string).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "\n[train]\nmode = {}\nseeds = {}", modes.join(","), seeds.join(","));
        let _ = writeln!(s, "lambda = {}\ntau = {}\nlr = {}\nbatch = {}", t.lambda, t.tau, t.lr, t.batch);
        let _ = writeln!(s, "epochs_old = {}\nepochs_new = {}", t.epochs_old, t.epochs_new);
        let _ = writeln!(s, "freeze_backbone = {}\nkd_tau_squared = {}", t.freeze_backbone, t.kd_tau_squared);
        let _ = writeln!(s, "jitter_sigma = {}\nrotate = {}\neval_every = {}", t.jitter_sigma, t.rotate, t.eval_every);
        let _ = writeln!(s, "validate = {}", self.validate);
        let _ = writeln!(s, "\n[sweep]\nlambda = {}\ntau = {}", nums(&self.lambda_grid), nums(&self.tau_grid));
        let _ = writeln!(s, "\n[output]\ndir = {}", self.output_dir.display());
        s
    }
}

struct Raw {
    values: BTreeMap<(String, String), (usize, String)>,
    errors: Vec<String>,
}

impl Raw {
    fn read(text: &str) -> Self {
        let mut raw = Raw {
            values: BTreeMap::new(),
            errors: Vec::new(),
        };
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if KNOWN.iter().any(|(s, _)| *s == name) {
                    section = Some(name.to_string());
                } else {
                    raw.errors.push(format!("line {n}: unknown section [{name}]"));
                    section = None;
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                raw.errors.push(format!("line {n}: expected `key = value`, got {line:?}"));
                continue;
            };
            let key = key.trim();
            let Some(sec) = &section else {
                raw.errors.push(format!("line {n}: key {key:?} outside a known section"));
                continue;
            };
            let keys = KNOWN.iter().find(|(s, _)| s == sec).map(|(_, k)| *k).unwrap_or(&[]);
            if !keys.contains(&key) {
                raw.errors.push(format!("line {n}: unknown key {key:?} in [{sec}]"));
                continue;
            }
            let slot = (sec.clone(), key.to_string());
            if let Some((first, _)) = raw.values.get(&slot) {
                raw.errors.push(format!("line {n}: {sec}.{key} already set on line {first}"));
                continue;
            }
            raw.values.insert(slot, (n, value.trim().to_string()));
        }
        raw
    }

    fn text(&self, section: &str, key: &str) -> Option<&(usize, String)> {
        self.values.get(&(section.to_string(), key.to_string()))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> T {
        match self.text(section, key).cloned() {
            Some((_, v)) if v.is_empty() => default,
            Some((n, v)) => v.parse().unwrap_or_else(|_| {
                self.errors.push(format!("line {n}: {section}.{key}: cannot parse {v:?}"));
                default
            }),
            None => default,
        }
    }

    fn flag(&mut self, section: &str, key: &str, default: bool) -> bool {
        match self.text(section, key).cloned() {
            Some((n, v)) => match v.to_ascii_lowercase().as_str() {
                "" => default,
                "true" | "yes" | "on" | "1" => true,
                "false" | "no" | "off" | "0" => false,
                _ => {
                    self.errors.push(format!("line {n}: {section}.{key}: expected true or false, got {v:?}"));
                    default
                }
            },
            None => default,
        }
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Vec<T> {
        match self.text(section, key).cloned() {
            Some((n, v)) => {
                let mut out = Vec::new();
                for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match item.parse() {
                        Ok(x) => out.push(x),
                        Err(_) => self.errors.push(format!("line {n}: {section}.{key}: cannot parse {item:?}")),
                    }
                }
                out
            }
            None => default,
        }
    }

    fn build(&mut self, base: &Path) -> ExperimentConfig {
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

        let corpus = SyntheticCorpus::default();
        let seed = self.get("data", "seed", corpus.seed);
        let points = self.get("data", "points", corpus.points);
        let source: String = self.get("data", "source", "synthetic".to_string());
        let data = match source.as_str() {
            "synthetic" => DataSource::Synthetic(SyntheticCorpus {
                seed,
                points,
                train_per_class: self.get("data", "train_per_class", corpus.train_per_class),
                test_per_class: self.get("data", "test_per_class", corpus.test_per_class),
            }),
            "manifest" => DataSource::Manifest {
                path: self.text("data", "manifest").map(|(_, p)| p.as_str()).filter(|p| !p.is_empty()).map(resolve).unwrap_or_default(),
                points,
                seed,
            },
            other => {
                self.errors.push(format!("data.source: expected synthetic or manifest, got {other:?}"));
                DataSource::Synthetic(corpus)
            }
        };
        let old_classes = self.list("data", "old_classes", names(&OLD_CLASSES));
        let new_classes = self.list("data", "new_classes", names(&NEW_CLASSES));

        let source: String = self.get("embeddings", "source", "synthetic".to_string());
        let embeddings = match source.as_str() {
            "synthetic" => EmbeddingSource::Synthetic {
                seed: self.get("embeddings", "seed", 0),
            },
            path => EmbeddingSource::File(resolve(path)),
        };
        let defaults = Architecture::default();
        let arch = Architecture {
            kind: HeadKind::Semantic,
            backbone: BackboneConfig {
                hidden: self.list("model", "backbone_hidden", defaults.backbone.hidden),
                feature_dim: self.get("model", "feature_dim", defaults.backbone.feature_dim),
            },
            head: HeadConfig {
                feature_widths: self.list("model", "head_widths", defaults.head.feature_widths),
                relu_on_last: self.flag("model", "relu_on_last", defaults.head.relu_on_last),
            },
            embedding_dim: self.get("embeddings", "dim", defaults.embedding_dim),
        };

        let d = TrainConfig::default();
        let modes: Vec<String> = self.list("train", "mode", vec!["ours".to_string()]);
        let modes = self.modes(&modes);
        let train = TrainConfig {
            lambda: self.get("train", "lambda", d.lambda),
            tau: self.get("train", "tau", d.tau),
            lr: self.get("train", "lr", d.lr),
            batch: self.get("train", "batch", d.batch),
            epochs_old: self.get("train", "epochs_old", d.epochs_old),
            epochs_new: self.get("train", "epochs_new", d.epochs_new),
            seed: 0,
            mode: modes.first().copied().unwrap_or(d.mode),
            freeze_backbone: self.flag("train", "freeze_backbone", d.freeze_backbone),
            kd_tau_squared: self.flag("train", "kd_tau_squared", d.kd_tau_squared),
            jitter_sigma: self.get("train", "jitter_sigma", d.jitter_sigma),
            rotate: self.flag("train", "rotate", d.rotate),
            eval_every: self.get("train", "eval_every", d.eval_every),
            progress: false,
        };
        ExperimentConfig {
            data,
            old_classes,
            new_classes,
            embeddings,
            normalize_embeddings: self.flag("embeddings", "normalize", false),
            arch,
            train,
            modes,
            seeds: self.list("train", "seeds", vec![0]),
            validate: self.flag("train", "validate", false),
            lambda_grid: self.list("sweep", "lambda", Vec::new()),
            tau_grid: self.list("sweep", "tau", Vec::new()),
            output_dir: resolve(&self.get("output", "dir", "out".to_string())),
        }
    }

    fn modes(&mut self, names: &[String]) -> Vec<Mode> {
        match parse_modes(&names.join(",")) {
            Ok(m) => m,
            Err(e) => {
                self.errors.push(format!("train.mode: {e}"));
                vec![Mode::Ours]
            }
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// `ours`, `baseline1,lwf` or `all`.
pub fn parse_modes(text: &str) -> std::result::Result<Vec<Mode>, String> {
    let mut out = Vec::new();
    for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if name == "all" {
            out.extend(Mode::ALL);
            continue;
        }
        match name.parse::<Mode>() {
            Ok(m) => out.push(m),
            Err(_) => return Err(format!("unknown mode {name:?} (expected baseline1, lwf, baseline2, ours or all)")),
        }
    }
    out.dedup();
    Ok(out)
}

/// Parses `lambda=1,3,5;tau=2,4` (also `λ`/`τ`, `,` between assignments).
pub fn parse_grid(spec: &str) -> Result<(Option<Grid>, Option<Grid>)> {
    let mut errors = Vec::new();
    let mut current: Option<&mut Vec<f64>> = None;
    let mut lambda_values = Vec::new();
    let mut tau_values = Vec::new();
    let (mut saw_lambda, mut saw_tau) = (false, false);
    for token in spec.split([',', ';', ' ']).map(str::trim).filter(|s| !s.is_empty()) {
        let value = match token.split_once('=') {
            Some((key, value)) => {
                match key.trim() {
                    "lambda" | "λ" => {
                        saw_lambda = true;
                        current = Some(&mut lambda_values);
                    }
                    "tau" | "τ" => {
                        saw_tau = true;
                        current = Some(&mut tau_values);
                    }
                    other => {
                        errors.push(format!("grid: unknown hyperparameter {other:?}"));
                        current = None;
                    }
                }
                value.trim()
            }
            None => token,
        };
        if value.is_empty() {
            continue;
        }
        match (value.parse::<f64>(), current.as_deref_mut()) {
            (Ok(v), Some(list)) if v > 0.0 && v <= 10.0 => list.push(v),
            (Ok(v), Some(_)) => errors.push(format!("grid: value {v} is outside (0, 10]")),
            (Err(_), _) => errors.push(format!("grid: cannot parse {value:?}")),
            (Ok(_), None) => errors.push(format!("grid: value {value} before any `name=`")),
        }
    }
    let lambda = saw_lambda.then_some(lambda_values);
    let tau = saw_tau.then_some(tau_values);
    if errors.is_empty() {
        Ok((lambda, tau))
    } else {
        Err(Error::Config(errors))
    }
}
