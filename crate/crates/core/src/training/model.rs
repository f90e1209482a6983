use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::backbone::{BackboneConfig, FeatureExtractor, PointNetBackbone};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, LogitHead, ProjectionHead};
use crate::pointcloud::{mix_seed, PointCloud};

pub const OLD_PREFIX: &str = "old";
pub const NEW_PREFIX: &str = "new";

/// Rows per forward pass when scoring outside of training.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Projection heads scored against class embeddings.
    Semantic,
    /// Plain linear classifiers.
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Old,
    New,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub kind: HeadKind,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub embedding_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            kind: HeadKind::Semantic,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            embedding_dim: crate::semantics::DEFAULT_DIM,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TaskHead {
    Semantic(ProjectionHead),
    Logit(LogitHead),
}

impl TaskHead {
    fn init(store: &mut ParamStore, arch: &Architecture, prefix: &str, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, prefix, 1));
        let m = arch.backbone.feature_dim;
        Ok(match arch.kind {
            HeadKind::Semantic => {
                TaskHead::Semantic(ProjectionHead::init(store, prefix, m, arch.embedding_dim, &arch.head, &mut rng)?)
            }
            HeadKind::Logit => TaskHead::Logit(LogitHead::init(store, prefix, m, classes, &mut rng)?),
        })
    }

    fn bind(store: &ParamStore, arch: &Architecture, prefix: &str, classes: usize) -> Result<Self> {
        let m = arch.backbone.feature_dim;
        Ok(match arch.kind {
            HeadKind::Semantic => TaskHead::Semantic(ProjectionHead::bind(store, prefix, m, arch.embedding_dim, &arch.head)?),
            HeadKind::Logit => TaskHead::Logit(LogitHead::bind(store, prefix, m, classes)?),
        })
    }

    fn scores(&self, graph: &mut Graph<'_>, g: NodeId, classes: Option<&Tensor>) -> Result<NodeId> {
        match self {
            TaskHead::Semantic(head) => {
                let e = classes.ok_or_else(|| Error::Contract("semantic head without class embeddings".into()))?;
                let e = graph.input(e.clone());
                head.scores(graph, g, e)
            }
            TaskHead::Logit(head) => head.scores(graph, g),
        }
    }
}

/// Backbone plus one head per task, all parameters in one [`ParamStore`].
///
/// Parameter names start with `backbone.`, `old.` or `new.`.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub store: ParamStore,
    backbone: PointNetBackbone,
    old_head: TaskHead,
    new_head: Option<TaskHead>,
    e_old: Option<Tensor>,
    e_new: Option<Tensor>,
}

impl Model {
    /// Fresh backbone and old-task head. `embeddings` (`E^o`, `E^n`) is
    /// required for semantic heads and ignored otherwise.
    pub fn init(
        arch: Architecture,
        old_classes: Vec<String>,
        new_classes: Vec<String>,
        embeddings: Option<(Tensor, Tensor)>,
        seed: u64,
    ) -> Result<Self> {
        let (e_old, e_new) = check_embeddings(&arch, &old_classes, &new_classes, embeddings)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, crate::backbone::PREFIX, 1));
        let backbone = PointNetBackbone::init(&mut store, &arch.backbone, &mut rng)?;
        let old_head = TaskHead::init(&mut store, &arch, OLD_PREFIX, old_classes.len(), seed)?;
        Ok(Model {
            arch,
            old_classes,
            new_classes,
            store,
            backbone,
            old_head,
            new_head: None,
            e_old,
            e_new,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_store(
        arch: Architecture,
        old_classes: Vec<String>,
        new_classes: Vec<String>,
        embeddings: Option<(Tensor, Tensor)>,
        store: ParamStore,
    ) -> Result<Self> {
        let (e_old, e_new) = check_embeddings(&arch, &old_classes, &new_classes, embeddings)?;
        let backbone = PointNetBackbone::bind(&store, &arch.backbone)?;
        let old_head = TaskHead::bind(&store, &arch, OLD_PREFIX, old_classes.len())?;
        let has_new = store.ids().any(|id| store.name(id).starts_with("new."));
        let new_head = if has_new {
            Some(TaskHead::bind(&store, &arch, NEW_PREFIX, new_classes.len())?)
        } else {
            None
        };
        Ok(Model {
            arch,
            old_classes,
            new_classes,
            store,
            backbone,
            old_head,
            new_head,
            e_old,
            e_new,
        })
    }

    /// Registers a freshly initialized new-task head.
    pub fn attach_new_head(&mut self, seed: u64) -> Result<()> {
        if self.new_head.is_some() {
            return Err(Error::Contract("model already has a new-task head".into()));
        }
        self.new_head = Some(TaskHead::init(&mut self.store, &self.arch, NEW_PREFIX, self.new_classes.len(), seed)?);
        Ok(())
    }

    pub fn has_new_head(&self) -> bool {
        self.new_head.is_some()
    }

    pub fn backbone(&self) -> &PointNetBackbone {
        &self.backbone
    }

    pub fn class_matrix(&self, task: Task) -> Option<&Tensor> {
        match task {
            Task::Old => self.e_old.as_ref(),
            Task::New => self.e_new.as_ref(),
        }
    }

    pub fn features(&self, graph: &mut Graph<'_>, clouds: &[&PointCloud]) -> Result<NodeId> {
        self.backbone.extract(graph, clouds)
    }

    /// `[B x O]` old-task scores.
    pub fn old_scores(&self, graph: &mut Graph<'_>, g: NodeId) -> Result<NodeId> {
        self.old_head.scores(graph, g, self.e_old.as_ref())
    }

    /// `[B x N]` new-task scores: the new head when present, otherwise the
    /// old semantic pipeline applied to the new class embeddings.
    pub fn new_scores(&self, graph: &mut Graph<'_>, g: NodeId) -> Result<NodeId> {
        match (&self.new_head, &self.old_head) {
            (Some(head), _) => head.scores(graph, g, self.e_new.as_ref()),
            (None, TaskHead::Semantic(_)) => self.old_head.scores(graph, g, self.e_new.as_ref()),
            (None, TaskHead::Logit(_)) => Err(Error::Contract(
                "a logit model has no new-task scores before stage 2".into(),
            )),
        }
    }

    /// Forward-only scores for `clouds`, one row each.
    pub fn predict(&self, task: Task, clouds: &[&PointCloud]) -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut width = 0;
        for chunk in clouds.chunks(EVAL_CHUNK) {
            let mut graph = Graph::new(&self.store);
            let g = self.features(&mut graph, chunk)?;
            let s = match task {
                Task::Old => self.old_scores(&mut graph, g)?,
                Task::New => self.new_scores(&mut graph, g)?,
            };
            width = graph.value(s).shape()[1];
            rows.extend_from_slice(graph.value(s).data());
        }
        if clouds.is_empty() {
            return Err(Error::Contract("nothing to score".into()));
        }
        Tensor::new(vec![clouds.len(), width], rows)
    }

    fn semantic_head(&self, task: Task) -> Result<&ProjectionHead> {
        let head = match task {
            Task::Old => Some(&self.old_head),
            Task::New => self.new_head.as_ref().or(Some(&self.old_head)),
        };
        match head {
            Some(TaskHead::Semantic(h)) => Ok(h),
            _ => Err(Error::Contract("feature projections need a semantic model".into())),
        }
    }

    /// `F(g)` for each cloud under the head that scores `task`.
    pub fn project_features(&self, task: Task, clouds: &[&PointCloud]) -> Result<Tensor> {
        let head = self.semantic_head(task)?;
        let mut rows = Vec::new();
        for chunk in clouds.chunks(EVAL_CHUNK) {
            let mut graph = Graph::new(&self.store);
            let g = self.features(&mut graph, chunk)?;
            let f = head.project_features(&mut graph, g)?;
            rows.extend_from_slice(graph.value(f).data());
        }
        Tensor::new(vec![clouds.len(), self.arch.head.k()], rows)
    }

    /// `H(E)` for the task's class embeddings.
    pub fn project_semantics(&self, task: Task) -> Result<Tensor> {
        let head = self.semantic_head(task)?;
        let e = self
            .class_matrix(task)
            .ok_or_else(|| Error::Contract("model has no class embeddings".into()))?;
        let mut graph = Graph::new(&self.store);
        let e = graph.input(e.clone());
        let h = head.project_semantics(&mut graph, e)?;
        Ok(graph.value(h).clone())
    }
}

fn check_embeddings(
    arch: &Architecture,
    old_classes: &[String],
    new_classes: &[String],
    embeddings: Option<(Tensor, Tensor)>,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    if old_classes.is_empty() || new_classes.is_empty() {
        return Err(Error::Contract("class rosters must be non-empty".into()));
    }
    match (arch.kind, embeddings) {
        (HeadKind::Semantic, None) => Err(Error::Contract("semantic heads need class embeddings".into())),
        (HeadKind::Semantic, Some((eo, en))) => {
            let d = arch.embedding_dim;
            if eo.shape() != [old_classes.len(), d] {
                return Err(Error::shape("old class matrix", eo.shape(), &[old_classes.len(), d]));
            }
            if en.shape() != [new_classes.len(), d] {
                return Err(Error::shape("new class matrix", en.shape(), &[new_classes.len(), d]));
            }
            Ok((Some(eo), Some(en)))
        }
        (HeadKind::Logit, _) => Ok((None, None)),
    }
}
