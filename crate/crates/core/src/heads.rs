//! Projection heads and class scoring.
//!
//! A [`ProjectionHead`] pairs a feature projection F (`m -> 512 -> k`) with
//! a semantic projection H (`d -> k`); the score of class `c` is the dot
//! product `F(g) . H(E[c])`. The old task uses the `old` head for both
//! stages, the new task gets a second, freshly initialized `new` head.
//! [`LogitHead`] is the plain linear classifier used by the semantic-free
//! baselines.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::backbone::{bind_dense, init_dense};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HeadConfig {
    /// Widths of F after the backbone feature; the last entry is `k`.
    pub feature_widths: Vec<usize>,
    pub relu_on_last: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            feature_widths: vec![512, 256],
            relu_on_last: true,
        }
    }
}

impl HeadConfig {
    pub fn k(&self) -> usize {
        *self.feature_widths.last().expect("feature widths are non-empty")
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    feature: Vec<(ParamId, ParamId)>,
    semantic: (ParamId, ParamId),
    relu_on_last: bool,
}

impl ProjectionHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        embedding_dim: usize,
        config: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(feature_dim, embedding_dim, config, |name, i, o| {
            init_dense(store, &format!("{prefix}.{name}"), i, o, rng)
        })
    }

    pub fn bind(
        store: &ParamStore,
        prefix: &str,
        feature_dim: usize,
        embedding_dim: usize,
        config: &HeadConfig,
    ) -> Result<Self> {
        Self::build(feature_dim, embedding_dim, config, |name, i, o| {
            bind_dense(store, &format!("{prefix}.{name}"), i, o)
        })
    }

    fn build(
        feature_dim: usize,
        embedding_dim: usize,
        config: &HeadConfig,
        mut layer: impl FnMut(&str, usize, usize) -> Result<(ParamId, ParamId)>,
    ) -> Result<Self> {
        if config.feature_widths.is_empty() || config.feature_widths.contains(&0) {
            return Err(Error::Parameter(format!(
                "invalid projection widths {:?}",
                config.feature_widths
            )));
        }
        let mut widths = vec![feature_dim];
        widths.extend(&config.feature_widths);
        let feature = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| layer(&format!("feature.l{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let semantic = layer("semantic.l0", embedding_dim, config.k())?;
        Ok(ProjectionHead {
            feature,
            semantic,
            relu_on_last: config.relu_on_last,
        })
    }

    /// F: `[B x m] -> [B x k]`.
    pub fn project_features(&self, graph: &mut Graph<'_>, g: NodeId) -> Result<NodeId> {
        let mut h = g;
        let last = self.feature.len() - 1;
        for (i, &(w, b)) in self.feature.iter().enumerate() {
            let (wn, bn) = (graph.param(w), graph.param(b));
            h = graph.linear(h, wn, bn)?;
            if i < last || self.relu_on_last {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    /// H applied row-wise to a class matrix: `[C x d] -> [C x k]`.
    pub fn project_semantics(&self, graph: &mut Graph<'_>, classes: NodeId) -> Result<NodeId> {
        let (w, b) = self.semantic;
        let (wn, bn) = (graph.param(w), graph.param(b));
        let h = graph.linear(classes, wn, bn)?;
        Ok(if self.relu_on_last { graph.relu(h) } else { h })
    }

    /// `[B x C]` scores `F(g) . H(E)^T`.
    pub fn scores(&self, graph: &mut Graph<'_>, g: NodeId, classes: NodeId) -> Result<NodeId> {
        let f = self.project_features(graph, g)?;
        let h = self.project_semantics(graph, classes)?;
        graph.dot_scores(f, h)
    }
}

/// Single linear map `m -> |classes|`.
#[derive(Clone, Debug)]
pub struct LogitHead {
    weight: ParamId,
    bias: ParamId,
}

impl LogitHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (weight, bias) = init_dense(store, &format!("{prefix}.logit"), feature_dim, classes, rng)?;
        Ok(LogitHead { weight, bias })
    }

    pub fn bind(store: &ParamStore, prefix: &str, feature_dim: usize, classes: usize) -> Result<Self> {
        let (weight, bias) = bind_dense(store, &format!("{prefix}.logit"), feature_dim, classes)?;
        Ok(LogitHead { weight, bias })
    }

    pub fn scores(&self, graph: &mut Graph<'_>, g: NodeId) -> Result<NodeId> {
        let (w, b) = (graph.param(self.weight), graph.param(self.bias));
        graph.linear(g, w, b)
    }
}

/// Old-task scores of the old model, `F^o(g) . H^o(E^o)^T`.
pub fn score_old(graph: &mut Graph<'_>, g: NodeId, old_classes: NodeId, old_head: &ProjectionHead) -> Result<NodeId> {
    old_head.scores(graph, g, old_classes)
}

/// New-task scores of the new pipeline, `F^n(g) . H^n(E^n)^T`.
pub fn score_new(graph: &mut Graph<'_>, g: NodeId, new_classes: NodeId, new_head: &ProjectionHead) -> Result<NodeId> {
    new_head.scores(graph, g, new_classes)
}

/// Zero-shot scores: the old pipeline applied to new-class embeddings.
pub fn score_unseen(graph: &mut Graph<'_>, g: NodeId, new_classes: NodeId, old_head: &ProjectionHead) -> Result<NodeId> {
    old_head.scores(graph, g, new_classes)
}

pub fn logit_scores(graph: &mut Graph<'_>, g: NodeId, head: &LogitHead) -> Result<NodeId> {
    head.scores(graph, g)
}
