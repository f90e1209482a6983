//! Simplified PointNet trunk: a shared per-point MLP followed by max pooling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const PREFIX: &str = "backbone";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BackboneConfig {
    /// Hidden widths of the per-point MLP (3 -> hidden.. -> feature_dim).
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: vec![64, 128],
            feature_dim: 1024,
        }
    }
}

impl BackboneConfig {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

/// Anything that maps a batch of equally sized clouds to `[B x m]` features.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn extract(&self, graph: &mut Graph<'_>, clouds: &[&PointCloud]) -> Result<NodeId>;
}

/// He-normal weights (`sqrt(2 / fan_in)`) and zero biases for a
/// `fan_in -> fan_out` layer registered under `prefix`.
pub(crate) fn init_dense<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    let w = store.insert(format!("{prefix}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
    let b = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok((w, b))
}

pub(crate) fn bind_dense(
    store: &ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.require(&format!("{prefix}.weight"))?;
    let b = store.require(&format!("{prefix}.bias"))?;
    if store.value(w).shape() != [fan_in, fan_out] || store.value(b).shape() != [fan_out] {
        return Err(Error::shape(
            "bind_dense",
            store.value(w).shape(),
            &[fan_in, fan_out],
        ));
    }
    Ok((w, b))
}

#[derive(Clone, Debug)]
pub struct PointNetBackbone {
    layers: Vec<(ParamId, ParamId)>,
    feature_dim: usize,
}

impl PointNetBackbone {
    /// Registers freshly initialized layers in `store`.
    pub fn init<R: Rng>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let widths = config.widths();
        if widths.contains(&0) {
            return Err(Error::Parameter(format!("backbone widths must be positive: {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| init_dense(store, &format!("{PREFIX}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(PointNetBackbone {
            layers,
            feature_dim: config.feature_dim,
        })
    }

    /// Looks up layers previously registered by [`PointNetBackbone::init`].
    pub fn bind(store: &ParamStore, config: &BackboneConfig) -> Result<Self> {
        let layers = config
            .widths()
            .windows(2)
            .enumerate()
            .map(|(i, w)| bind_dense(store, &format!("{PREFIX}.l{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(PointNetBackbone {
            layers,
            feature_dim: config.feature_dim,
        })
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }
}

impl FeatureExtractor for PointNetBackbone {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, graph: &mut Graph<'_>, clouds: &[&PointCloud]) -> Result<NodeId> {
        let n = clouds.first().ok_or(Error::EmptyCloud)?.len();
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut data = Vec::with_capacity(clouds.len() * n * 3);
        for c in clouds {
            if c.len() != n {
                return Err(Error::shape("backbone batch", &[n, 3], &[c.len(), 3]));
            }
            data.extend(c.points.iter().flatten());
        }
        let mut h = graph.input(Tensor::new(vec![clouds.len() * n, 3], data)?);
        for &(w, b) in &self.layers {
            let (wn, bn) = (graph.param(w), graph.param(b));
            h = graph.linear(h, wn, bn)?;
            h = graph.relu(h);
        }
        graph.segment_max(h, n)
    }
}

/// Global feature `g` of a single cloud.
pub fn extract_feature(cloud: &PointCloud, backbone: &PointNetBackbone, store: &ParamStore) -> Result<Tensor> {
    let mut graph = Graph::new(store);
    let g = backbone.extract(&mut graph, &[cloud])?;
    graph.value(g).clone().reshape(vec![backbone.feature_dim()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, sample_coords};
    use crate::pointcloud::generate_synthetic;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            hidden: vec![8, 16],
            feature_dim: 32,
        }
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let build = |seed| {
            let mut store = ParamStore::new();
            PointNetBackbone::init(&mut store, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            store
        };
        let (a, b) = (build(1), build(1));
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), build(2).checksum());
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn first_layer_variance_is_he() {
        let mut store = ParamStore::new();
        PointNetBackbone::init(&mut store, &BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = store.value(store.id("backbone.l0.weight").unwrap());
        assert_eq!(w.shape(), &[3, 64]);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 2.0 / 3.0).abs() < 0.2 * 2.0 / 3.0, "variance {var}");
    }

    #[test]
    fn permutation_invariant_bit_exact() {
        let mut store = ParamStore::new();
        let bb = PointNetBackbone::init(&mut store, &small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let cloud = generate_synthetic("cone", 4, 128).unwrap();
        let mut shuffled = cloud.clone();
        shuffled.points.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        assert_ne!(shuffled.points, cloud.points);
        let a = extract_feature(&cloud, &bb, &store).unwrap();
        let b = extract_feature(&shuffled, &bb, &store).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[32]);
    }

    #[test]
    fn zero_weights_give_zero_feature() {
        let mut store = ParamStore::new();
        let bb = PointNetBackbone::init(&mut store, &small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for &(w, _) in bb.layers() {
            let shape = store.value(w).shape().to_vec();
            store.set_value(w, Tensor::zeros(&shape)).unwrap();
        }
        let g = extract_feature(&generate_synthetic("cube", 1, 16).unwrap(), &bb, &store).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_equals_single() {
        let mut store = ParamStore::new();
        let bb = PointNetBackbone::init(&mut store, &small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let clouds: Vec<_> = (0..4).map(|i| generate_synthetic("torus", i, 64).unwrap()).collect();
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        let mut graph = Graph::new(&store);
        let batched = bb.extract(&mut graph, &refs).unwrap();
        let batched = graph.value(batched).clone();
        for (i, c) in clouds.iter().enumerate() {
            let single = extract_feature(c, &bb, &store).unwrap();
            for (a, b) in single.data().iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ragged_batch_and_empty_rejected() {
        let mut store = ParamStore::new();
        let bb = PointNetBackbone::init(&mut store, &small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = generate_synthetic("cube", 1, 16).unwrap();
        let b = generate_synthetic("cube", 1, 12).unwrap();
        let mut graph = Graph::new(&store);
        assert!(bb.extract(&mut graph, &[&a, &b]).is_err());
        assert!(matches!(bb.extract(&mut graph, &[]), Err(Error::EmptyCloud)));
        let empty = PointCloud::new(vec![]);
        assert!(matches!(extract_feature(&empty, &bb, &store), Err(Error::EmptyCloud)));
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let bb = PointNetBackbone::init(&mut store, &small(), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let cloud = generate_synthetic("sphere", 2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = sample_coords(&store, 60, &mut rng);
        let report = check_gradients(&mut store, &coords, 1e-5, |g| {
            let f = bb.extract(g, &[&cloud])?;
            Ok(g.sum(f))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
