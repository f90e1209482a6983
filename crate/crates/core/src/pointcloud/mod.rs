//! Point-cloud ingestion, preprocessing and the synthetic shape corpus.

mod dataset;
mod manifest;
mod mesh;
mod synthetic;
mod xyz;

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use dataset::{DatasetSplit, Sample, SyntheticCorpus};
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use mesh::{parse_off, sample_surface, Mesh};
pub use synthetic::{
    generate_synthetic, synthetic_surface, ShapeParams, SyntheticShape, NEW_CLASSES, OLD_CLASSES,
    SYNTHETIC_CLASSES,
};
pub use xyz::{load_xyz, write_xyz};

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Contract(format!("unknown split {other:?}"))),
        }
    }
}

/// A set of 3D points with its class label and split.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: String,
    pub split: Split,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            label: String::new(),
            split: Split::Train,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>, split: Split) -> Self {
        self.label = label.into();
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// `n x 3` tensor of the coordinates.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Tensor::new(vec![self.points.len(), 3], self.points.concat())
    }
}

pub(crate) fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let c = cloud.centroid();
    let centered: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let scale = centered.iter().map(norm).fold(0.0, f64::max);
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate("all points are identical".into()));
    }
    Ok(PointCloud {
        points: centered.iter().map(|p| p.map(|v| v / scale)).collect(),
        label: cloud.label.clone(),
        split: cloud.split,
    })
}

/// Optional uniform rotation about the z axis followed by per-coordinate
/// Gaussian jitter clipped to three standard deviations.
pub fn augment(cloud: &PointCloud, seed: u64, jitter_sigma: f64, rotate: bool) -> Result<PointCloud> {
    if jitter_sigma < 0.0 || !jitter_sigma.is_finite() {
        return Err(Error::Parameter(format!(
            "jitter sigma must be non-negative, got {jitter_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = cloud.points.clone();
    if rotate {
        let (s, c) = rng.random_range(0.0..TAU).sin_cos();
        for p in &mut points {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, jitter_sigma).expect("sigma checked above");
        let bound = 3.0 * jitter_sigma;
        for p in &mut points {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng).clamp(-bound, bound);
            }
        }
    }
    Ok(PointCloud {
        points,
        label: cloud.label.clone(),
        split: cloud.split,
    })
}

/// Brings a cloud to exactly `n` points: a seeded subset when larger,
/// seeded duplication when smaller.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if cloud.len() == n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = if cloud.len() > n {
        rand::seq::index::sample(&mut rng, cloud.len(), n)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        let mut pts = cloud.points.clone();
        while pts.len() < n {
            pts.push(cloud.points[rng.random_range(0..cloud.len())]);
        }
        pts
    };
    Ok(PointCloud {
        points,
        label: cloud.label.clone(),
        split: cloud.split,
    })
}

/// Stateless 64-bit mixer used to derive independent per-item seeds.
pub(crate) fn mix_seed(seed: u64, salt: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in salt.bytes().chain(index.to_le_bytes()) {
        h = splitmix(h ^ u64::from(b));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-3.0..5.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0)])
                .collect(),
        )
    }

    #[test]
    fn normalize_cube_corners() {
        let mut pts = Vec::new();
        for x in [0.0, 2.0] {
            for y in [0.0, 2.0] {
                for z in [0.0, 2.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let out = normalize_unit_sphere(&PointCloud::new(pts)).unwrap();
        let c = out.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-12));
        assert!((out.max_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_already_normalized_is_unchanged() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, -0.5, 0.0]]);
        let out = normalize_unit_sphere(&cloud).unwrap();
        for (a, b) in cloud.points.iter().zip(&out.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_rejects_identical_points() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]);
        assert!(matches!(normalize_unit_sphere(&cloud), Err(Error::Degenerate(_))));
        assert!(matches!(normalize_unit_sphere(&PointCloud::new(vec![])), Err(Error::EmptyCloud)));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in any::<u64>(), n in 2usize..64) {
            let once = normalize_unit_sphere(&random_cloud(seed, n)).unwrap();
            let twice = normalize_unit_sphere(&once).unwrap();
            let c = once.centroid();
            prop_assert!(c.iter().all(|v| v.abs() < 1e-9));
            prop_assert!((once.max_norm() - 1.0).abs() < 1e-9);
            for (a, b) in once.points.iter().zip(&twice.points) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let cloud = random_cloud(1, 32);
        assert_eq!(augment(&cloud, 9, 0.0, false).unwrap(), cloud);
    }

    #[test]
    fn rotation_preserves_height_and_radius() {
        let cloud = random_cloud(2, 64);
        let out = augment(&cloud, 4, 0.0, true).unwrap();
        assert_ne!(out, cloud);
        for (a, b) in cloud.points.iter().zip(&out.points) {
            assert!((a[2] - b[2]).abs() < 1e-12);
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let cloud = random_cloud(3, 2000);
        let out = augment(&cloud, 5, 0.01, false).unwrap();
        let max = cloud
            .points
            .iter()
            .zip(&out.points)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max);
        assert!(max <= 0.03 + 1e-15);
        assert!(max > 0.0);
        assert_eq!(augment(&cloud, 5, 0.01, false).unwrap(), out);
        assert!(augment(&cloud, 5, -0.1, false).is_err());
    }

    #[test]
    fn resample_hits_count() {
        let cloud = random_cloud(4, 10);
        assert_eq!(resample(&cloud, 25, 1).unwrap().len(), 25);
        assert_eq!(resample(&cloud, 4, 1).unwrap().len(), 4);
        assert_eq!(resample(&cloud, 4, 1).unwrap(), resample(&cloud, 4, 1).unwrap());
    }
}
