//! Seeded primitive shapes standing in for a real mesh corpus.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{mix_seed, normalize_unit_sphere, Point, PointCloud, Split};
use crate::error::{Error, Result};

pub const SYNTHETIC_CLASSES: [&str; 8] = [
    "sphere", "ellipsoid", "cube", "box", "cylinder", "cone", "torus", "plane",
];

/// Canonical old/new split of the synthetic corpus. Each new class has a
/// geometrically close old class (ellipsoid~sphere, box~cube, torus~cylinder).
pub const OLD_CLASSES: [&str; 5] = ["sphere", "cube", "cylinder", "cone", "plane"];
pub const NEW_CLASSES: [&str; 3] = ["ellipsoid", "box", "torus"];

const NOISE_SIGMA: f64 = 0.01;

/// Largest tilt of an instance away from upright, in radians.
pub const MAX_TILT: f64 = PI / 4.0;

/// Parameters drawn for one synthetic instance.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeParams {
    Sphere { radius: f64 },
    Ellipsoid { axes: [f64; 3] },
    Cube { side: f64 },
    Box { sides: [f64; 3] },
    /// Open tube without caps.
    Cylinder { radius: f64, height: f64 },
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
    Plane { sides: [f64; 2] },
}

/// Surface samples before noise and normalization.
#[derive(Clone, Debug)]
pub struct SyntheticShape {
    pub params: ShapeParams,
    pub points: Vec<Point>,
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = super::norm(&v);
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

/// Uniform point on the surface of an axis-aligned box centered at the origin.
fn box_surface(rng: &mut ChaCha8Rng, sides: [f64; 3]) -> Point {
    let [a, b, c] = sides;
    let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut face = 5;
    for (i, area) in areas.iter().enumerate() {
        if u < *area {
            face = i;
            break;
        }
        u -= area;
    }
    let mut p: Point = [0; 3].map(|_| rng.random_range(-0.5..0.5));
    let axis = face / 2;
    p[axis] = if face % 2 == 0 { -0.5 } else { 0.5 };
    [p[0] * a, p[1] * b, p[2] * c]
}

fn draw(class: &str, rng: &mut ChaCha8Rng) -> Result<ShapeParams> {
    let scale = rng.random_range(0.5..1.5);
    Ok(match class {
        "sphere" => ShapeParams::Sphere { radius: scale },
        "ellipsoid" => ShapeParams::Ellipsoid {
            axes: [scale, scale * rng.random_range(0.75..0.9), scale * rng.random_range(0.6..0.8)],
        },
        "cube" => ShapeParams::Cube { side: scale },
        "box" => ShapeParams::Box {
            sides: [scale, scale * rng.random_range(0.75..0.9), scale * rng.random_range(0.6..0.8)],
        },
        "cylinder" => ShapeParams::Cylinder {
            radius: scale,
            height: scale * rng.random_range(0.8..2.0),
        },
        "cone" => ShapeParams::Cone {
            radius: scale,
            height: scale * rng.random_range(1.5..2.5),
        },
        "torus" => ShapeParams::Torus {
            major: scale,
            minor: scale * rng.random_range(0.3..0.5),
        },
        "plane" => ShapeParams::Plane {
            sides: [scale, scale * rng.random_range(0.5..1.0)],
        },
        other => return Err(Error::Roster(other.to_string())),
    })
}

fn sample_point(params: &ShapeParams, rng: &mut ChaCha8Rng) -> Point {
    match *params {
        ShapeParams::Sphere { radius } => unit_direction(rng).map(|v| v * radius),
        ShapeParams::Ellipsoid { axes } => {
            let d = unit_direction(rng);
            [d[0] * axes[0], d[1] * axes[1], d[2] * axes[2]]
        }
        ShapeParams::Cube { side } => box_surface(rng, [side; 3]),
        ShapeParams::Box { sides } => box_surface(rng, sides),
        ShapeParams::Cylinder { radius, height } => {
            let theta = rng.random_range(0.0..TAU);
            let z = rng.random_range(-0.5..0.5) * height;
            [radius * theta.cos(), radius * theta.sin(), z]
        }
        ShapeParams::Cone { radius, height } => {
            let lateral = PI * radius * radius.hypot(height);
            let base = PI * radius * radius;
            let theta = rng.random_range(0.0..TAU);
            // Both the lateral surface and the base disc have density
            // proportional to distance from the axis.
            let t = rng.random::<f64>().sqrt();
            if rng.random::<f64>() * (lateral + base) < lateral {
                [radius * t * theta.cos(), radius * t * theta.sin(), height * (1.0 - t)]
            } else {
                [radius * t * theta.cos(), radius * t * theta.sin(), 0.0]
            }
        }
        ShapeParams::Torus { major, minor } => {
            // Rejection on the tube angle gives area-uniform samples.
            let phi = loop {
                let phi = rng.random_range(0.0..TAU);
                if rng.random::<f64>() * (major + minor) <= major + minor * phi.cos() {
                    break phi;
                }
            };
            let theta = rng.random_range(0.0..TAU);
            let ring = major + minor * phi.cos();
            [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()]
        }
        ShapeParams::Plane { sides } => [
            rng.random_range(-0.5..0.5) * sides[0],
            rng.random_range(-0.5..0.5) * sides[1],
            0.0,
        ],
    }
}

/// Random heading about z followed by a tilt of at most [`MAX_TILT`] about a
/// random horizontal axis. Row-major rotation matrix.
pub fn random_pose(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (sh, ch) = rng.random_range(0.0..TAU).sin_cos();
    let (uy, ux) = rng.random_range(0.0..TAU).sin_cos();
    let (st, ct) = rng.random_range(0.0..MAX_TILT).sin_cos();
    let k = 1.0 - ct;
    let tilt = [
        [ct + ux * ux * k, ux * uy * k, uy * st],
        [ux * uy * k, ct + uy * uy * k, -ux * st],
        [-uy * st, ux * st, ct],
    ];
    let heading = [[ch, -sh, 0.0], [sh, ch, 0.0], [0.0, 0.0, 1.0]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|l| tilt[i][l] * heading[l][j]).sum();
        }
    }
    r
}

fn rotate(r: &[[f64; 3]; 3], p: &Point) -> Point {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

/// Draws shape parameters for `(class, seed)` and samples `n` surface points
/// without noise or normalization.
pub fn synthetic_surface(class: &str, seed: u64, n: usize) -> Result<SyntheticShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class, 0));
    let params = draw(class, &mut rng)?;
    let points = (0..n).map(|_| sample_point(&params, &mut rng)).collect();
    Ok(SyntheticShape { params, points })
}

/// A normalized synthetic instance of `class`: the canonical surface in a
/// random pose, plus Gaussian noise (sigma 0.01).
pub fn generate_synthetic(class: &str, seed: u64, n: usize) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let shape = synthetic_surface(class, seed, n)?;
    let pose = random_pose(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, class, 2)));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class, 1));
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("constant sigma");
    let points = shape
        .points
        .iter()
        .map(|p| rotate(&pose, p).map(|v| v + normal.sample(&mut rng)))
        .collect();
    normalize_unit_sphere(&PointCloud::new(points).with_label(class, Split::Train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_lie_on_drawn_radius() {
        let shape = synthetic_surface("sphere", 12, 500).unwrap();
        let ShapeParams::Sphere { radius } = shape.params else { panic!() };
        for p in &shape.points {
            assert!((super::super::norm(p) - radius).abs() < 1e-9);
        }
    }

    #[test]
    fn plane_has_constant_coordinate() {
        let shape = synthetic_surface("plane", 3, 300).unwrap();
        assert!(shape.points.iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn torus_instances_differ_by_seed() {
        let a = synthetic_surface("torus", 1, 10).unwrap();
        let b = synthetic_surface("torus", 2, 10).unwrap();
        assert_ne!(a.params, b.params);
        assert_ne!(generate_synthetic("torus", 1, 64).unwrap(), generate_synthetic("torus", 2, 64).unwrap());
    }

    #[test]
    fn pose_is_a_bounded_tilt_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = random_pose(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|l| r[i][l] * r[j][l]).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
            // image of the z axis stays within MAX_TILT of upright
            assert!(r[2][2] >= MAX_TILT.cos() - 1e-12);
        }
    }

    #[test]
    fn unknown_class_is_roster_error() {
        assert!(matches!(generate_synthetic("pyramid", 0, 10), Err(Error::Roster(_))));
    }

    #[test]
    fn generated_clouds_are_normalized_and_deterministic() {
        for class in SYNTHETIC_CLASSES {
            let cloud = generate_synthetic(class, 42, 256).unwrap();
            assert_eq!(cloud.len(), 256);
            assert_eq!(cloud.label, class);
            assert!(cloud.centroid().iter().all(|v| v.abs() < 1e-9));
            assert!((cloud.max_norm() - 1.0).abs() < 1e-9);
            assert_eq!(cloud, generate_synthetic(class, 42, 256).unwrap());
        }
    }

    #[test]
    fn rosters_partition_the_classes() {
        let mut all: Vec<&str> = OLD_CLASSES.iter().chain(&NEW_CLASSES).copied().collect();
        all.sort();
        let mut expected = SYNTHETIC_CLASSES.to_vec();
        expected.sort();
        assert_eq!(all, expected);
    }

    /// Mean radius and sorted bounding-box extents.
    fn features(cloud: &PointCloud) -> [f64; 4] {
        let n = cloud.len() as f64;
        let mean_r = cloud.points.iter().map(super::super::norm).sum::<f64>() / n;
        let mut ext = [0usize, 1, 2].map(|k| {
            let (lo, hi) = cloud
                .points
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])));
            hi - lo
        });
        ext.sort_by(f64::total_cmp);
        [mean_r, ext[0] / ext[2], ext[1] / ext[2], ext[0] / ext[1].max(1e-9)]
    }

    #[test]
    fn classes_are_separable_by_simple_statistics() {
        let per_class = 40;
        let data: Vec<(usize, [f64; 4])> = SYNTHETIC_CLASSES
            .iter()
            .enumerate()
            .flat_map(|(c, name)| {
                (0..per_class).map(move |i| (c, features(&generate_synthetic(name, i as u64, 256).unwrap())))
            })
            .collect();
        let mut centroids = [[0.0; 4]; 8];
        for (c, f) in &data {
            for k in 0..4 {
                centroids[*c][k] += f[k] / per_class as f64;
            }
        }
        let correct = data
            .iter()
            .filter(|(c, f)| {
                let best = (0..8)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..4).map(|k| (f[k] - centroids[a][k]).powi(2)).sum();
                        let db: f64 = (0..4).map(|k| (f[k] - centroids[b][k]).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == *c
            })
            .count();
        let acc = correct as f64 / data.len() as f64;
        assert!(acc > 0.6, "nearest-centroid accuracy {acc}");
    }
}
