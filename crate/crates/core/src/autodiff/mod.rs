//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Leaves are either constants
//! ([`Graph::input`]) or parameters borrowed from a [`ParamStore`]
//! ([`Graph::param`]). [`Graph::backward`] returns [`Gradients`] which the
//! caller folds into the store's accumulators with
//! [`ParamStore::accumulate`]; accumulators are only cleared by
//! [`ParamStore::zero_grad`].
//!
//! ```
//! use lwf3d::autodiff::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.insert("w", Tensor::matrix(&[vec![2.0], vec![3.0]])?)?;
//! let b = store.insert("b", Tensor::vector(vec![1.0]))?;
//! let grads = {
//!     let mut g = Graph::new(&store);
//!     let x = g.input(Tensor::matrix(&[vec![1.0, 1.0]])?);
//!     let (wn, bn) = (g.param(w), g.param(b));
//!     let y = g.linear(x, wn, bn)?;
//!     assert_eq!(g.value(y).data(), &[6.0]);
//!     let loss = g.sum(y);
//!     g.backward(loss)?
//! };
//! store.accumulate(&grads);
//! assert_eq!(store.grad(w).data(), &[1.0, 1.0]);
//! # Ok::<(), lwf3d::Error>(())
//! ```

mod graph;
pub mod gradcheck;
mod params;
mod tensor;

pub use graph::{softmax_tau_rows, Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::log_sum_exp;

/// Softmax of a single logit vector at temperature `tau`.
pub fn softmax_tau(logits: &Tensor, tau: f64) -> crate::Result<Tensor> {
    softmax_tau_rows(logits, tau)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, sample_coords};
    use super::*;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn linear_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let w = g.input(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.input(Tensor::matrix(&[vec![1.0, 1.0]]).unwrap());
        let w = g.input(Tensor::matrix(&[vec![2.0], vec![3.0]]).unwrap());
        let b = g.input(Tensor::vector(vec![1.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        assert_eq!(g.value(y).shape(), &[1, 1]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xv, wv, bv) = (
            random_tensor(&mut rng, &[3, 4]),
            random_tensor(&mut rng, &[4, 2]),
            random_tensor(&mut rng, &[2]),
        );
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (x, w, b) = (g.input(xv.clone()), g.input(wv.clone()), g.input(bv.clone()));
        let y = g.linear(x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = bv.data()[j];
                for k in 0..4 {
                    acc += xv.data()[i * 4 + k] * wv.data()[k * 2 + j];
                }
                assert!((g.value(y).data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[4, 2]));
        let b = g.input(Tensor::zeros(&[2]));
        match g.linear(x, w, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let xn = g.param(x);
            let r = g.relu(xn);
            assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
            let s = g.sum(r);
            g.backward(s).unwrap()
        };
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        // Keep samples away from the kink at zero.
        let data = (0..12)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = store.insert("x", Tensor::new(vec![3, 4], data).unwrap()).unwrap();
        let weights = random_tensor(&mut rng, &[3, 4]);
        let coords = sample_coords(&store, 12, &mut rng);
        let report = check_gradients(&mut store, &coords, 1e-5, |g| {
            let xn = g.param(x);
            let r = g.relu(xn);
            let w = g.input(weights.clone());
            let d = g.dot_scores(r, w)?;
            Ok(g.sum(d))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn max_reduce_points_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let m = g.max_reduce_points(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        assert_eq!(g.value(m).shape(), &[2]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut store = ParamStore::new();
        let x = store
            .insert("x", Tensor::matrix(&[vec![2.0, 1.0], vec![2.0, 1.0]]).unwrap())
            .unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let xn = g.param(x);
            let m = g.max_reduce_points(xn).unwrap();
            let s = g.sum(m);
            g.backward(s).unwrap()
        };
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.insert("x", random_tensor(&mut rng, &[8, 4])).unwrap();
        let weights = random_tensor(&mut rng, &[1, 4]);
        let coords = sample_coords(&store, 32, &mut rng);
        let report = check_gradients(&mut store, &coords, 1e-5, |g| {
            let xn = g.param(x);
            let m = g.segment_max(xn, 8)?;
            let w = g.input(weights.clone());
            let d = g.dot_scores(m, w)?;
            Ok(g.sum(d))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax_tau(&Tensor::vector(vec![4.0; 5]), 0.7).unwrap();
        for &p in uniform.data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let p = softmax_tau(&Tensor::vector(vec![2.0, 0.0]), 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.73106).abs() < 1e-5);
        assert!(matches!(
            softmax_tau(&Tensor::vector(vec![1.0]), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(softmax_tau(&Tensor::vector(vec![1.0]), -1.0).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_tau(&Tensor::vector(vec![1000.0, 999.0, -1000.0]), 1.0).unwrap();
        assert!(p.all_finite());
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_node_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let x = store.insert("x", random_tensor(&mut rng, &[2, 5])).unwrap();
        let weights = random_tensor(&mut rng, &[1, 5]);
        let coords = sample_coords(&store, 10, &mut rng);
        let report = check_gradients(&mut store, &coords, 1e-5, |g| {
            let xn = g.param(x);
            let p = g.softmax_tau(xn, 1.7)?;
            let w = g.input(weights.clone());
            let d = g.dot_scores(p, w)?;
            Ok(g.sum(d))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::zeros(&[2, 3])).unwrap();
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&store);
                let xn = g.param(x);
                let s = g.sum(xn);
                g.backward(s).unwrap()
            };
            store.accumulate(&grads);
        }
        assert_eq!(store.grad(x).data(), &[2.0; 6]);
        store.zero_grad();
        assert_eq!(store.grad(x).data(), &[0.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_relu_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let w1 = store.insert("w1", random_tensor(&mut rng, &[3, 5])).unwrap();
        let b1 = store.insert("b1", random_tensor(&mut rng, &[5])).unwrap();
        let w2 = store.insert("w2", random_tensor(&mut rng, &[5, 2])).unwrap();
        let b2 = store.insert("b2", random_tensor(&mut rng, &[2])).unwrap();
        let xv = random_tensor(&mut rng, &[4, 3]);
        let coords = sample_coords(&store, 40, &mut rng);
        let report = check_gradients(&mut store, &coords, 1e-5, |g| {
            let x = g.input(xv.clone());
            let (a, b, c, d) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
            let h = g.linear(x, a, b)?;
            let h = g.relu(h);
            let y = g.linear(h, c, d)?;
            let y = g.relu(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let v = store.insert("v", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.set_trainable(v, false);
        let mut g = Graph::new(&store);
        let (a, b) = (g.param(w), g.param(v));
        let s = g.add(a, b).unwrap();
        let s = g.sum(s);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(v).is_none());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random_tensor(&mut rng, &[16, 8]);
        let wv = random_tensor(&mut rng, &[8, 8]);
        let run = || {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let x = g.input(xv.clone());
            let w = g.input(wv.clone());
            let b = g.input(Tensor::zeros(&[8]));
            let y = g.linear(x, w, b).unwrap();
            let p = g.softmax_tau(y, 3.0).unwrap();
            g.value(p).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
