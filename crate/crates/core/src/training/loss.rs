use crate::autodiff::{log_sum_exp, softmax_tau_rows, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Batch-mean negative log-likelihood of `labels` under `softmax(scores)`.
pub fn loss_ce(graph: &mut Graph<'_>, scores: NodeId, labels: &[usize]) -> Result<NodeId> {
    graph.cross_entropy(scores, labels)
}

/// Batch-mean cross-entropy between the softened teacher distribution
/// `softmax(teacher / tau)` and the softened student distribution. The
/// teacher scores are constants. With `tau_squared` the result is scaled by
/// `tau^2`.
pub fn loss_kd(
    graph: &mut Graph<'_>,
    student: NodeId,
    teacher: &Tensor,
    tau: f64,
    tau_squared: bool,
) -> Result<NodeId> {
    if graph.value(student).shape() != teacher.shape() {
        return Err(Error::shape("loss_kd", graph.value(student).shape(), teacher.shape()));
    }
    let target = softmax_tau_rows(teacher, tau)?;
    let kd = graph.soft_cross_entropy(student, &target, tau)?;
    Ok(if tau_squared { graph.scale(kd, tau * tau) } else { kd })
}

/// `ce + lambda * kd`.
pub fn total_loss(graph: &mut Graph<'_>, ce: NodeId, kd: NodeId, lambda: f64) -> Result<NodeId> {
    check_lambda(lambda)?;
    let weighted = graph.scale(kd, lambda);
    graph.add(ce, weighted)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")))
    }
}

/// `-log softmax(scores)[label]` for one score vector.
pub fn cross_entropy_value(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::Contract(format!(
            "label index {label} out of range for {} classes",
            scores.len()
        )));
    }
    Ok(log_sum_exp(scores) - scores[label])
}

/// Distillation loss of one student/teacher score pair.
pub fn kd_value(student: &[f64], teacher: &[f64], tau: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::shape("kd_value", &[student.len()], &[teacher.len()]));
    }
    let q = softmax_tau_rows(&Tensor::vector(teacher.to_vec()), tau)?;
    let z: Vec<f64> = student.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&z);
    Ok(-q.data().iter().zip(&z).map(|(qi, zi)| qi * (zi - lse)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain textbook formulas, no log-sum-exp tricks beyond max shifting.
    fn ce_oracle(s: &[f64], label: usize) -> f64 {
        let max = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
        -((s[label] - max).exp() / z).ln()
    }

    fn softmax_oracle(s: &[f64], tau: f64) -> Vec<f64> {
        let max = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| ((v - max) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn kd_oracle(student: &[f64], teacher: &[f64], tau: f64) -> f64 {
        let q = softmax_oracle(teacher, tau);
        let p = softmax_oracle(student, tau);
        -q.iter().zip(&p).map(|(a, b)| a * b.ln()).sum::<f64>()
    }

    fn scalar(store: &ParamStore, f: impl FnOnce(&mut Graph<'_>) -> NodeId) -> f64 {
        let mut g = Graph::new(store);
        let n = f(&mut g);
        g.value(n).data()[0]
    }

    #[test]
    fn ce_examples() {
        let store = ParamStore::new();
        for c in [2usize, 5, 40] {
            let v = scalar(&store, |g| {
                let s = g.input(Tensor::filled(&[1, c], 0.7));
                loss_ce(g, s, &[c - 1]).unwrap()
            });
            assert!((v - (c as f64).ln()).abs() < 1e-12);
        }
        let v = cross_entropy_value(&[10.0, -10.0], 0).unwrap();
        let expect = (-20.0f64).exp().ln_1p();
        assert!((v - expect).abs() < 1e-14);
        assert!((v - 2.061e-9).abs() < 1e-12);
        assert!(matches!(cross_entropy_value(&[1.0, 2.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn ce_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::new();
        for _ in 0..200 {
            let c = rng.random_range(2..12);
            let s: Vec<f64> = (0..c).map(|_| rng.random_range(-8.0..8.0)).collect();
            let label = rng.random_range(0..c);
            let v = scalar(&store, |g| {
                let n = g.input(Tensor::new(vec![1, c], s.clone()).unwrap());
                loss_ce(g, n, &[label]).unwrap()
            });
            assert!((v - ce_oracle(&s, label)).abs() < 1e-12);
            assert!((cross_entropy_value(&s, label).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_examples() {
        let store = ParamStore::new();
        for tau in [0.5, 1.0, 3.0] {
            let v = scalar(&store, |g| {
                let s = g.input(Tensor::filled(&[2, 4], 1.5));
                loss_kd(g, s, &Tensor::filled(&[2, 4], 1.5), tau, false).unwrap()
            });
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
        // student == teacher gives the entropy of the softened teacher
        let t = vec![2.0, -1.0, 0.5];
        let q = softmax_oracle(&t, 3.0);
        let entropy: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((kd_value(&t, &t, 3.0).unwrap() - entropy).abs() < 1e-12);
        assert!(kd_value(&t, &t[..2], 3.0).is_err());
    }

    #[test]
    fn kd_matches_oracle_and_tau_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        for _ in 0..200 {
            let c = rng.random_range(2..8);
            let tau = rng.random_range(0.5..5.0);
            let s: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
            let t: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
            let tt = Tensor::new(vec![1, c], t.clone()).unwrap();
            let (plain, squared) = {
                let mut g = Graph::new(&store);
                let n = g.input(Tensor::new(vec![1, c], s.clone()).unwrap());
                let a = loss_kd(&mut g, n, &tt, tau, false).unwrap();
                let b = loss_kd(&mut g, n, &tt, tau, true).unwrap();
                (g.value(a).data()[0], g.value(b).data()[0])
            };
            assert!((plain - kd_oracle(&s, &t, tau)).abs() < 1e-12);
            assert!((kd_value(&s, &t, tau).unwrap() - plain).abs() < 1e-12);
            assert!((squared - tau * tau * plain).abs() < 1e-10);
        }
    }

    #[test]
    fn kd_gradient_vanishes_at_match() {
        let mut store = ParamStore::new();
        let t = Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let id = store.insert("s", t.clone()).unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let s = g.param(id);
            let kd = loss_kd(&mut g, s, &t, 3.0, false).unwrap();
            g.backward(kd).unwrap()
        };
        assert!(grads.get(id).unwrap().data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn total_loss_is_affine() {
        let store = ParamStore::new();
        let v = scalar(&store, |g| {
            let ce = g.input(Tensor::scalar(1.0));
            let kd = g.input(Tensor::scalar(2.0));
            total_loss(g, ce, kd, 3.0).unwrap()
        });
        assert_eq!(v, 7.0);
        let v = scalar(&store, |g| {
            let ce = g.input(Tensor::scalar(1.25));
            let kd = g.input(Tensor::scalar(9.0));
            total_loss(g, ce, kd, 0.0).unwrap()
        });
        assert_eq!(v, 1.25);
        let mut g = Graph::new(&store);
        let ce = g.input(Tensor::scalar(1.0));
        assert!(matches!(total_loss(&mut g, ce, ce, -1.0), Err(Error::Parameter(_))));
    }
}
