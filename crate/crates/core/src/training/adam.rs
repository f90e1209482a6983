use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam over the trainable parameters of a [`ParamStore`],
/// reading the store's gradient accumulators.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moment of a parameter, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(index)?.as_ref()?, self.v.get(index)?.as_ref()?))
    }

    /// One update. Every gradient is checked before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for &id in &ids {
            if let Some(index) = store.grad(id).data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: store.name(id).to_string(),
                    index,
                });
            }
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let i = id.0;
            let grad = store.grad(id).data().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(store.value(id).shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(store.value(id).shape()));
            let value = store.value_mut(id).data_mut();
            for (((p, g), m), v) in value.iter_mut().zip(&grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::vector(vec![x])).unwrap();
        (store, id)
    }

    fn set_grad(store: &mut ParamStore, id: crate::autodiff::ParamId, g: f64) {
        store.zero_grad();
        store.accumulate(&crate::autodiff::Gradients(vec![(id, Tensor::vector(vec![g]))]));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut store, id) = scalar_store(1.5);
        let mut adam = Adam::new(0.1);
        for _ in 0..3 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.5]);
        let (m, v) = adam.moments(0).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn first_step_textbook_value() {
        let (mut store, id) = scalar_store(0.0);
        set_grad(&mut store, id, 1.0);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store).unwrap();
        let expect = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((store.value(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_oracle_on_quadratic() {
        // f(x) = 0.5 * a * (x - c)^2
        let (a, c, lr) = (3.0, -2.0, 0.05);
        let (mut store, id) = scalar_store(1.0);
        let mut adam = Adam::new(lr);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let gx = a * (store.value(id).data()[0] - c);
            set_grad(&mut store, id, gx);
            adam.step(&mut store).unwrap();

            let g = a * (x - c);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((store.value(id).data()[0] - x).abs() < 1e-10);
        }
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut store, id) = scalar_store(4.0);
        store.set_trainable(id, false);
        set_grad(&mut store, id, 1.0);
        Adam::new(0.1).step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[4.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let a = store.insert("layer.a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = store.insert("layer.b", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.accumulate(&crate::autodiff::Gradients(vec![
            (a, Tensor::vector(vec![0.5, 0.5])),
            (b, Tensor::vector(vec![0.0, f64::NAN])),
        ]));
        match Adam::new(0.1).step(&mut store) {
            Err(Error::NonFiniteGradient { name, index }) => {
                assert_eq!(name, "layer.b");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.value(a).data(), &[1.0, 2.0]);
    }
}
