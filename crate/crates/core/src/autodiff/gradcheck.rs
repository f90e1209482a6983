//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is an
//! independent check on [`Graph::backward`].

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(REL_ERROR_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(GradCheckEntry::rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

/// Picks up to `count` distinct `(parameter, flat index)` coordinates among
/// the trainable parameters of `store`.
pub fn sample_coords<R: Rng>(store: &ParamStore, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    all.shuffle(rng);
    all.truncate(count);
    all
}

fn scalar_value(store: &ParamStore, loss: &impl Fn(&mut Graph<'_>) -> Result<NodeId>) -> Result<f64> {
    let mut g = Graph::new(store);
    let out = loss(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    Ok(v.data()[0])
}

/// Compares backward gradients against `(f(x+h) - f(x-h)) / 2h` at each
/// coordinate. Parameter values are restored afterwards.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        g.backward(out)?
    };
    let mut entries = Vec::with_capacity(coords.len());
    for &(id, index) in coords {
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[index]);
        let original = store.value(id).data()[index];
        store.value_mut(id).data_mut()[index] = original + step;
        let plus = scalar_value(store, &loss);
        store.value_mut(id).data_mut()[index] = original - step;
        let minus = scalar_value(store, &loss);
        store.value_mut(id).data_mut()[index] = original;
        let numeric = (plus? - minus?) / (2.0 * step);
        entries.push(GradCheckEntry {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { entries })
}
