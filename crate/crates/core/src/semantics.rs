//! Class embeddings: word-vector text files or the shipped synthetic
//! attribute table.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pointcloud::SYNTHETIC_CLASSES;

/// `class,attr1..attr8` table for the synthetic shape classes.
pub const ATTRIBUTE_CSV: &str = include_str!("../data/synthetic_attributes.csv");
pub const ATTRIBUTE_COUNT: usize = 8;
pub const DEFAULT_DIM: usize = 300;
const PADDING_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
    provenance: String,
}

impl EmbeddingTable {
    pub fn new(dim: usize, provenance: impl Into<String>) -> Self {
        EmbeddingTable {
            dim,
            entries: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    pub fn insert(&mut self, class: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::EmbeddingFormat(format!(
                "vector of length {} in a {}-dimensional table",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmbeddingFormat("non-finite embedding entry".into()));
        }
        self.entries.insert(class.into(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn get(&self, class: &str) -> Option<&[f64]> {
        self.entries.get(class).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails with every roster class that has no entry.
    pub fn check_roster(&self, roster: &[String]) -> Result<()> {
        let missing: Vec<String> = roster
            .iter()
            .filter(|c| !self.entries.contains_key(*c))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingEmbedding(missing))
        }
    }

    /// Copy with every vector scaled to unit L2 norm.
    pub fn l2_normalized(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let v = if n > 0.0 { v.iter().map(|x| x / n).collect() } else { v.clone() };
                (k.clone(), v)
            })
            .collect();
        EmbeddingTable {
            dim: self.dim,
            entries,
            provenance: self.provenance.clone(),
        }
    }
}

/// Rows of `table` for `roster`, in roster order: `|roster| x d`.
pub fn class_matrix(table: &EmbeddingTable, roster: &[String]) -> Result<Tensor> {
    table.check_roster(roster)?;
    if roster.is_empty() {
        return Err(Error::Contract("empty class roster".into()));
    }
    let data = roster
        .iter()
        .flat_map(|c| table.entries[c].iter().copied())
        .collect();
    Tensor::new(vec![roster.len(), table.dim], data)
}

fn class_tokens(class: &str) -> Vec<&str> {
    class
        .split(|c: char| c == '_' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Reads a word-vector text stream (`token v1 .. vd` per line, optional
/// `count dim` first line) keeping only what `roster` needs. A class whose
/// name is itself a token uses that vector; otherwise its `_`/space
/// separated tokens are averaged.
pub fn load_embeddings(reader: impl BufRead, roster: &[String]) -> Result<EmbeddingTable> {
    let mut wanted: BTreeMap<String, Option<Vec<f64>>> = BTreeMap::new();
    for class in roster {
        wanted.insert(class.clone(), None);
        for t in class_tokens(class) {
            wanted.insert(t.to_string(), None);
        }
    }
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("embedding stream", e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if i == 0 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            dim = rest[0].parse().ok();
            continue;
        }
        match dim {
            None => dim = Some(rest.len()),
            Some(d) if d != rest.len() => {
                return Err(Error::EmbeddingFormat(format!(
                    "line {}: token {token:?} has {} values, expected {d}",
                    i + 1,
                    rest.len()
                )))
            }
            Some(_) => {}
        }
        if let Some(slot) = wanted.get_mut(token) {
            if slot.is_none() {
                let v = rest
                    .iter()
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::EmbeddingFormat(format!("line {}: invalid number", i + 1)))?;
                *slot = Some(v);
            }
        }
    }
    let dim = dim.filter(|&d| d > 0).ok_or_else(|| Error::EmbeddingFormat("no vectors in stream".into()))?;
    let mut table = EmbeddingTable::new(dim, "word-vector stream");
    let mut missing = Vec::new();
    for class in roster {
        if let Some(Some(v)) = wanted.get(class) {
            table.insert(class.clone(), v.clone())?;
            continue;
        }
        let found: Vec<&Vec<f64>> = class_tokens(class)
            .into_iter()
            .filter_map(|t| wanted.get(t).and_then(Option::as_ref))
            .collect();
        if found.is_empty() {
            missing.push(class.clone());
            continue;
        }
        let mut mean = vec![0.0; dim];
        for v in &found {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x / found.len() as f64;
            }
        }
        table.insert(class.clone(), mean)?;
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbedding(missing));
    }
    Ok(table)
}

/// Parses [`ATTRIBUTE_CSV`].
pub fn attribute_table() -> Result<BTreeMap<String, [f64; ATTRIBUTE_COUNT]>> {
    let mut reader = csv::Reader::from_reader(ATTRIBUTE_CSV.as_bytes());
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let mut attrs = [0.0; ATTRIBUTE_COUNT];
        for (k, slot) in attrs.iter_mut().enumerate() {
            *slot = record[k + 1]
                .parse()
                .map_err(|_| Error::EmbeddingFormat(format!("bad attribute in row {:?}", &record[0])))?;
        }
        out.insert(record[0].to_string(), attrs);
    }
    Ok(out)
}

/// Attribute vectors for the synthetic shape classes, padded to `dim` with
/// seeded uniform noise in `[-0.01, 0.01]`. Each class's padding depends
/// only on `(seed, class)`.
pub fn synthetic_embeddings(roster: &[String], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim < ATTRIBUTE_COUNT {
        return Err(Error::Parameter(format!(
            "embedding dimension must be at least {ATTRIBUTE_COUNT}, got {dim}"
        )));
    }
    let attrs = attribute_table()?;
    let mut table = EmbeddingTable::new(dim, "synthetic-attributes");
    for class in roster {
        if !SYNTHETIC_CLASSES.contains(&class.as_str()) {
            return Err(Error::Roster(class.clone()));
        }
        let base = attrs.get(class).ok_or_else(|| Error::MissingEmbedding(vec![class.clone()]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::pointcloud::mix_seed(seed, class, 0));
        let mut v = base.to_vec();
        v.extend((ATTRIBUTE_COUNT..dim).map(|_| rng.random_range(-PADDING_NOISE..=PADDING_NOISE)));
        table.insert(class.clone(), v)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn loads_plain_token() {
        let t = load_embeddings("sofa 1 2 3\nbed 4 5 6\n".as_bytes(), &names(&["sofa"])).unwrap();
        assert_eq!(t.get("sofa").unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.len(), 1);
        assert_eq!(t.dim(), 3);
    }

    #[test]
    fn multi_token_classes_average() {
        let text = "2 2\nnight 1 3\nstand 3 5\n";
        let t = load_embeddings(text.as_bytes(), &names(&["night_stand", "night stand"])).unwrap();
        assert_eq!(t.get("night_stand").unwrap(), &[2.0, 4.0]);
        assert_eq!(t.get("night stand").unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn missing_class_is_named() {
        match load_embeddings("sofa 1 2\n".as_bytes(), &names(&["sofa", "xylograph"])) {
            Err(Error::MissingEmbedding(m)) => assert_eq!(m, vec!["xylograph".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension_rejected() {
        assert!(matches!(
            load_embeddings("a 1 2\nb 1 2 3\n".as_bytes(), &names(&["a"])),
            Err(Error::EmbeddingFormat(_))
        ));
    }

    #[test]
    fn shipped_table_covers_all_classes() {
        let attrs = attribute_table().unwrap();
        assert_eq!(attrs.len(), 8);
        for c in SYNTHETIC_CLASSES {
            assert!(attrs[c].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn related_shapes_are_close() {
        let roster = names(&SYNTHETIC_CLASSES);
        let t = synthetic_embeddings(&roster, 300, 7).unwrap();
        let cos = |a: &str, b: &str| cosine(t.get(a).unwrap(), t.get(b).unwrap());
        assert!(cos("sphere", "ellipsoid") > 0.9);
        assert!(cos("cube", "box") > 0.9);
        assert!(cos("sphere", "cube") < 0.6);
        for round in ["sphere", "ellipsoid", "torus"] {
            for flat in ["cube", "box", "plane"] {
                assert!(cos(round, flat) < 0.6, "{round}/{flat}");
            }
        }
        // every new class's closest old class is its geometric partner
        for (new, partner) in [("ellipsoid", "sphere"), ("box", "cube"), ("torus", "cylinder")] {
            let best = crate::pointcloud::OLD_CLASSES
                .iter()
                .max_by(|a, b| cos(new, a).total_cmp(&cos(new, b)))
                .unwrap();
            assert_eq!(*best, partner);
            assert!(cos(new, partner) > 0.75);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_order_free() {
        let a = synthetic_embeddings(&names(&["sphere", "cube"]), 300, 1).unwrap();
        let b = synthetic_embeddings(&names(&["cube", "sphere"]), 300, 1).unwrap();
        assert_eq!(a, b);
        let c = synthetic_embeddings(&names(&["cube", "sphere"]), 300, 2).unwrap();
        assert_ne!(a, c);
        assert_eq!(&a.get("cube").unwrap()[..8], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(a.get("cube").unwrap()[8..].iter().all(|v| v.abs() <= 0.01));
        assert!(matches!(synthetic_embeddings(&names(&["pyramid"]), 300, 1), Err(Error::Roster(_))));
    }

    #[test]
    fn class_matrix_reindexes() {
        let t = synthetic_embeddings(&names(&["sphere", "cube"]), 16, 1).unwrap();
        let ab = class_matrix(&t, &names(&["sphere", "cube"])).unwrap();
        let ba = class_matrix(&t, &names(&["cube", "sphere"])).unwrap();
        assert_eq!(ab.shape(), &[2, 16]);
        assert_eq!(ab.row(0), ba.row(1));
        assert_eq!(ab.row(1), ba.row(0));
        assert_eq!(ab.row(0), t.get("sphere").unwrap());
        let one = class_matrix(&t, &names(&["cube"])).unwrap();
        assert_eq!(one.shape(), &[1, 16]);
        assert!(matches!(class_matrix(&t, &names(&["torus"])), Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn l2_normalization() {
        let t = synthetic_embeddings(&names(&["sphere"]), 16, 1).unwrap().l2_normalized();
        let n: f64 = t.get("sphere").unwrap().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
