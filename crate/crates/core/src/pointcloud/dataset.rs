use std::collections::BTreeSet;
use std::path::Path;

use super::{
    generate_synthetic, load_xyz, mix_seed, normalize_unit_sphere, parse_off, read_manifest,
    resample, sample_surface, PointCloud, Split, SYNTHETIC_CLASSES,
};
use crate::error::{Error, Result};

/// A preprocessed instance with its index in the owning roster.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub class_index: usize,
    pub cloud: PointCloud,
}

/// Old/new class rosters and the four instance lists built from them.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub old_train: Vec<Sample>,
    pub old_test: Vec<Sample>,
    pub new_train: Vec<Sample>,
    pub new_test: Vec<Sample>,
}

impl DatasetSplit {
    /// Routes each `(id, cloud)` by its label and split. Rosters must be
    /// disjoint and every label must belong to one of them.
    pub fn from_clouds(
        items: impl IntoIterator<Item = (String, PointCloud)>,
        old_classes: &[String],
        new_classes: &[String],
    ) -> Result<Self> {
        check_rosters(old_classes, new_classes)?;
        let mut out = DatasetSplit {
            old_classes: old_classes.to_vec(),
            new_classes: new_classes.to_vec(),
            ..Default::default()
        };
        for (id, cloud) in items {
            let (class_index, old) = match (
                old_classes.iter().position(|c| *c == cloud.label),
                new_classes.iter().position(|c| *c == cloud.label),
            ) {
                (Some(i), _) => (i, true),
                (None, Some(i)) => (i, false),
                (None, None) => return Err(Error::Roster(cloud.label.clone())),
            };
            let list = match (old, cloud.split) {
                (true, Split::Train) => &mut out.old_train,
                (true, Split::Test) => &mut out.old_test,
                (false, Split::Train) => &mut out.new_train,
                (false, Split::Test) => &mut out.new_test,
            };
            list.push(Sample { id, class_index, cloud });
        }
        Ok(out)
    }

    /// Loads a `path,label,split` manifest; paths are relative to the
    /// manifest's directory. XYZ files are resampled to `points`, OFF meshes
    /// are surface-sampled; everything is normalized to the unit sphere.
    pub fn from_manifest(
        manifest: &Path,
        points: usize,
        seed: u64,
        old_classes: &[String],
        new_classes: &[String],
    ) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let rows = read_manifest(&text)?;
        let mut items = Vec::with_capacity(rows.len());
        for row in rows {
            if !old_classes.contains(&row.label) && !new_classes.contains(&row.label) {
                continue;
            }
            let path = base.join(&row.path);
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let item_seed = mix_seed(seed, &row.path, 0);
            let raw = if row.path.to_ascii_lowercase().ends_with(".off") {
                sample_surface(&parse_off(&body)?, points, item_seed)?
            } else {
                resample(&load_xyz(&body)?, points, item_seed)?
            };
            let cloud = normalize_unit_sphere(&raw)?.with_label(row.label, row.split);
            items.push((row.path, cloud));
        }
        Self::from_clouds(items, old_classes, new_classes)
    }

    /// Fails with a protocol violation if any sample belongs to an old class.
    pub fn check_stage2_stream<'a>(&self, stream: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
        for s in stream {
            if !self.new_classes.contains(&s.cloud.label) {
                return Err(Error::Protocol(format!(
                    "instance {} of class {:?} is not a new class",
                    s.id, s.cloud.label
                )));
            }
        }
        Ok(())
    }
}

fn check_rosters(old: &[String], new: &[String]) -> Result<()> {
    let o: BTreeSet<&String> = old.iter().collect();
    let n: BTreeSet<&String> = new.iter().collect();
    if o.len() != old.len() || n.len() != new.len() {
        return Err(Error::Contract("class rosters contain duplicates".into()));
    }
    if let Some(shared) = o.intersection(&n).next() {
        return Err(Error::Contract(format!(
            "class {shared:?} is in both the old and the new roster"
        )));
    }
    if old.is_empty() || new.is_empty() {
        return Err(Error::Contract("class rosters must be non-empty".into()));
    }
    Ok(())
}

/// The in-memory synthetic corpus: `train_per_class + test_per_class`
/// instances for each of the eight shape classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub points: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            seed: 0,
            points: 256,
            train_per_class: 200,
            test_per_class: 50,
        }
    }
}

impl SyntheticCorpus {
    pub fn instance_id(class: &str, split: Split, index: usize) -> String {
        format!("{class}/{split}/{index:04}")
    }

    /// Generates every instance of `classes`, ordered by class, split, index.
    pub fn instances(&self, classes: &[&str]) -> Result<Vec<(String, PointCloud)>> {
        let mut out = Vec::new();
        for &class in classes {
            if !SYNTHETIC_CLASSES.contains(&class) {
                return Err(Error::Roster(class.to_string()));
            }
            for (split, count) in [(Split::Train, self.train_per_class), (Split::Test, self.test_per_class)] {
                for i in 0..count {
                    let seed = mix_seed(self.seed, &format!("{class}/{split}"), i as u64);
                    let cloud = generate_synthetic(class, seed, self.points)?.with_label(class, split);
                    out.push((Self::instance_id(class, split, i), cloud));
                }
            }
        }
        Ok(out)
    }

    pub fn split(&self, old_classes: &[String], new_classes: &[String]) -> Result<DatasetSplit> {
        check_rosters(old_classes, new_classes)?;
        let classes: Vec<&str> = old_classes.iter().chain(new_classes).map(String::as_str).collect();
        DatasetSplit::from_clouds(self.instances(&classes)?, old_classes, new_classes)
    }
}
