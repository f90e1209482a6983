//! Binary model container.
//!
//! Layout (all integers little-endian):
//! magic `LWF3DCKP`, `u32` version, `u32` header entry count, then
//! `(u32 len, key bytes, u32 len, value bytes)` per entry in key order,
//! `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u64` per dimension and the values as `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::training::{Architecture, HeadKind, Model};

pub const MAGIC: &[u8; 8] = b"LWF3DCKP";
pub const VERSION: u32 = 1;

const EMBEDDING_OLD: &str = "embedding.old";
const EMBEDDING_NEW: &str = "embedding.new";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every parameter of `model`, its class embeddings and
    /// `meta` entries (which must not clash with the architecture keys).
    pub fn from_model(model: &Model, meta: &[(&str, String)]) -> Result<Self> {
        let arch = &model.arch;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut header = BTreeMap::new();
        header.insert("version".to_string(), VERSION.to_string());
        let kind = match arch.kind {
            HeadKind::Semantic => "semantic",
            HeadKind::Logit => "logit",
        };
        header.insert("head.kind".into(), kind.into());
        header.insert("backbone.hidden".into(), join(&arch.backbone.hidden));
        header.insert("backbone.feature_dim".into(), arch.backbone.feature_dim.to_string());
        header.insert("head.feature_widths".into(), join(&arch.head.feature_widths));
        header.insert("head.relu_on_last".into(), arch.head.relu_on_last.to_string());
        header.insert("embedding_dim".into(), arch.embedding_dim.to_string());
        for (key, classes) in [("classes.old", &model.old_classes), ("classes.new", &model.new_classes)] {
            if let Some(bad) = classes.iter().find(|c| c.contains(',')) {
                return Err(Error::Checkpoint(format!("class name {bad:?} contains a comma")));
            }
            header.insert(key.into(), classes.join(","));
        }
        for (key, value) in meta {
            if header.insert(format!("meta.{key}"), value.clone()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate header key meta.{key}")));
            }
        }
        let mut tensors: Vec<(String, Tensor)> = model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (name, task) in [(EMBEDDING_OLD, crate::training::Task::Old), (EMBEDDING_NEW, crate::training::Task::New)] {
            if let Some(e) = model.class_matrix(task) {
                tensors.push((name.to_string(), e.clone()));
            }
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.header.get(&format!("meta.{key}")).map(String::as_str)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let kind = match self.field("head.kind")? {
            "semantic" => HeadKind::Semantic,
            "logit" => HeadKind::Logit,
            other => return Err(Error::Checkpoint(format!("unknown head kind {other:?}"))),
        };
        Ok(Architecture {
            kind,
            backbone: BackboneConfig {
                hidden: self.numbers("backbone.hidden")?,
                feature_dim: self.number("backbone.feature_dim")?,
            },
            head: HeadConfig {
                feature_widths: self.numbers("head.feature_widths")?,
                relu_on_last: self
                    .field("head.relu_on_last")?
                    .parse()
                    .map_err(|_| Error::Checkpoint("head.relu_on_last is not a boolean".into()))?,
            },
            embedding_dim: self.number("embedding_dim")?,
        })
    }

    /// Rebuilds the model with every parameter frozen.
    pub fn to_model(&self) -> Result<Model> {
        let arch = self.architecture()?;
        let classes = |key| -> Result<Vec<String>> {
            Ok(self.field(key)?.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
        };
        let mut store = ParamStore::new();
        let mut e_old = None;
        let mut e_new = None;
        for (name, t) in &self.tensors {
            match name.as_str() {
                EMBEDDING_OLD => e_old = Some(t.clone()),
                EMBEDDING_NEW => e_new = Some(t.clone()),
                _ => {
                    store.insert(name.clone(), t.clone())?;
                }
            }
        }
        store.freeze_all();
        let embeddings = match (e_old, e_new) {
            (Some(o), Some(n)) => Some((o, n)),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("only one class embedding matrix present".into())),
        };
        Model::from_store(arch, classes("classes.old")?, classes("classes.new")?, embeddings, store)
    }

    fn field(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("header has no {key:?}")))
    }

    fn number(&self, key: &str) -> Result<usize> {
        self.field(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("header {key:?} is not a number")))
    }

    fn numbers(&self, key: &str) -> Result<Vec<usize>> {
        self.field(key)?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("header {key:?} is not a number list"))))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for (k, v) in &self.header {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut header = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            header.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_synthetic, PointCloud};
    use crate::training::Task;

    fn small_arch(kind: HeadKind) -> Architecture {
        Architecture {
            kind,
            backbone: BackboneConfig {
                hidden: vec![4],
                feature_dim: 6,
            },
            head: HeadConfig {
                feature_widths: vec![5, 3],
                relu_on_last: false,
            },
            embedding_dim: 4,
        }
    }

    fn model(kind: HeadKind, with_new: bool) -> Model {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let e = (
            Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap(),
            Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 1.0]).unwrap(),
        );
        let mut m = Model::init(small_arch(kind), names(&["sphere", "cube"]), names(&["box"]), Some(e), 7).unwrap();
        if with_new {
            m.attach_new_head(7).unwrap();
        }
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for kind in [HeadKind::Semantic, HeadKind::Logit] {
            for with_new in [false, true] {
                let m = model(kind, with_new);
                let ck = Checkpoint::from_model(&m, &[("acc_old_star", 0.8125.to_string())]).unwrap();
                let bytes = ck.to_bytes();
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ck);
                let rebuilt = back.to_model().unwrap();
                assert_eq!(rebuilt.has_new_head(), with_new);
                let again = Checkpoint::from_model(&rebuilt, &[("acc_old_star", 0.8125.to_string())]).unwrap();
                assert_eq!(again.to_bytes(), bytes);
                assert_eq!(back.meta("acc_old_star"), Some("0.8125"));
            }
        }
    }

    #[test]
    fn restored_model_scores_identically() {
        let m = model(HeadKind::Semantic, true);
        let back = Checkpoint::from_bytes(&Checkpoint::from_model(&m, &[]).unwrap().to_bytes()).unwrap().to_model().unwrap();
        let cloud: PointCloud = generate_synthetic("cube", 1, 16).unwrap();
        for task in [Task::Old, Task::New] {
            assert_eq!(m.predict(task, &[&cloud]).unwrap(), back.predict(task, &[&cloud]).unwrap());
        }
        assert_eq!(m.store.checksum(), back.store.checksum());
        assert!(back.store.ids().all(|id| !back.store.is_trainable(id)));
    }

    #[test]
    fn header_records_architecture_and_classes() {
        let ck = Checkpoint::from_model(&model(HeadKind::Semantic, false), &[]).unwrap();
        assert_eq!(ck.architecture().unwrap(), small_arch(HeadKind::Semantic));
        assert_eq!(ck.header["classes.old"], "sphere,cube");
        assert_eq!(ck.header["version"], "1");
        assert_eq!(&ck.to_bytes()[..8], MAGIC);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Checkpoint::from_model(&model(HeadKind::Logit, false), &[]).unwrap().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"garbage!"), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(_))));
    }
}
