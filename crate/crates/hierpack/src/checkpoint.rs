//! Checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "HEPK" | u32 version | u64 optimizer steps
//! u32 meta length | meta text (key = value lines)
//! u32 entry count | entries sorted by name
//! 32-byte SHA-256 of the meta text
//! ```
//!
//! An entry is `u32 name length | name | u32 rank | u32 dims… | f64 values`.
//! Prototype sets are stored as entries `proto.{task}.matrix` (P×D) and
//! `proto.{task}.labels` (P×2 verb, noun).

use std::collections::BTreeMap;
use std::path::Path;

use hierpack_core::backpack::PrototypeSet;
use hierpack_core::diffcore::{ParameterStore, Tensor};
use hierpack_core::tasks::{Action, TaskKind};
use hierpack_core::train::{Checkpoint, CheckpointMeta};

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"HEPK";
pub const VERSION: u32 = 1;
const PROTO: &str = "proto.";

/// Hex SHA-256 of the checkpoint's canonical configuration text.
pub fn fingerprint(meta: &CheckpointMeta) -> String {
    fsutil::sha256_hex(meta.to_text().as_bytes())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = ckpt.meta.to_text();
    let mut entries: BTreeMap<String, Tensor> = ckpt.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for (k, p) in &ckpt.prototypes {
        entries.insert(format!("{PROTO}{k}.matrix"), p.matrix().clone());
        let labels: Vec<f64> = p.labels().iter().flat_map(|a| [a.verb as f64, a.noun as f64]).collect();
        entries.insert(format!("{PROTO}{k}.labels"), Tensor::matrix(p.len(), 2, labels).expect("two columns"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    out.extend_from_slice(&ckpt.store.steps().to_le_bytes());
    put_u32(&mut out, meta.len());
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, entries.len());
    for (n, t) in &entries {
        put_entry(&mut out, n, t);
    }
    use sha2::{Digest, Sha256};
    out.extend_from_slice(&Sha256::digest(meta.as_bytes()));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, self.pos as u64, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as usize)
    }

    fn fail(&self, at: usize, m: impl Into<String>) -> Error {
        Error::format(self.path, at as u64, m)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected HEPK"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let steps = u64::from_le_bytes(r.take(8, "step count")?.try_into().expect("eight bytes"));
    let meta_len = r.u32("meta length")?;
    let meta_at = r.pos;
    let meta_text = std::str::from_utf8(r.take(meta_len, "meta text")?).map_err(|_| r.fail(meta_at, "meta text is not UTF-8"))?;
    let meta = CheckpointMeta::parse(meta_text).map_err(|e| r.fail(meta_at, e.to_string()))?;
    let count = r.u32("entry count")?;
    let mut store = ParameterStore::new();
    let mut protos: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let nl = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(nl, "name")?).map_err(|_| r.fail(at, "entry name is not UTF-8"))?;
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("shape")?);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| r.fail(at, "shape overflows"))?, name)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(at, e.to_string()))?;
        if name.starts_with(PROTO) {
            protos.insert(name.to_string(), t);
        } else {
            store.insert(name, t).map_err(|e| r.fail(at, e.to_string()))?;
        }
    }
    let fp_at = r.pos;
    let stored = r.take(32, "fingerprint")?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    use sha2::{Digest, Sha256};
    if Sha256::digest(meta_text.as_bytes()).as_slice() != stored {
        return Err(r.fail(fp_at, "config fingerprint does not match the stored configuration"));
    }
    store.set_steps(steps);

    let mut prototypes = BTreeMap::new();
    for k in TaskKind::ALL {
        let (m, l) = (protos.remove(&format!("{PROTO}{k}.matrix")), protos.remove(&format!("{PROTO}{k}.labels")));
        let (m, l) = match (m, l) {
            (None, None) => continue,
            (Some(m), Some(l)) => (m, l),
            _ => return Err(r.fail(0, format!("prototype set {k} is incomplete"))),
        };
        if l.shape().len() != 2 || l.row_width() != 2 {
            return Err(r.fail(0, format!("prototype labels of {k} must be P x 2")));
        }
        let labels = (0..l.rows()).map(|i| Action::new(l.at(i, 0) as u32, l.at(i, 1) as u32)).collect();
        let mut set = PrototypeSet::new(k, m, labels).map_err(|e| r.fail(0, e.to_string()))?;
        set.freeze();
        prototypes.insert(k, set);
    }
    if let Some(name) = protos.keys().next() {
        return Err(r.fail(0, format!("unknown prototype entry {name}")));
    }
    Ok(Checkpoint { meta, store, prototypes })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &encode(ckpt))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fsutil::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hierpack_core::data::LabelSpace;
    use hierpack_core::model::ModelConfig;
    use hierpack_core::train::Stage;

    fn sample() -> Checkpoint {
        let mut store = ParameterStore::new();
        store.insert("a.w", Tensor::from_rows(&[[1.0, -2.5], [f64::MIN_POSITIVE, 3.0]]).unwrap()).unwrap();
        store.insert("a.b", Tensor::new(&[2], vec![0.1, 0.2]).unwrap()).unwrap();
        store.set_steps(17);
        let meta = CheckpointMeta {
            stage: Stage::Backpack,
            model: ModelConfig {
                backbone: Default::default(),
                labels: LabelSpace { verbs: 3, nouns: 2, classes: 3, horizon: 2 },
            },
            supports: vec![TaskKind::Recognition, TaskKind::Keyframe],
            novel: None,
        };
        let p = PrototypeSet::from_samples(
            TaskKind::Keyframe,
            &Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap(),
            &[Action::new(1, 0), Action::new(0, 1), Action::new(1, 0)],
        )
        .unwrap();
        Checkpoint { meta, store, prototypes: [(TaskKind::Keyframe, p)].into_iter().collect() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = encode(&c);
        let back = decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 1], Path::new("c")), Err(Error::Format { .. })));
        let mut b = bytes.clone();
        b[0] = b'Z';
        assert!(decode(&b, Path::new("c")).is_err());
        let mut b = bytes.clone();
        let last = b.len() - 1;
        b[last] ^= 1;
        match decode(&b, Path::new("c")).unwrap_err() {
            Error::Format { message, .. } => assert!(message.contains("fingerprint")),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = sample();
        let mut b = sample();
        b.meta.model.backbone.tau = 3.0;
        assert_ne!(fingerprint(&a.meta), fingerprint(&b.meta));
        assert_eq!(fingerprint(&a.meta).len(), 64);
    }
}
