//! Dataset manifests.
//!
//! A manifest is a line-oriented text file. Blank lines and lines starting
//! with `#` are ignored; every other line is a keyword followed by
//! whitespace-separated fields:
//!
//! ```text
//! hierpack-manifest 1
//! seed 0
//! verbs 12
//! nouns 16
//! classes 12
//! horizon 4
//! dim 128
//! labels ar labels/ar.tsv
//! video v0000 train 73 features/v0000.hepf
//! ```
//!
//! The first line names the format version. `labels` appears at most once
//! per task, `video` once per video in dataset order. Paths are relative to
//! the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hierpack_core::data::{LabelSpace, Video};
use hierpack_core::tasks::TaskKind;

use crate::error::{Error, Result};
use crate::{features, fsutil, labels};

pub const HEADER: &str = "hierpack-manifest";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn id(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub segments: usize,
    pub features: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub labels: LabelSpace,
    pub dim: usize,
    pub label_files: BTreeMap<TaskKind, PathBuf>,
    pub videos: Vec<VideoRecord>,
}

/// Relative path with `/` separators, so manifests match across platforms.
fn portable(p: &Path) -> String {
    let parts: Vec<String> = p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    parts.join("/")
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {VERSION}\n");
        out += &format!("seed {}\n", self.seed);
        out += &format!("verbs {}\nnouns {}\n", self.labels.verbs, self.labels.nouns);
        out += &format!("classes {}\nhorizon {}\n", self.labels.classes, self.labels.horizon);
        out += &format!("dim {}\n", self.dim);
        for (k, p) in &self.label_files {
            out += &format!("labels {k} {}\n", portable(p));
        }
        for v in &self.videos {
            out += &format!("video {} {} {} {}\n", v.id, v.split.id(), v.segments, portable(&v.features));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut offset = 0u64;
        let mut seen_header = false;
        let mut scalars: BTreeMap<&str, u64> = BTreeMap::new();
        let mut label_files = BTreeMap::new();
        let mut videos: Vec<VideoRecord> = Vec::new();
        for raw in text.split_inclusive('\n') {
            let at = offset;
            offset += raw.len() as u64;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::format(path, at, m);
            let f: Vec<&str> = line.split_whitespace().collect();
            if !seen_header {
                if f.len() != 2 || f[0] != HEADER {
                    return Err(bad(format!("first line must be `{HEADER} {VERSION}`")));
                }
                if f[1] != VERSION.to_string() {
                    return Err(bad(format!("unsupported manifest version {}", f[1])));
                }
                seen_header = true;
                continue;
            }
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("{s:?} is not an unsigned integer")));
            match (f[0], f.len()) {
                (key @ ("seed" | "verbs" | "nouns" | "classes" | "horizon" | "dim"), 2) => {
                    if scalars.insert(key, int(f[1])?).is_some() {
                        return Err(bad(format!("duplicate {key}")));
                    }
                }
                ("labels", 3) => {
                    let k = TaskKind::from_id(f[1]).map_err(|e| bad(e.to_string()))?;
                    if label_files.insert(k, PathBuf::from(f[2])).is_some() {
                        return Err(bad(format!("duplicate labels for {k}")));
                    }
                }
                ("video", 5) => {
                    let split = match f[2] {
                        "train" => Split::Train,
                        "val" => Split::Val,
                        s => return Err(bad(format!("unknown split {s:?}"))),
                    };
                    if videos.iter().any(|v| v.id == f[1]) {
                        return Err(bad(format!("duplicate video {}", f[1])));
                    }
                    videos.push(VideoRecord {
                        id: f[1].to_string(),
                        split,
                        segments: int(f[3])? as usize,
                        features: PathBuf::from(f[4]),
                    });
                }
                _ => return Err(bad(format!("unrecognized line {line:?}"))),
            }
        }
        if !seen_header {
            return Err(Error::format(path, 0, "empty manifest"));
        }
        let get = |k: &str| scalars.get(k).copied().ok_or_else(|| Error::format(path, offset, format!("missing {k}")));
        Ok(Manifest {
            seed: get("seed")?,
            labels: LabelSpace {
                verbs: get("verbs")? as usize,
                nouns: get("nouns")? as usize,
                classes: get("classes")? as usize,
                horizon: get("horizon")? as usize,
            },
            dim: get("dim")? as usize,
            label_files,
            videos,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_text(path)?, path)
    }
}

/// Videos of a manifest split into train and validation, carrying the
/// annotations of the requested tasks only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Video>,
    pub val: Vec<Video>,
}

impl Dataset {
    /// Reads features and the label files of `tasks`; other label files are
    /// never opened.
    pub fn load(manifest_path: &Path, tasks: &[TaskKind]) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut tables = BTreeMap::new();
        for &k in tasks {
            let rel = manifest.label_files.get(&k).ok_or_else(|| Error::Missing {
                path: manifest_path.to_path_buf(),
                hint: format!("manifest lists no labels for task {k}"),
            })?;
            let p = root.join(rel);
            let table = labels::decode(k, &fsutil::read_text(&p)?, &p)?;
            if let Some(id) = table.keys().find(|id| !manifest.videos.iter().any(|v| &v.id == *id)) {
                return Err(Error::format(&p, 0, format!("annotations for unknown video {id}")));
            }
            tables.insert(k, (p, table));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for rec in &manifest.videos {
            let fp = root.join(&rec.features);
            let (feats, pe) = features::load(&fp)?;
            if feats.rows() != rec.segments || feats.row_width() != manifest.dim {
                return Err(Error::format(
                    &fp,
                    8,
                    format!(
                        "file holds {}x{} but the manifest declares {}x{}",
                        feats.rows(),
                        feats.row_width(),
                        rec.segments,
                        manifest.dim
                    ),
                ));
            }
            let duration = pe.len() as f64 * hierpack_core::data::SEGMENT_SECONDS;
            let mut annotations = BTreeMap::new();
            for (&k, (p, table)) in &tables {
                let anns = table.get(&rec.id).cloned().unwrap_or_default();
                for a in &anns {
                    a.validate(&manifest.labels.spec(k)).map_err(|e| Error::format(p, 0, format!("{}: {e}", rec.id)))?;
                    if a.start < 0.0 || a.end > duration {
                        return Err(Error::format(p, 0, format!("{}: annotation outside [0, {duration}]", rec.id)));
                    }
                }
                annotations.insert(k, anns);
            }
            let video = Video { id: rec.id.clone(), features: feats, timestamps: pe, annotations };
            match rec.split {
                Split::Train => train.push(video),
                Split::Val => val.push(video),
            }
        }
        Ok(Dataset { manifest, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            seed: 9,
            labels: LabelSpace { verbs: 3, nouns: 4, classes: 3, horizon: 2 },
            dim: 8,
            label_files: [(TaskKind::Recognition, PathBuf::from("labels/ar.tsv"))].into_iter().collect(),
            videos: vec![VideoRecord { id: "v0".into(), split: Split::Val, segments: 5, features: "f/v0.hepf".into() }],
        }
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        assert_eq!(Manifest::parse(&m.to_text(), Path::new("m")).unwrap(), m);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = format!("# hi\n\n{}", sample().to_text().replace("dim 8\n", "dim 8\n# later\n"));
        assert_eq!(Manifest::parse(&text, Path::new("m")).unwrap(), sample());
    }

    #[test]
    fn errors_carry_offsets() {
        let text = sample().to_text().replace("dim 8", "dim eight");
        let at = text.find("dim").unwrap() as u64;
        match Manifest::parse(&text, Path::new("m")).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, at),
            e => panic!("{e}"),
        }
        assert!(Manifest::parse("nope 1\n", Path::new("m")).is_err());
        assert!(Manifest::parse(&sample().to_text().replace("seed 9\n", ""), Path::new("m")).is_err());
        assert!(Manifest::parse(&format!("{}seed 3\n", sample().to_text()), Path::new("m")).is_err());
    }
}
